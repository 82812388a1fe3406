#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "trm/common.hpp"
#include "trm/rng.hpp"
#include "trm/tensor.hpp"

namespace trm {

// Miniature 2D U-Net: `depth` down/up levels, two 3x3 conv+relu per level,
// 2x2 max-pool down, nearest-neighbor upsample + skip concatenation up, and
// a final 1x1 conv head. Channel width doubles per level from base_channels.
struct UNetConfig {
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 2;
  std::int64_t depth = 3;
  std::int64_t base_channels = 8;
  std::int64_t height = 64;  // expected input extent, must be divisible by 2^depth
  std::int64_t width = 64;

  std::int64_t level_channels(std::int64_t level) const { return base_channels << level; }
  std::int64_t divisor() const { return std::int64_t{1} << depth; }

  void validate() const {
    if (in_channels < 1) fail(Errc::validation, "in_channels must be >= 1");
    if (num_classes < 2) fail(Errc::validation, "num_classes must be >= 2");
    if (depth < 1) fail(Errc::validation, "depth must be >= 1");
    if (base_channels < 1) fail(Errc::validation, "base_channels must be >= 1");
    if (height < 1 || width < 1) fail(Errc::validation, "input extent must be positive");
    if (height % divisor() != 0 || width % divisor() != 0) {
      fail(Errc::validation, "input extent " + std::to_string(height) + "x" + std::to_string(width) +
                                 " must be divisible by " + std::to_string(divisor()));
    }
    if (height / divisor() < 1 || width / divisor() < 1) {
      fail(Errc::validation, "depth " + std::to_string(depth) +
                                 " collapses the bottleneck below 1 pixel for " +
                                 std::to_string(height) + "x" + std::to_string(width));
    }
  }

  bool operator==(const UNetConfig&) const = default;
};

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  bool encoder = false;
};

// Named parameter collection. Entry order is a pure function of the config,
// which makes initialization, checkpoints, and optimizer slots stable.
class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(UNetConfig cfg, std::vector<ParamEntry> entries)
      : cfg_(std::move(cfg)), entries_(std::move(entries)) {}

  const UNetConfig& config() const { return cfg_; }
  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  const ParamEntry& at(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    fail(Errc::validation, "no parameter named " + std::string(name));
  }

  ModelParams clone() const {
    std::vector<ParamEntry> copy;
    copy.reserve(entries_.size());
    for (const auto& e : entries_) copy.push_back({e.name, e.tensor.clone(), e.trainable, e.encoder});
    return ModelParams(cfg_, std::move(copy));
  }

  // Mirror the trainable flags into requires_grad so the tape only records
  // what the optimizer will consume.
  void sync_grad_flags() {
    for (auto& e : entries_) e.tensor.set_requires_grad(e.trainable);
  }

 private:
  UNetConfig cfg_;
  std::vector<ParamEntry> entries_;
};

// (name, kernel shape, encoder flag) rows in declaration order.
struct ParamSpec {
  std::string name;
  Shape shape;
  bool encoder;
};

inline std::vector<ParamSpec> unet_param_table(const UNetConfig& cfg) {
  std::vector<ParamSpec> table;
  auto conv = [&table](const std::string& prefix, std::int64_t cin, std::int64_t cout,
                       std::int64_t k, bool enc) {
    table.push_back({prefix + ".kernel", {cout, cin, k, k}, enc});
    table.push_back({prefix + ".bias", {cout}, enc});
  };
  for (std::int64_t l = 0; l < cfg.depth; ++l) {
    const std::int64_t cin = l == 0 ? cfg.in_channels : cfg.level_channels(l - 1);
    const std::int64_t c = cfg.level_channels(l);
    conv("enc." + std::to_string(l) + ".conv1", cin, c, 3, true);
    conv("enc." + std::to_string(l) + ".conv2", c, c, 3, true);
  }
  {
    const std::int64_t cin = cfg.level_channels(cfg.depth - 1);
    const std::int64_t c = cfg.level_channels(cfg.depth);
    conv("bot.conv1", cin, c, 3, true);
    conv("bot.conv2", c, c, 3, true);
  }
  for (std::int64_t l = cfg.depth - 1; l >= 0; --l) {
    const std::int64_t c = cfg.level_channels(l);
    conv("dec." + std::to_string(l) + ".conv1", cfg.level_channels(l + 1) + c, c, 3, false);
    conv("dec." + std::to_string(l) + ".conv2", c, c, 3, false);
  }
  conv("head", cfg.base_channels, cfg.num_classes, 1, false);
  return table;
}

inline Tensor he_uniform_kernel(const Shape& shape, SplitMix64& rng) {
  Tensor t(shape);
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

// He-uniform kernels, zero biases, everything trainable. Deterministic in seed.
inline ModelParams build_unet(const UNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(derive_seed(seed, {fnv1a64("unet-init")}));
  std::vector<ParamEntry> entries;
  for (const auto& spec : unet_param_table(cfg)) {
    Tensor t = spec.shape.size() == 1 ? Tensor(spec.shape, 0.0) : he_uniform_kernel(spec.shape, rng);
    entries.push_back({spec.name, std::move(t), true, spec.encoder});
  }
  return ModelParams(cfg, std::move(entries));
}

inline Tensor unet_forward(const ModelParams& params, const Tensor& batch, Tape* tape = nullptr) {
  const UNetConfig& cfg = params.config();
  if (batch.ndim() != 4 || batch.dim(1) != cfg.in_channels) {
    fail(Errc::validation, "forward expects [N," + std::to_string(cfg.in_channels) +
                               ",H,W], got " + shape_str(batch.shape()));
  }
  if (batch.dim(2) % cfg.divisor() != 0 || batch.dim(3) % cfg.divisor() != 0) {
    fail(Errc::validation, "spatial extents of " + shape_str(batch.shape()) +
                               " must be divisible by " + std::to_string(cfg.divisor()));
  }
  auto p = [&params](const std::string& name) -> const Tensor& { return params.at(name).tensor; };
  auto block = [&](Tensor x, const std::string& prefix) {
    x = relu(conv2d(x, p(prefix + ".conv1.kernel"), p(prefix + ".conv1.bias"), 1, 1, tape), tape);
    return relu(conv2d(x, p(prefix + ".conv2.kernel"), p(prefix + ".conv2.bias"), 1, 1, tape), tape);
  };

  Tensor x = batch;
  std::vector<Tensor> skips;
  for (std::int64_t l = 0; l < cfg.depth; ++l) {
    x = block(x, "enc." + std::to_string(l));
    skips.push_back(x);
    x = max_pool2(x, tape);
  }
  x = block(x, "bot");
  for (std::int64_t l = cfg.depth - 1; l >= 0; --l) {
    x = upsample_nn2(x, tape);
    x = concat_channels(x, skips[static_cast<std::size_t>(l)], tape);
    x = block(x, "dec." + std::to_string(l));
  }
  return conv2d(x, p("head.kernel"), p("head.bias"), 1, 0, tape);
}

// Marks every encoder-tagged parameter non-trainable and every decoder
// parameter trainable. Idempotent.
inline ModelParams freeze_encoder(ModelParams params) {
  for (auto& e : params.entries()) e.trainable = !e.encoder;
  return params;
}

}  // namespace trm
