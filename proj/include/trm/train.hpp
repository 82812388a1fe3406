#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "trm/adam.hpp"
#include "trm/checkpoint.hpp"
#include "trm/dataio.hpp"
#include "trm/leep.hpp"
#include "trm/riskweight.hpp"
#include "trm/unet.hpp"

namespace trm {

struct TrainConfig {
  double lr = 1e-4;
  std::int64_t iterations = 5000;
  std::int64_t batch = 8;
  std::uint64_t seed = 0;
  bool freeze_encoder = true;  // fine-tuning default; pretraining requires false
  SchemeKind scheme = SchemeKind::vanilla;
  CondMode cond_mode = CondMode::global;
  Orientation orientation = Orientation::hardness;
  std::int64_t recompute_interval = 0;  // 0 = compute the risk map once, keep it static
  std::int64_t depth = 3;
  std::int64_t base_channels = 8;

  void validate() const {
    if (!(lr > 0)) fail(Errc::validation, "lr must be positive");
    if (iterations < 1) fail(Errc::validation, "iterations must be >= 1");
    if (batch < 1) fail(Errc::validation, "batch must be >= 1");
    if (recompute_interval < 0) fail(Errc::validation, "recompute interval must be >= 0");
    if (depth < 1 || base_channels < 1) fail(Errc::validation, "model shape fields must be >= 1");
  }

  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.iterations = j.value("iterations", c.iterations);
    c.batch = j.value("batch", c.batch);
    c.seed = j.value("seed", c.seed);
    c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
    if (j.contains("scheme")) c.scheme = scheme_from_string(j.at("scheme").get<std::string>());
    if (j.contains("mode")) c.cond_mode = cond_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("orientation"))
      c.orientation = orientation_from_string(j.at("orientation").get<std::string>());
    c.recompute_interval = j.value("recompute_interval", c.recompute_interval);
    c.depth = j.value("depth", c.depth);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.validate();
    return c;
  }

  json to_json() const {
    json j;
    j["lr"] = lr;
    j["iterations"] = iterations;
    j["batch"] = batch;
    j["seed"] = seed;
    j["freeze_encoder"] = freeze_encoder;
    j["scheme"] = to_string(scheme);
    j["mode"] = to_string(cond_mode);
    j["orientation"] = to_string(orientation);
    j["recompute_interval"] = recompute_interval;
    j["depth"] = depth;
    j["base_channels"] = base_channels;
    return j;
  }
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_history;
};

namespace detail {

// Deterministic permutation-epoch sampler. Reshuffles when fewer than a
// full batch remains, so every batch has exactly `batch` subjects.
class BatchSampler {
 public:
  BatchSampler(std::int64_t n, std::int64_t batch, std::uint64_t seed)
      : batch_(batch), rng_(derive_seed(seed, {fnv1a64("batches")})) {
    order_.resize(static_cast<std::size_t>(n));
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }

  std::vector<std::int64_t> next() {
    if (pos_ + static_cast<std::size_t>(batch_) > order_.size()) reshuffle();
    std::vector<std::int64_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  order_.begin() + static_cast<std::ptrdiff_t>(pos_) + batch_);
    pos_ += static_cast<std::size_t>(batch_);
    return out;
  }

 private:
  void reshuffle() {
    fisher_yates(order_, rng_);
    pos_ = 0;
  }

  std::int64_t batch_;
  std::vector<std::int64_t> order_;
  std::size_t pos_ = 0;
  SplitMix64 rng_;
};

inline void gather_batch(const SliceDataset& ds, const std::vector<std::int64_t>& idx,
                         Tensor& images, LabelField& labels) {
  const std::int64_t h = ds.height(), w = ds.width();
  const std::int64_t b = static_cast<std::int64_t>(idx.size());
  images = Tensor({b, 1, h, w});
  labels = LabelField(b, h, w);
  for (std::int64_t r = 0; r < b; ++r) {
    const std::int64_t src = idx[static_cast<std::size_t>(r)];
    std::copy_n(ds.images.data().begin() + src * h * w, h * w, images.data().begin() + r * h * w);
    std::copy_n(ds.labels.data.begin() + src * h * w, h * w, labels.data.begin() + r * h * w);
  }
}

inline std::string params_digest(const ModelParams& params) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix_bytes = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& e : params.entries()) {
    mix_bytes(e.name.data(), e.name.size());
    mix_bytes(e.tensor.data().data(), e.tensor.data().size() * sizeof(double));
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

// Forward the model over a dataset in fixed-size chunks (pure inference).
inline Tensor forward_dataset(const ModelParams& params, const SliceDataset& ds,
                              std::int64_t chunk = 8) {
  const std::int64_t n = ds.count(), h = ds.height(), w = ds.width();
  const std::int64_t classes = params.config().num_classes;
  Tensor logits({n, classes, h, w});
  for (std::int64_t start = 0; start < n; start += chunk) {
    const std::int64_t stop = std::min(n, start + chunk);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor images;
    LabelField ignored;
    detail::gather_batch(ds, idx, images, ignored);
    Tensor part = unet_forward(params, images);
    std::copy(part.data().begin(), part.data().end(),
              logits.data().begin() + start * classes * h * w);
  }
  return logits;
}

struct RiskResult {
  TransferabilityMap tmap;
  RiskMap risk;
};

// Runs the model over the target stack, builds the dummy-distribution
// field, and turns per-pixel LEEP into the exponential risk map.
inline RiskResult compute_risk(const ModelParams& source, const SliceDataset& target,
                               CondMode mode, Orientation orientation) {
  target.validate();
  const UNetConfig& cfg = source.config();
  if (cfg.height != target.height() || cfg.width != target.width()) {
    fail(Errc::validation, "checkpoint expects " + std::to_string(cfg.height) + "x" +
                               std::to_string(cfg.width) + " inputs but the dataset is " +
                               std::to_string(target.height()) + "x" +
                               std::to_string(target.width()));
  }
  Tensor logits = forward_dataset(source, target);
  DummyDistField dummy = DummyDistField::from_logits(logits);
  TransferabilityMap tmap = transferability_map(dummy, target.labels, target.num_classes(), mode);
  RiskMap::Provenance prov{detail::params_digest(source), target.manifest.id, mode};
  RiskMap risk = risk_map(normalize_map(tmap, orientation), 10.0, std::move(prov));
  return {std::move(tmap), std::move(risk)};
}

inline RiskResult compute_risk(const ModelParams& source, const SliceDataset& target,
                               const TrainConfig& cfg) {
  return compute_risk(source, target, cfg.cond_mode, cfg.orientation);
}

// Core loop shared by pretraining and fine-tuning. The scheme payload is
// taken as given; the risk-map payload is refreshed from the live model
// every `recompute_interval` iterations when that knob is set.
inline TrainResult train_loop(ModelParams params, const SliceDataset& ds, const TrainConfig& cfg,
                              WeightingScheme scheme) {
  cfg.validate();
  ds.validate();
  if (ds.count() < 1) fail(Errc::validation, "training needs a non-empty dataset");
  if (cfg.batch > ds.count()) {
    fail(Errc::validation, "batch " + std::to_string(cfg.batch) + " exceeds dataset size " +
                               std::to_string(ds.count()));
  }
  params.sync_grad_flags();
  std::vector<Tensor> tensors;
  std::vector<bool> trainable;
  for (auto& e : params.entries()) {
    tensors.push_back(e.tensor);
    trainable.push_back(e.trainable);
  }
  AdamState opt(AdamConfig{.lr = cfg.lr});
  detail::BatchSampler sampler(ds.count(), cfg.batch, cfg.seed);

  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(cfg.iterations));
  for (std::int64_t iter = 0; iter < cfg.iterations; ++iter) {
    if (cfg.recompute_interval > 0 && scheme.kind == SchemeKind::riskmap && iter > 0 &&
        iter % cfg.recompute_interval == 0) {
      scheme.risk = compute_risk(params, ds, cfg).risk;
    }
    Tensor images;
    LabelField labels;
    detail::gather_batch(ds, sampler.next(), images, labels);

    for (auto& t : tensors) t.zero_grad();
    Tape tape;
    Tensor logits = unet_forward(params, images, &tape);
    Tensor ce = cross_entropy_map(logits, labels, &tape);
    Tensor loss = scheme_loss(scheme, ce, labels, &tape);
    const double loss_value = loss.value();
    if (!std::isfinite(loss_value)) {
      fail(Errc::divergence, "loss diverged at iteration " + std::to_string(iter));
    }
    backward(loss, tape);
    adam_step(tensors, trainable, opt);
    result.loss_history.push_back(loss_value);
  }
  result.params = std::move(params);
  return result;
}

// Full-model training from scratch on a source task, vanilla scheme.
inline TrainResult pretrain(const SliceDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.freeze_encoder) {
    fail(Errc::validation, "pretrain requires freeze_encoder=false (nothing is transferred yet)");
  }
  ds.validate();
  UNetConfig model_cfg{1, ds.num_classes(), cfg.depth, cfg.base_channels, ds.height(), ds.width()};
  ModelParams params = build_unet(model_cfg, cfg.seed);
  return train_loop(std::move(params), ds, cfg, WeightingScheme::vanilla());
}

// Fine-tune a source checkpoint on target data. When the class counts
// differ the 1x1 head is rebuilt with a fresh init; the encoder freezes per
// config; map-based schemes take their payload from the source model before
// any update.
inline TrainResult finetune(const ModelParams& source, const SliceDataset& target,
                            const TrainConfig& cfg) {
  cfg.validate();
  target.validate();
  const UNetConfig& src_cfg = source.config();
  if (src_cfg.height != target.height() || src_cfg.width != target.width()) {
    fail(Errc::validation, "checkpoint expects " + std::to_string(src_cfg.height) + "x" +
                               std::to_string(src_cfg.width) + " inputs but the dataset is " +
                               std::to_string(target.height()) + "x" +
                               std::to_string(target.width()));
  }

  WeightingScheme scheme;
  switch (cfg.scheme) {
    case SchemeKind::vanilla:
      scheme = WeightingScheme::vanilla();
      break;
    case SchemeKind::class_weighted:
      scheme = WeightingScheme::with_class(class_weights(target.labels, target.num_classes()));
      break;
    case SchemeKind::trsmap: {
      RiskResult rr = compute_risk(source, target, cfg);
      scheme = WeightingScheme::with_trs(normalize_map(rr.tmap, Orientation::hardness));
      break;
    }
    case SchemeKind::riskmap:
      scheme = WeightingScheme::with_risk(compute_risk(source, target, cfg).risk);
      break;
  }

  ModelParams params = source.clone();
  if (src_cfg.num_classes != target.num_classes()) {
    UNetConfig new_cfg = src_cfg;
    new_cfg.num_classes = target.num_classes();
    SplitMix64 rng(derive_seed(cfg.seed, {fnv1a64("head-rebuild")}));
    std::vector<ParamEntry> entries;
    for (const auto& e : params.entries()) {
      if (e.name == "head.kernel") {
        entries.push_back({e.name,
                           he_uniform_kernel({new_cfg.num_classes, new_cfg.base_channels, 1, 1}, rng),
                           e.trainable, e.encoder});
      } else if (e.name == "head.bias") {
        entries.push_back({e.name, Tensor({new_cfg.num_classes}, 0.0), e.trainable, e.encoder});
      } else {
        entries.push_back(e);
      }
    }
    params = ModelParams(new_cfg, std::move(entries));
  }
  if (cfg.freeze_encoder) params = freeze_encoder(std::move(params));
  return train_loop(std::move(params), target, cfg, std::move(scheme));
}

// Argmax decode of [N,C,H,W] logits; ties resolve to the lowest class index.
inline LabelField argmax_decode(const Tensor& logits) {
  if (logits.ndim() != 4) {
    fail(Errc::validation, "argmax_decode expects [N,C,H,W], got " + shape_str(logits.shape()));
  }
  const std::int64_t n = logits.dim(0), classes = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  LabelField pred(n, h, w);
  const double* lp = logits.data().data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t p = 0; p < h * w; ++p) {
      std::int32_t best = 0;
      double bv = lp[i * classes * h * w + p];
      for (std::int64_t c = 1; c < classes; ++c) {
        const double v = lp[(i * classes + c) * h * w + p];
        if (v > bv) {
          bv = v;
          best = static_cast<std::int32_t>(c);
        }
      }
      pred.data[static_cast<std::size_t>(i * h * w + p)] = best;
    }
  return pred;
}

inline LabelField predict(const ModelParams& params, const SliceDataset& ds) {
  return argmax_decode(forward_dataset(params, ds));
}

// Dice overlap 2|A∩B| / (|A| + |B|) for class-c masks; 1.0 when both empty.
inline double dice(const LabelField& pred, const LabelField& truth, std::int32_t cls) {
  if (pred.n != truth.n || pred.h != truth.h || pred.w != truth.w) {
    fail(Errc::validation, "dice rasters have different shapes");
  }
  std::int64_t a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool pa = pred.data[i] == cls;
    const bool pb = truth.data[i] == cls;
    a += pa;
    b += pb;
    inter += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

struct DiceReport {
  std::vector<double> per_class;
  double macro_foreground = 0.0;
  std::int64_t samples = 0;

  json to_json() const {
    json j;
    j["per_class"] = per_class;
    j["macro_foreground"] = macro_foreground;
    j["samples"] = samples;
    return j;
  }
};

// Dataset-level Dice: intersections and mask sizes are pooled over the
// whole stack per class (micro), then averaged over foreground classes.
inline DiceReport evaluate(const ModelParams& params, const SliceDataset& ds) {
  ds.validate();
  if (params.config().num_classes != ds.num_classes()) {
    fail(Errc::validation, "model predicts " + std::to_string(params.config().num_classes) +
                               " classes but the dataset declares " +
                               std::to_string(ds.num_classes()));
  }
  LabelField pred = predict(params, ds);
  DiceReport report;
  report.samples = ds.count();
  const std::int64_t classes = ds.num_classes();
  report.per_class.resize(static_cast<std::size_t>(classes));
  double macro = 0.0;
  for (std::int64_t c = 0; c < classes; ++c) {
    const double d = dice(pred, ds.labels, static_cast<std::int32_t>(c));
    report.per_class[static_cast<std::size_t>(c)] = d;
    if (c > 0) macro += d;
  }
  report.macro_foreground = classes > 1 ? macro / static_cast<double>(classes - 1) : 0.0;
  return report;
}

}  // namespace trm
