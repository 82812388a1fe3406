// Acceptance suite: one line per criterion, [PASS]/[FAIL], exit = #failures.
//
// Usage: trm_acceptance [--suite <desk-default.json>] [--out <dir>] [--jobs n]

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>
#include <unistd.h>

#include "oracles.hpp"
#include "trm/trm.hpp"

using namespace trm;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  const std::string ba = read_bytes(a), bb = read_bytes(b);
  return !ba.empty() && ba == bb;
}

double wall_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// criterion 1: LEEP oracle equivalence
// ---------------------------------------------------------------------------
bool criterion_leep_oracle(std::string& detail) {
  SplitMix64 rng(1001);
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int cs = 0; cs < 100; ++cs) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(50));
    const std::int64_t csrc = 2 + static_cast<std::int64_t>(rng.below(4));
    const std::int64_t ct = 2 + static_cast<std::int64_t>(rng.below(4));
    std::vector<std::vector<double>> dummies;
    std::vector<std::int32_t> labels;
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<double> d(static_cast<std::size_t>(csrc));
      double s = 0.0;
      for (auto& v : d) {
        v = rng.uniform(1e-3, 1.0);
        s += v;
      }
      for (auto& v : d) v /= s;
      dummies.push_back(std::move(d));
      labels.push_back(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(ct))));
    }
    const double got = leep_classification(dummies, labels, ct);
    const double want = oracle::leep_ref(dummies, labels, ct);
    worst = std::max(worst, std::abs(got - want));
  }
  const double secs = wall_since(t0);
  std::ostringstream os;
  os << "max |diff| " << worst << " over 100 cases in " << secs << " s";
  detail = os.str();
  return worst < 1e-10 && secs < 1.0;
}

// ---------------------------------------------------------------------------
// criterion 2: map decomposition identity
// ---------------------------------------------------------------------------
bool criterion_decomposition(std::string& detail) {
  SplitMix64 rng(1002);
  double worst = 0.0;
  for (int cs = 0; cs < 20; ++cs) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(8));
    const std::int64_t h = 2 + static_cast<std::int64_t>(rng.below(15));
    const std::int64_t w = 2 + static_cast<std::int64_t>(rng.below(15));
    const std::int64_t csrc = 2 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t ct = 2 + static_cast<std::int64_t>(rng.below(3));
    DummyDistField f(n, csrc, h, w);
    LabelField lf(n, h, w);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          double s = 0.0;
          std::vector<double> raw(static_cast<std::size_t>(csrc));
          for (auto& v : raw) {
            v = rng.uniform(1e-3, 1.0);
            s += v;
          }
          for (std::int64_t z = 0; z < csrc; ++z) f.at(i, z, y, x) = raw[static_cast<std::size_t>(z)] / s;
          lf.at(i, y, x) = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(ct)));
        }
    TransferabilityMap map = transferability_map(f, lf, ct, CondMode::global);
    Kahan total;
    for (double v : map.t) total.add(v);
    const double score = leep_image(f, lf, empirical_joint(f, lf, ct));
    worst = std::max(worst, std::abs(total.value() - score));
  }
  std::ostringstream os;
  os << "max |sum(map) - score| " << worst << " over 20 stacks";
  detail = os.str();
  return worst < 1e-10;
}

// ---------------------------------------------------------------------------
// criterion 3: gradient suite
// ---------------------------------------------------------------------------
bool criterion_gradients(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(1003);
  double worst = 0.0;
  std::string worst_op = "none";
  auto note = [&](const char* op, double err) {
    if (err > worst) {
      worst = err;
      worst_op = op;
    }
  };

  auto check_unary = [&](const char* name, auto make, const Shape& shape, double lo, double hi) {
    for (int cs = 0; cs < 20; ++cs) {
      Tensor x = oracle::random_tensor(shape, rng, lo, hi);
      for (double& v : x.data())
        if (std::abs(v) < 2e-4) v = v < 0 ? v - 2e-4 : v + 2e-4;
      Tensor r = oracle::random_tensor(make(x, nullptr).shape(), rng);
      auto scalar = [&](const Tensor& t) { return weighted_mean(make(t, nullptr), r, 1.0).value(); };
      x.set_requires_grad(true);
      Tape tape;
      Tensor s = weighted_mean(make(x, &tape), r, 1.0, &tape);
      backward(s, tape);
      note(name, oracle::max_rel_err(x.grad(), oracle::fd_grad(scalar, x)));
    }
  };

  check_unary("relu", [](const Tensor& t, Tape* tp) { return relu(t, tp); }, {2, 1, 4, 4}, -1, 1);

  // max_pool2 needs every 2x2 window pairwise separated, or the FD stencil
  // straddles the argmax switch; draw a base value plus permuted offsets
  for (int cs = 0; cs < 20; ++cs) {
    Tensor x({1, 2, 4, 4});
    auto xd = x.data();
    for (std::int64_t p = 0; p < 2; ++p)
      for (std::int64_t wy = 0; wy < 2; ++wy)
        for (std::int64_t wx = 0; wx < 2; ++wx) {
          const double base = rng.uniform(-1.0, 1.0);
          std::vector<double> offs = {0.0, 0.05, 0.10, 0.15};
          fisher_yates(offs, rng);
          for (int c = 0; c < 4; ++c) {
            const std::int64_t y = 2 * wy + c / 2, ix = 2 * wx + c % 2;
            xd[static_cast<std::size_t>(p * 16 + y * 4 + ix)] = base + offs[static_cast<std::size_t>(c)];
          }
        }
    Tensor r = oracle::random_tensor({1, 2, 2, 2}, rng);
    auto scalar = [&](const Tensor& t) { return weighted_mean(max_pool2(t), r, 1.0).value(); };
    x.set_requires_grad(true);
    Tape tape;
    backward(weighted_mean(max_pool2(x, &tape), r, 1.0, &tape), tape);
    note("max_pool2", oracle::max_rel_err(x.grad(), oracle::fd_grad(scalar, x)));
  }

  check_unary("upsample_nn2", [](const Tensor& t, Tape* tp) { return upsample_nn2(t, tp); }, {1, 2, 3, 3}, -1, 1);
  check_unary("channel_softmax", [](const Tensor& t, Tape* tp) { return channel_softmax(t, tp); }, {1, 3, 2, 2}, -2, 2);
  check_unary("sum", [](const Tensor& t, Tape* tp) { return sum(t, tp); }, {3, 4}, -1, 1);

  // conv2d w.r.t. input, kernel, and bias, mixed strides and paddings
  for (int cs = 0; cs < 20; ++cs) {
    const std::int64_t stride = 1 + static_cast<std::int64_t>(rng.below(2));
    const std::int64_t pad = static_cast<std::int64_t>(rng.below(2));
    Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng);
    Tensor k = oracle::random_tensor({2, 2, 3, 3}, rng, -0.7, 0.7);
    Tensor b = oracle::random_tensor({2}, rng, -0.3, 0.3);
    Tensor r = oracle::random_tensor(conv2d(x, k, b, stride, pad).shape(), rng);
    auto scalar_of = [&](const Tensor& xi, const Tensor& ki, const Tensor& bi) {
      return weighted_mean(conv2d(xi, ki, bi, stride, pad), r, 1.0).value();
    };
    x.set_requires_grad(true);
    k.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape tape;
    Tensor s = weighted_mean(conv2d(x, k, b, stride, pad, &tape), r, 1.0, &tape);
    backward(s, tape);
    note("conv2d/input", oracle::max_rel_err(
                             x.grad(), oracle::fd_grad([&](const Tensor& t) { return scalar_of(t, k, b); }, x)));
    note("conv2d/kernel", oracle::max_rel_err(
                              k.grad(), oracle::fd_grad([&](const Tensor& t) { return scalar_of(x, t, b); }, k)));
    note("conv2d/bias", oracle::max_rel_err(
                            b.grad(), oracle::fd_grad([&](const Tensor& t) { return scalar_of(x, k, t); }, b)));
  }

  // concat_channels, mul, weighted_mean, cross_entropy_map
  for (int cs = 0; cs < 20; ++cs) {
    Tensor a = oracle::random_tensor({1, 2, 3, 3}, rng);
    Tensor b = oracle::random_tensor({1, 1, 3, 3}, rng);
    Tensor r = oracle::random_tensor({1, 3, 3, 3}, rng);
    auto scalar = [&](const Tensor& t) { return weighted_mean(concat_channels(t, b), r, 1.0).value(); };
    a.set_requires_grad(true);
    Tape tape;
    backward(weighted_mean(concat_channels(a, b, &tape), r, 1.0, &tape), tape);
    note("concat_channels", oracle::max_rel_err(a.grad(), oracle::fd_grad(scalar, a)));

    Tensor m = oracle::random_tensor({2, 5}, rng);
    Tensor other = oracle::random_tensor({2, 5}, rng);
    Tensor rm = oracle::random_tensor({2, 5}, rng);
    auto scalarm = [&](const Tensor& t) { return weighted_mean(mul(t, other), rm, 1.0).value(); };
    m.set_requires_grad(true);
    Tape tm;
    backward(weighted_mean(mul(m, other, &tm), rm, 1.0, &tm), tm);
    note("mul", oracle::max_rel_err(m.grad(), oracle::fd_grad(scalarm, m)));

    Tensor wx = oracle::random_tensor({2, 3, 3}, rng);
    Tensor ww = oracle::random_tensor({2, 3, 3}, rng, 0.5, 2.0);
    auto scalarw = [&](const Tensor& t) { return weighted_mean(t, ww, 7.0).value(); };
    wx.set_requires_grad(true);
    Tape tw;
    backward(weighted_mean(wx, ww, 7.0, &tw), tw);
    note("weighted_mean", oracle::max_rel_err(wx.grad(), oracle::fd_grad(scalarw, wx)));

    Tensor logits = oracle::random_tensor({1, 3, 2, 2}, rng, -2, 2);
    LabelField labels(1, 2, 2);
    for (auto& v : labels.data) v = static_cast<std::int32_t>(rng.below(3));
    Tensor rc = oracle::random_tensor({1, 2, 2}, rng);
    auto scalarc = [&](const Tensor& t) {
      return weighted_mean(cross_entropy_map(t, labels), rc, 1.0).value();
    };
    logits.set_requires_grad(true);
    Tape tc;
    backward(weighted_mean(cross_entropy_map(logits, labels, &tc), rc, 1.0, &tc), tc);
    note("cross_entropy_map", oracle::max_rel_err(logits.grad(), oracle::fd_grad(scalarc, logits)));
  }

  // composed U-Net loss w.r.t. every parameter. Central differences are
  // only meaningful where the composition is differentiable, so cases whose
  // relu inputs sit near 0 or whose pool windows have near-tied maxima are
  // resampled (an h-sized parameter step must not cross any kink).
  const auto case_is_smooth = [](const ModelParams& params, const Tensor& batch) {
    const UNetConfig& cfg = params.config();
    constexpr double relu_margin = 1e-4;
    constexpr double pool_margin = 1e-3;
    bool ok = true;
    auto conv_checked = [&](const Tensor& x, const std::string& prefix) {
      Tensor pre = conv2d(x, params.at(prefix + ".kernel").tensor,
                          params.at(prefix + ".bias").tensor, 1, 1);
      for (double v : pre.data())
        if (std::abs(v) < relu_margin) ok = false;
      return relu(pre);
    };
    auto pool_checked = [&](const Tensor& x) {
      const std::int64_t h = x.dim(2), w = x.dim(3);
      for (std::int64_t p = 0; p < x.dim(0) * x.dim(1); ++p)
        for (std::int64_t wy = 0; wy < h / 2; ++wy)
          for (std::int64_t wx = 0; wx < w / 2; ++wx) {
            double top = -1e300, second = -1e300;
            for (int c = 0; c < 4; ++c) {
              const double v = x.data()[static_cast<std::size_t>(
                  p * h * w + (2 * wy + c / 2) * w + 2 * wx + c % 2)];
              if (v > top) {
                second = top;
                top = v;
              } else if (v > second) {
                second = v;
              }
            }
            // relu-clamped zeros are frozen under an h-step; only a close
            // ACTIVE runner-up can flip the argmax
            if (second > 0.0 && top - second < pool_margin) ok = false;
          }
      return max_pool2(x);
    };
    Tensor x = batch;
    std::vector<Tensor> skips;
    for (std::int64_t l = 0; l < cfg.depth; ++l) {
      x = conv_checked(x, "enc." + std::to_string(l) + ".conv1");
      x = conv_checked(x, "enc." + std::to_string(l) + ".conv2");
      skips.push_back(x);
      x = pool_checked(x);
    }
    x = conv_checked(x, "bot.conv1");
    x = conv_checked(x, "bot.conv2");
    for (std::int64_t l = cfg.depth - 1; l >= 0; --l) {
      x = concat_channels(upsample_nn2(x), skips[static_cast<std::size_t>(l)]);
      x = conv_checked(x, "dec." + std::to_string(l) + ".conv1");
      x = conv_checked(x, "dec." + std::to_string(l) + ".conv2");
    }
    return ok;
  };

  std::uint64_t net_seed = 2000;
  for (int cs = 0; cs < 20; ++cs) {
    UNetConfig cfg{1, 2, 1, 2, 8, 8};
    ModelParams params = build_unet(cfg, ++net_seed);
    Tensor batch = oracle::random_tensor({1, 1, 8, 8}, rng, 0, 1);
    while (!case_is_smooth(params, batch)) {
      params = build_unet(cfg, ++net_seed);
      batch = oracle::random_tensor({1, 1, 8, 8}, rng, 0, 1);
    }
    LabelField labels(1, 8, 8);
    for (auto& v : labels.data) v = static_cast<std::int32_t>(rng.below(2));
    Tensor ones({1, 8, 8}, 1.0);
    auto loss_now = [&]() {
      return weighted_mean(cross_entropy_map(unet_forward(params, batch), labels), ones, 64.0).value();
    };
    params.sync_grad_flags();
    Tape tape;
    Tensor loss = weighted_mean(cross_entropy_map(unet_forward(params, batch, &tape), labels, &tape),
                                ones, 64.0, &tape);
    backward(loss, tape);
    for (auto& e : params.entries()) {
      std::vector<double> fd(static_cast<std::size_t>(e.tensor.numel()));
      auto pd = e.tensor.data();
      for (std::size_t i = 0; i < fd.size(); ++i) {
        const double keep = pd[i];
        pd[i] = keep + 1e-5;
        const double hi = loss_now();
        pd[i] = keep - 1e-5;
        const double lo = loss_now();
        pd[i] = keep;
        fd[i] = (hi - lo) / 2e-5;
      }
      note("unet_loss", oracle::max_rel_err(e.tensor.grad(), fd));
    }
  }

  const double secs = wall_since(t0);
  std::ostringstream os;
  os << "max rel err " << worst << " (" << worst_op << ") in " << secs << " s";
  detail = os.str();
  return worst < 1e-4 && secs < 30.0;
}

// ---------------------------------------------------------------------------
// criterion 4: risk-map contracts
// ---------------------------------------------------------------------------
bool criterion_risk_contracts(std::string& detail) {
  SplitMix64 rng(1004);
  for (int cs = 0; cs < 50; ++cs) {
    const std::int64_t h = 2 + static_cast<std::int64_t>(rng.below(12));
    const std::int64_t w = 2 + static_cast<std::int64_t>(rng.below(12));
    TransferabilityMap t;
    t.h = h;
    t.w = w;
    t.t.resize(static_cast<std::size_t>(h * w));
    const bool constant = cs % 5 == 0;
    const double cval = rng.uniform(-6.0, 0.0);
    for (auto& v : t.t) v = constant ? cval : rng.uniform(-9.0, 0.0);
    RiskMap r = risk_map(normalize_map(t, Orientation::hardness));

    double tmin = t.t[0], tmax = t.t[0];
    for (double v : t.t) {
      tmin = std::min(tmin, v);
      tmax = std::max(tmax, v);
    }
    for (std::size_t i = 0; i < t.t.size(); ++i) {
      if (!(r.weights[i] >= 1.0 && r.weights[i] <= 10.0)) {
        detail = "weight outside [1,10]";
        return false;
      }
      if (constant && r.weights[i] != 1.0) {
        detail = "constant map did not collapse to exactly 1";
        return false;
      }
      if (!constant && tmax > tmin) {
        if (t.t[i] == tmin && r.weights[i] != 10.0) {
          detail = "argmin-LEEP pixel is not weight 10";
          return false;
        }
        if (t.t[i] == tmax && r.weights[i] != 1.0) {
          detail = "argmax-LEEP pixel is not weight 1";
          return false;
        }
      }
    }
  }
  detail = "50 random maps: range, constant collapse, extreme-pixel mapping";
  return true;
}

// ---------------------------------------------------------------------------
// criterion 5: foreground-normalized loss algebra
// ---------------------------------------------------------------------------
bool criterion_weighted_loss(std::string& detail) {
  Tensor losses = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  RiskMap w;
  w.h = 2;
  w.w = 2;
  w.weights = {1, 1, 2, 2};
  LabelField labels(1, 2, 2);
  labels.data = {0, 1, 1, 0};
  if (weighted_loss(losses, w, labels).value() != 8.5) {
    detail = "fixed 2x2 case did not evaluate to 8.5";
    return false;
  }

  RiskMap ones;
  ones.h = 2;
  ones.w = 2;
  ones.weights = {1, 1, 1, 1};
  LabelField fg(1, 2, 2, 1);
  if (weighted_loss(losses, ones, fg).value() != 2.5) {
    detail = "uniform weights over all-foreground did not reduce to the plain mean";
    return false;
  }

  // the fallback engages exactly when the batch has no foreground
  LabelField bg(1, 2, 2, 0);
  if (weighted_loss(losses, ones, bg).value() != 10.0 / 4.0) {
    detail = "zero-foreground fallback did not divide by the pixel count";
    return false;
  }
  LabelField one_fg(1, 2, 2, 0);
  one_fg.data[3] = 1;
  if (weighted_loss(losses, ones, one_fg).value() != 10.0 / 1.0) {
    detail = "a single foreground pixel must set the denominator to 1";
    return false;
  }
  detail = "8.5 case, plain-mean reduction, and fallback boundary all exact";
  return true;
}

// ---------------------------------------------------------------------------
// criterion 6: end-to-end determinism
// ---------------------------------------------------------------------------
Suite mini_suite() {
  Suite s;
  s.name = "determinism-mini";
  s.height = 32;
  s.width = 32;
  s.subjects = 12;
  s.background = 0.05;
  s.structures = {{"outer", 0.66, 0.74, 0.68, 0.76, 0.02, 0.38},
                  {"ring", 0.52, 0.60, 0.52, 0.60, 0.03, 0.60},
                  {"core", 0.40, 0.50, 0.40, 0.50, 0.05, 0.85}};
  s.modalities = {{"t1", 1.0, 1.0, 0.0, 0.04}, {"t2", 0.38, 0.80, 0.14, 0.04}};
  s.tasks = {{"core-t1", {"t1", {0, 0, 0, 1}, {"background", "core"}}},
             {"ring-t2", {"t2", {0, 0, 1, 0}, {"background", "ring"}}}};
  s.pairs = {{"core-t1", "ring-t2"}};
  s.schemes = {SchemeKind::vanilla, SchemeKind::riskmap};
  s.seeds = {101};
  s.data_seed = 77;
  s.split_fractions = {0.75, 0.0, 0.25};
  s.finetune_cfg.lr = 1e-3;
  s.finetune_cfg.iterations = 60;
  s.finetune_cfg.batch = 2;
  s.finetune_cfg.depth = 2;
  s.finetune_cfg.base_channels = 2;
  s.pretrain_cfg = s.finetune_cfg;
  s.pretrain_cfg.iterations = 80;
  s.pretrain_cfg.freeze_encoder = false;
  s.pretrain_cfg.seed = 11;
  return s;
}

bool criterion_determinism(const fs::path& out, int jobs, std::string& detail) {
  fs::create_directories(out);
  Suite s = mini_suite();
  SliceDataset core = generate_phantom_modality(s.phantom_for("core-t1"), "t1", s.data_seed);
  SliceDataset ring = generate_phantom_modality(s.phantom_for("ring-t2"), "t2", s.data_seed);

  TrainConfig pc = s.pretrain_cfg;
  pc.seed = 31;
  TrainResult p1 = pretrain(core, pc);
  TrainResult p2 = pretrain(core, pc);
  save_checkpoint(p1.params, out / "p1.rmtc");
  save_checkpoint(p2.params, out / "p2.rmtc");
  if (!same_bytes(out / "p1.rmtc", out / "p2.rmtc")) {
    detail = "pretrain reruns differ";
    return false;
  }

  TrainConfig fc = s.finetune_cfg;
  fc.seed = 32;
  fc.scheme = SchemeKind::riskmap;
  TrainResult f1 = finetune(p1.params, ring, fc);
  TrainResult f2 = finetune(p2.params, ring, fc);
  save_checkpoint(f1.params, out / "f1.rmtc");
  save_checkpoint(f2.params, out / "f2.rmtc");
  if (!same_bytes(out / "f1.rmtc", out / "f2.rmtc")) {
    detail = "finetune reruns differ";
    return false;
  }

  run_matrix(s, out / "m1", jobs);
  run_matrix(s, out / "m2", jobs);
  if (!same_bytes(out / "m1" / "report.json", out / "m2" / "report.json")) {
    detail = "matrix reports differ";
    return false;
  }
  const fs::path cell = fs::path("cells") / "core-t1__ring-t2__riskmap__s101";
  for (const char* f : {"risk_before.rmrs", "risk_after.rmrs", "risk_before.pgm"}) {
    if (!same_bytes(out / "m1" / cell / f, out / "m2" / cell / f)) {
      detail = std::string("matrix map artifact differs: ") + f;
      return false;
    }
  }
  detail = "pretrain, finetune, and matrix reruns byte-identical";
  return true;
}

// ---------------------------------------------------------------------------
// criteria 7 and 9 share one full run of the default suite
// ---------------------------------------------------------------------------
struct SuiteOutcome {
  double mean_gain = 0.0;
  std::int64_t wins = 0, runs = 0;
  std::int64_t risk_drops = 0, risk_runs = 0;
  double seconds = 0.0;
  bool pgms_complete = false;
  std::int64_t failed_cells = 0;
};

SuiteOutcome run_default_suite(const Suite& suite, const fs::path& out, int jobs) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentResult result = run_matrix(suite, out, jobs);
  SuiteOutcome o;
  o.seconds = wall_since(t0);
  for (const auto& cmp : result.report.at("comparisons")) {
    if (cmp.at("scheme").get<std::string>() != "riskmap") continue;
    o.mean_gain = cmp.at("mean_gain").get<double>();
    o.wins = cmp.at("wins").get<std::int64_t>();
    o.runs = cmp.at("runs").get<std::int64_t>();
    o.risk_drops = cmp.at("risk_mean_drops").get<std::int64_t>();
    o.risk_runs = cmp.at("risk_runs").get<std::int64_t>();
  }
  o.pgms_complete = true;
  for (const auto& c : result.cells) {
    if (c.status != "ok") {
      ++o.failed_cells;
      continue;
    }
    const fs::path cell_dir = out / "cells" /
                              (c.source + "__" + c.target + "__" + to_string(c.scheme) + "__s" +
                               std::to_string(c.seed));
    if (!fs::exists(cell_dir / "risk_before.pgm") || !fs::exists(cell_dir / "risk_after.pgm")) {
      o.pgms_complete = false;
    }
  }
  return o;
}

// ---------------------------------------------------------------------------
// criterion 8: few-shot robustness
// ---------------------------------------------------------------------------
bool criterion_few_shot(const Suite& base, const fs::path& out, int jobs, std::string& detail) {
  Suite s = base;
  s.name = "few-shot";
  s.subjects = 280;
  s.pairs = {{"all-t1", "core-t2"}};
  s.finetune_cfg.iterations = 1000;

  std::ostringstream os;
  bool ok = true;
  for (const std::int64_t k : {std::int64_t{200}, std::int64_t{50}, std::int64_t{25}}) {
    s.few_shot_k = k;
    ExperimentResult r = run_matrix(s, out / ("k" + std::to_string(k)), jobs);
    double vanilla_sum = 0.0, riskmap_sum = 0.0;
    std::int64_t n = 0;
    for (const auto& c : r.cells) {
      if (c.status != "ok") {
        detail = "a k=" + std::to_string(k) + " run failed: " + c.status;
        return false;  // all runs must complete without divergence
      }
      if (c.scheme == SchemeKind::vanilla) vanilla_sum += c.dice_report.macro_foreground;
      if (c.scheme == SchemeKind::riskmap) {
        riskmap_sum += c.dice_report.macro_foreground;
        ++n;
      }
    }
    const double vmean = vanilla_sum / static_cast<double>(n);
    const double rmean = riskmap_sum / static_cast<double>(n);
    os << "k=" << k << ": riskmap " << rmean << " vs vanilla " << vmean << "; ";
    if (k >= 50 && rmean < vmean) ok = false;
  }
  detail = os.str() + (ok ? "larger-k means ordered, no divergence" : "ordering violated");
  return ok;
}

// ---------------------------------------------------------------------------
// criterion 10: format round-trips and error variants
// ---------------------------------------------------------------------------
bool criterion_formats(const fs::path& out, std::string& detail) {
  fs::create_directories(out);
  UNetConfig cfg{1, 3, 2, 4, 16, 16};
  ModelParams params = freeze_encoder(build_unet(cfg, 9));
  const fs::path ck = out / "fmt.rmtc";
  save_checkpoint(params, ck);
  ModelParams loaded = load_checkpoint(ck);
  save_checkpoint(loaded, out / "fmt2.rmtc");
  if (!same_bytes(ck, out / "fmt2.rmtc")) {
    detail = "checkpoint round-trip not byte-exact";
    return false;
  }

  Raster r;
  r.dtype = RasterDtype::f64;
  r.dims = {3, 4};
  for (int i = 0; i < 12; ++i) r.f64.push_back(i * 0.37 - 1.0);
  write_raster(r, out / "fmt.rmrs");
  Raster rb = read_raster(out / "fmt.rmrs");
  write_raster(rb, out / "fmt2.rmrs");
  if (!same_bytes(out / "fmt.rmrs", out / "fmt2.rmrs")) {
    detail = "raster round-trip not byte-exact";
    return false;
  }

  auto corrupted = [&](const fs::path& src, std::size_t offset, unsigned char value) {
    std::string bytes = read_bytes(src);
    bytes[offset] = static_cast<char>(value);
    const fs::path p = out / ("bad-" + std::to_string(offset) + src.extension().string());
    std::ofstream os_(p, std::ios::binary);
    os_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    return p;
  };
  auto code_of = [](const std::function<void()>& fn) -> Errc {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::runtime;
  };

  const Errc ck_magic = code_of([&] { load_checkpoint(corrupted(ck, 0, 'X')); });
  const Errc ck_version = code_of([&] { load_checkpoint(corrupted(ck, 4, 9)); });
  const Errc rs_magic = code_of([&] { read_raster(corrupted(out / "fmt.rmrs", 0, 'X')); });
  const Errc rs_version = code_of([&] { read_raster(corrupted(out / "fmt.rmrs", 4, 9)); });
  // top byte of the first i64 extent makes it negative
  const Errc rs_dims = code_of([&] { read_raster(corrupted(out / "fmt.rmrs", 20, 0xFF)); });
  if (ck_magic != Errc::bad_magic || rs_magic != Errc::bad_magic) {
    detail = "magic corruption did not produce bad_magic";
    return false;
  }
  if (ck_version != Errc::bad_version || rs_version != Errc::bad_version) {
    detail = "version corruption did not produce bad_version";
    return false;
  }
  if (rs_dims != Errc::dim_mismatch) {
    detail = "dims corruption did not produce dim_mismatch";
    return false;
  }
  detail = "round-trips byte-exact; magic/version/dims map to distinct variants";
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path suite_path = "suites/desk-default.json";
  fs::path out = fs::temp_directory_path() / ("trm-acceptance-" + std::to_string(::getpid()));
  int jobs = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--suite" && i + 1 < argc) suite_path = argv[++i];
    else if (a == "--out" && i + 1 < argc) out = argv[++i];
    else if (a == "--jobs" && i + 1 < argc) jobs = std::atoi(argv[++i]);
  }
  fs::remove_all(out);
  fs::create_directories(out);
  std::printf("artifacts: %s\n", out.string().c_str());

  Suite suite;
  try {
    std::ifstream is(suite_path);
    if (!is) {
      std::fprintf(stderr, "cannot open suite file %s\n", suite_path.string().c_str());
      return 1;
    }
    json j;
    is >> j;
    suite = Suite::from_json(j);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "suite load failed: %s\n", e.what());
    return 1;
  }

  int failures = 0;
  auto report = [&failures](int num, const std::string& name, bool ok, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s - %s\n", ok ? "PASS" : "FAIL", num, name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  };

  std::string d;
  report(1, "LEEP oracle equivalence", criterion_leep_oracle(d), d);
  report(2, "map decomposition identity", criterion_decomposition(d), d);
  report(3, "gradient suite", criterion_gradients(d), d);
  report(4, "risk-map contracts", criterion_risk_contracts(d), d);
  report(5, "foreground-normalized loss algebra", criterion_weighted_loss(d), d);

  try {
    report(6, "end-to-end determinism", criterion_determinism(out / "det", jobs, d), d);
  } catch (const std::exception& e) {
    report(6, "end-to-end determinism", false, e.what());
  }

  // the default suite drives criteria 7 and 9
  SuiteOutcome oc;
  bool suite_ran = false;
  try {
    if (suite.pairs.size() != 6 || suite.seeds.size() != 5 || suite.finetune_cfg.iterations != 2000 ||
        suite.height != 64 || suite.width != 64) {
      throw Error(Errc::validation, "suite file drifted from 6 pairs x 5 seeds x 2k iterations at 64x64");
    }
    oc = run_default_suite(suite, out / "suite", jobs);
    suite_ran = true;
    std::ostringstream os;
    os << "mean gain " << oc.mean_gain << ", wins " << oc.wins << "/" << oc.runs << ", "
       << oc.seconds << " s";
    if (oc.failed_cells > 0) os << ", " << oc.failed_cells << " failed cells";
    report(7, "directional transfer gain",
           oc.mean_gain > 0.0 && oc.runs == 30 && oc.wins * 10 >= oc.runs * 6 &&
               oc.seconds <= 900.0 && oc.failed_cells == 0,
           os.str());
  } catch (const std::exception& e) {
    report(7, "directional transfer gain", false, e.what());
  }

  try {
    report(8, "few-shot robustness", criterion_few_shot(suite, out / "fewshot", jobs, d), d);
  } catch (const std::exception& e) {
    report(8, "few-shot robustness", false, e.what());
  }

  if (suite_ran) {
    std::ostringstream os;
    os << "risk-mean drops " << oc.risk_drops << "/" << oc.risk_runs
       << (oc.pgms_complete ? ", before/after PGMs present for every cell" : ", PGM exports missing");
    report(9, "risk-map contraction after fine-tuning",
           oc.risk_drops * 2 > oc.risk_runs && oc.pgms_complete, os.str());
  } else {
    report(9, "risk-map contraction after fine-tuning", false, "suite run unavailable");
  }

  report(10, "format round-trips and error variants", criterion_formats(out / "fmt", d), d);

  std::printf("%d criteria failed\n", failures);
  return failures;
}
