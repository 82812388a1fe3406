#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "trm/common.hpp"
#include "trm/tensor.hpp"

namespace trm {

// How the empirical conditional feeding the per-pixel map is estimated:
// one predictor pooled over every (image, pixel) instance, or a separate
// predictor per pixel location built from its N instances.
enum class CondMode { global, per_location };

inline std::string to_string(CondMode m) { return m == CondMode::global ? "global" : "perloc"; }

// Per-pixel source-class probabilities [N, Cs, H, W]: the dummy label
// distributions of a source model evaluated on target images.
struct DummyDistField {
  std::int64_t n = 0, cs = 0, h = 0, w = 0;
  std::vector<double> data;

  DummyDistField() = default;
  DummyDistField(std::int64_t n_, std::int64_t cs_, std::int64_t h_, std::int64_t w_)
      : n(n_), cs(cs_), h(h_), w(w_), data(static_cast<std::size_t>(n_ * cs_ * h_ * w_), 0.0) {}

  static DummyDistField from_logits(const Tensor& logits) {
    Tensor probs = channel_softmax(logits);
    DummyDistField f(logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    std::copy(probs.data().begin(), probs.data().end(), f.data.begin());
    return f;
  }

  double at(std::int64_t i, std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>(((i * cs + z) * h + y) * w + x)];
  }
  double& at(std::int64_t i, std::int64_t z, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>(((i * cs + z) * h + y) * w + x)];
  }

  void validate() const {
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          double s = 0.0;
          for (std::int64_t z = 0; z < cs; ++z) {
            const double v = at(i, z, y, x);
            if (v < 0.0) fail(Errc::validation, "dummy distribution has a negative entry");
            s += v;
          }
          if (std::abs(s - 1.0) > 1e-9) {
            fail(Errc::validation, "dummy distribution does not sum to 1 at image " +
                                       std::to_string(i) + ", pixel (" + std::to_string(y) + "," +
                                       std::to_string(x) + ")");
          }
        }
  }
};

// Empirical joint P(y, z) over (target label, dummy source label) and the
// derived conditional P(y|z). Columns with zero marginal are flagged rather
// than divided.
struct EmpiricalJoint {
  std::int64_t ct = 0, cs = 0;
  std::vector<double> joint;                // [ct][cs]
  std::vector<double> conditional;          // [ct][cs]
  std::vector<std::uint8_t> zero_marginal;  // [cs]

  double joint_at(std::int64_t y, std::int64_t z) const {
    return joint[static_cast<std::size_t>(y * cs + z)];
  }
  double cond(std::int64_t y, std::int64_t z) const {
    return conditional[static_cast<std::size_t>(y * cs + z)];
  }
};

struct PixelCoord {
  std::int64_t row = 0, col = 0;
};

namespace detail {

inline void check_field_shapes(const DummyDistField& dummy, const LabelField& labels) {
  if (dummy.n != labels.n || dummy.h != labels.h || dummy.w != labels.w) {
    fail(Errc::validation, "dummy field [" + std::to_string(dummy.n) + "," +
                               std::to_string(dummy.h) + "," + std::to_string(dummy.w) +
                               "] and label raster [" + std::to_string(labels.n) + "," +
                               std::to_string(labels.h) + "," + std::to_string(labels.w) +
                               "] describe different stacks");
  }
}

// Compensated sum over a canonical (sorted) order. Per-image partials go
// through this so reordering the images cannot perturb any result bit.
inline double canonical_sum(std::vector<double>& vals) {
  std::sort(vals.begin(), vals.end());
  Kahan k;
  for (double v : vals) k.add(v);
  return k.value();
}

// A mixture is a probability; rounding can push the computed value a few
// ulp above 1, so clamp into [floor, 1] before taking the log.
inline double log_mixture(double m) { return std::log(std::clamp(m, kProbFloor, 1.0)); }

// Mixture sum_z P(y|z) * theta_z with the column rules: flagged columns use
// `fallback` when given and usable, otherwise they are skipped (their theta
// weight is zero over the stack that produced the flag).
inline double mixture(const EmpiricalJoint& ej, const EmpiricalJoint* fallback,
                      const DummyDistField& dummy, std::int64_t i, std::int64_t y_label,
                      std::int64_t row, std::int64_t col) {
  double m = 0.0;
  for (std::int64_t z = 0; z < ej.cs; ++z) {
    double c;
    if (!ej.zero_marginal[static_cast<std::size_t>(z)]) {
      c = ej.cond(y_label, z);
    } else if (fallback && !fallback->zero_marginal[static_cast<std::size_t>(z)]) {
      c = fallback->cond(y_label, z);
    } else {
      continue;
    }
    m += c * dummy.at(i, z, row, col);
  }
  return m;
}

}  // namespace detail

// P(y,z) = (1/M) * sum over selected (image, pixel) instances of
// theta(x)_z * 1{label = y}. With no subset, every pixel of every image is
// an instance.
inline EmpiricalJoint empirical_joint(const DummyDistField& dummy, const LabelField& labels,
                                      std::int64_t target_classes,
                                      const std::vector<PixelCoord>* pixel_subset = nullptr) {
  detail::check_field_shapes(dummy, labels);
  if (target_classes < 1) fail(Errc::validation, "target_classes must be >= 1");
  const std::int64_t per_image =
      pixel_subset ? static_cast<std::int64_t>(pixel_subset->size()) : dummy.h * dummy.w;
  const std::int64_t instances = dummy.n * per_image;
  if (instances == 0) fail(Errc::validation, "empirical_joint needs at least one instance");

  const std::size_t cells = static_cast<std::size_t>(target_classes * dummy.cs);
  std::vector<std::vector<double>> parts(cells);
  for (auto& p : parts) p.reserve(static_cast<std::size_t>(dummy.n));

  for (std::int64_t i = 0; i < dummy.n; ++i) {
    std::vector<Kahan> local(cells);
    auto add_instance = [&](std::int64_t y, std::int64_t x) {
      const std::int32_t lab = labels.at(i, y, x);
      if (lab < 0 || lab >= target_classes) {
        fail(Errc::validation, "label " + std::to_string(lab) + " out of range [0," +
                                   std::to_string(target_classes) + ") at image " +
                                   std::to_string(i) + ", pixel (" + std::to_string(y) + "," +
                                   std::to_string(x) + ")");
      }
      for (std::int64_t z = 0; z < dummy.cs; ++z)
        local[static_cast<std::size_t>(lab * dummy.cs + z)].add(dummy.at(i, z, y, x));
    };
    if (pixel_subset) {
      for (const auto& px : *pixel_subset) add_instance(px.row, px.col);
    } else {
      for (std::int64_t y = 0; y < dummy.h; ++y)
        for (std::int64_t x = 0; x < dummy.w; ++x) add_instance(y, x);
    }
    for (std::size_t c = 0; c < cells; ++c) parts[c].push_back(local[c].value());
  }

  EmpiricalJoint ej;
  ej.ct = target_classes;
  ej.cs = dummy.cs;
  ej.joint.resize(cells);
  ej.conditional.assign(cells, 0.0);
  ej.zero_marginal.assign(static_cast<std::size_t>(dummy.cs), 0);
  for (std::size_t c = 0; c < cells; ++c)
    ej.joint[c] = detail::canonical_sum(parts[c]) / static_cast<double>(instances);
  for (std::int64_t z = 0; z < dummy.cs; ++z) {
    double marginal = 0.0;
    for (std::int64_t y = 0; y < target_classes; ++y) marginal += ej.joint_at(y, z);
    if (marginal == 0.0) {
      ej.zero_marginal[static_cast<std::size_t>(z)] = 1;
      continue;
    }
    for (std::int64_t y = 0; y < target_classes; ++y)
      ej.conditional[static_cast<std::size_t>(y * dummy.cs + z)] = ej.joint_at(y, z) / marginal;
  }
  return ej;
}

// Classification LEEP: average log of the expected empirical predictor,
// natural logarithm, mixture floored at 1e-12 before the log.
inline double leep_classification(const std::vector<std::vector<double>>& dummies,
                                  const std::vector<std::int32_t>& labels,
                                  std::int64_t target_classes) {
  if (dummies.empty() || dummies.size() != labels.size()) {
    fail(Errc::validation, "leep_classification needs n >= 1 aligned dummies and labels");
  }
  const std::int64_t n = static_cast<std::int64_t>(dummies.size());
  const std::int64_t cs = static_cast<std::int64_t>(dummies.front().size());
  // pack as an [n, cs, 1, 1] field so the segmentation machinery applies as-is
  DummyDistField field(n, cs, 1, 1);
  LabelField lf(n, 1, 1);
  for (std::int64_t i = 0; i < n; ++i) {
    if (static_cast<std::int64_t>(dummies[static_cast<std::size_t>(i)].size()) != cs) {
      fail(Errc::validation, "dummy vectors must share one source class count");
    }
    for (std::int64_t z = 0; z < cs; ++z)
      field.at(i, z, 0, 0) = dummies[static_cast<std::size_t>(i)][static_cast<std::size_t>(z)];
    lf.at(i, 0, 0) = labels[static_cast<std::size_t>(i)];
  }
  const EmpiricalJoint ej = empirical_joint(field, lf, target_classes);
  std::vector<double> terms(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double mix = detail::mixture(ej, nullptr, field, i, lf.at(i, 0, 0), 0, 0);
    terms[static_cast<std::size_t>(i)] = detail::log_mixture(mix);
  }
  return detail::canonical_sum(terms) / static_cast<double>(n);
}

// Per-pixel transferability scores [H, W]. Entries are averages of log
// probabilities, so they are always finite and <= 0.
struct TransferabilityMap {
  std::int64_t h = 0, w = 0;
  std::vector<double> t;
  CondMode mode = CondMode::global;
  std::int64_t n = 0, cs = 0, ct = 0;

  double at(std::int64_t y, std::int64_t x) const { return t[static_cast<std::size_t>(y * w + x)]; }
};

// Segmentation LEEP over a registered stack: the per-image log of the pixel
// product, expanded as a sum of per-pixel logs, averaged over images.
// `conditional` must be the global predictor built over the same stack.
inline double leep_image(const DummyDistField& dummy, const LabelField& labels,
                         const EmpiricalJoint& conditional) {
  detail::check_field_shapes(dummy, labels);
  if (conditional.cs != dummy.cs) {
    fail(Errc::validation, "conditional was built for a different source class count");
  }
  std::vector<double> per_image(static_cast<std::size_t>(dummy.n));
  for (std::int64_t i = 0; i < dummy.n; ++i) {
    Kahan pixels;
    for (std::int64_t y = 0; y < dummy.h; ++y)
      for (std::int64_t x = 0; x < dummy.w; ++x) {
        const double mix = detail::mixture(conditional, nullptr, dummy, i, labels.at(i, y, x), y, x);
        pixels.add(detail::log_mixture(mix));
      }
    per_image[static_cast<std::size_t>(i)] = pixels.value();
  }
  return detail::canonical_sum(per_image) / static_cast<double>(dummy.n);
}

// Per-pixel LEEP map. Global mode pools one conditional over the whole
// stack; per-location mode builds one from the N instances at each pixel,
// falling back to the global conditional for columns its own marginal
// cannot support.
inline TransferabilityMap transferability_map(const DummyDistField& dummy, const LabelField& labels,
                                              std::int64_t target_classes, CondMode mode) {
  detail::check_field_shapes(dummy, labels);
  if (dummy.n < 1) fail(Errc::validation, "transferability_map needs N >= 1 images");
  const EmpiricalJoint global = empirical_joint(dummy, labels, target_classes);

  TransferabilityMap map;
  map.h = dummy.h;
  map.w = dummy.w;
  map.t.resize(static_cast<std::size_t>(dummy.h * dummy.w));
  map.mode = mode;
  map.n = dummy.n;
  map.cs = dummy.cs;
  map.ct = target_classes;

  const double inv_n = 1.0 / static_cast<double>(dummy.n);
  std::vector<double> terms(static_cast<std::size_t>(dummy.n));
  for (std::int64_t y = 0; y < dummy.h; ++y) {
    for (std::int64_t x = 0; x < dummy.w; ++x) {
      const EmpiricalJoint* ej = &global;
      const EmpiricalJoint* fallback = nullptr;
      EmpiricalJoint local;
      if (mode == CondMode::per_location) {
        const std::vector<PixelCoord> here = {{y, x}};
        local = empirical_joint(dummy, labels, target_classes, &here);
        ej = &local;
        fallback = &global;
      }
      for (std::int64_t i = 0; i < dummy.n; ++i) {
        const double mix = detail::mixture(*ej, fallback, dummy, i, labels.at(i, y, x), y, x);
        terms[static_cast<std::size_t>(i)] = detail::log_mixture(mix);
      }
      map.t[static_cast<std::size_t>(y * map.w + x)] = detail::canonical_sum(terms) * inv_n;
    }
  }
  return map;
}

}  // namespace trm
