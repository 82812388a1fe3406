#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trm/common.hpp"
#include "trm/dataio.hpp"
#include "trm/leep.hpp"
#include "trm/tensor.hpp"

namespace trm {

// Min-max scaling orientation. `hardness` (the default) inverts the raw
// scaling so 1 marks the least transferable pixel; `paper_eq` keeps the raw
// scaling, where 1 marks the highest LEEP score. A constant map degenerates
// to all zeros either way.
enum class Orientation { hardness, paper_eq };

inline std::string to_string(Orientation o) {
  return o == Orientation::hardness ? "hardness" : "paper-eq";
}

inline Orientation orientation_from_string(const std::string& s) {
  if (s == "hardness") return Orientation::hardness;
  if (s == "paper-eq") return Orientation::paper_eq;
  fail(Errc::validation, "unknown orientation '" + s + "' (expected hardness or paper-eq)");
}

inline CondMode cond_mode_from_string(const std::string& s) {
  if (s == "global") return CondMode::global;
  if (s == "perloc") return CondMode::per_location;
  fail(Errc::validation, "unknown conditional mode '" + s + "' (expected global or perloc)");
}

// Transferability map scaled into [0, 1].
struct ScaledMap {
  std::int64_t h = 0, w = 0;
  std::vector<double> v;
  Orientation orientation = Orientation::hardness;

  double at(std::int64_t y, std::int64_t x) const { return v[static_cast<std::size_t>(y * w + x)]; }
};

inline ScaledMap normalize_map(const TransferabilityMap& t, Orientation orientation) {
  ScaledMap s;
  s.h = t.h;
  s.w = t.w;
  s.orientation = orientation;
  s.v.resize(t.t.size());
  if (t.t.empty()) return s;
  double lo = t.t[0], hi = t.t[0];
  for (double v : t.t) {
    if (!std::isfinite(v)) fail(Errc::validation, "normalize_map requires finite entries");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    std::fill(s.v.begin(), s.v.end(), 0.0);
    return s;
  }
  const double span = hi - lo;
  for (std::size_t i = 0; i < t.t.size(); ++i) {
    s.v[i] = orientation == Orientation::paper_eq ? (t.t[i] - lo) / span : (hi - t.t[i]) / span;
  }
  return s;
}

// Transfer risk weights w = base^{t_s}, entries in [1, base].
struct RiskMap {
  std::int64_t h = 0, w = 0;
  std::vector<double> weights;
  Orientation orientation = Orientation::hardness;
  struct Provenance {
    std::string source_id;
    std::string target_id;
    CondMode cond_mode = CondMode::global;
  } provenance;

  double at(std::int64_t y, std::int64_t x) const {
    return weights[static_cast<std::size_t>(y * w + x)];
  }
  double mean() const {
    Kahan k;
    for (double v : weights) k.add(v);
    return weights.empty() ? 0.0 : k.value() / static_cast<double>(weights.size());
  }
  double max() const {
    double m = weights.empty() ? 0.0 : weights[0];
    for (double v : weights) m = std::max(m, v);
    return m;
  }
};

inline RiskMap risk_map(const ScaledMap& scaled, double base = 10.0,
                        RiskMap::Provenance provenance = {}) {
  if (!(base > 1.0)) fail(Errc::validation, "risk map base must exceed 1");
  RiskMap r;
  r.h = scaled.h;
  r.w = scaled.w;
  r.orientation = scaled.orientation;
  r.provenance = std::move(provenance);
  r.weights.resize(scaled.v.size());
  for (std::size_t i = 0; i < scaled.v.size(); ++i) {
    const double t = scaled.v[i];
    if (!(t >= 0.0 && t <= 1.0)) {
      fail(Errc::validation, "scaled map entry " + std::to_string(t) + " outside [0,1]");
    }
    r.weights[i] = std::pow(base, t);
  }
  return r;
}

// Foreground-normalized risk-weighted loss: sum over every pixel of
// w * loss, divided by the number of foreground (label != 0) pixels.
// A batch with no foreground falls back to the total pixel count so the
// loss stays defined. Differentiable w.r.t. loss_map.
inline Tensor weighted_loss(const Tensor& loss_map, const RiskMap& risk, const LabelField& labels,
                            Tape* tape = nullptr) {
  if (loss_map.ndim() != 3) {
    fail(Errc::validation, "weighted_loss expects a [N,H,W] loss map, got " + shape_str(loss_map.shape()));
  }
  const std::int64_t n = loss_map.dim(0), h = loss_map.dim(1), w = loss_map.dim(2);
  if (labels.n != n || labels.h != h || labels.w != w) {
    fail(Errc::validation, "weighted_loss label raster does not match the loss map");
  }
  if (risk.h != h || risk.w != w) {
    fail(Errc::validation, "weighted_loss risk map is " + std::to_string(risk.h) + "x" +
                               std::to_string(risk.w) + " but the loss map is " +
                               std::to_string(h) + "x" + std::to_string(w));
  }
  std::int64_t foreground = 0;
  for (std::int32_t v : labels.data)
    if (v != 0) ++foreground;
  const double denom = static_cast<double>(foreground > 0 ? foreground : n * h * w);

  Tensor weights({n, h, w});
  for (std::int64_t i = 0; i < n; ++i)
    std::copy(risk.weights.begin(), risk.weights.end(), weights.data().begin() + i * h * w);
  return weighted_mean(loss_map, weights, denom, tape);
}

// Inverse-frequency class weights: w_c = M / (C * m_c); absent classes get 1.
struct ClassWeights {
  std::vector<double> w;
};

inline ClassWeights class_weights(const LabelField& labels, std::int64_t num_classes) {
  if (num_classes < 1) fail(Errc::validation, "class_weights needs num_classes >= 1");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::int32_t v : labels.data) {
    if (v < 0 || v >= num_classes) {
      fail(Errc::validation, "label " + std::to_string(v) + " outside [0," +
                                 std::to_string(num_classes) + ")");
    }
    ++counts[static_cast<std::size_t>(v)];
  }
  const double total = static_cast<double>(labels.numel());
  ClassWeights cw;
  cw.w.resize(static_cast<std::size_t>(num_classes));
  for (std::size_t c = 0; c < cw.w.size(); ++c) {
    cw.w[c] = counts[c] == 0
                  ? 1.0
                  : total / (static_cast<double>(num_classes) * static_cast<double>(counts[c]));
  }
  return cw;
}

enum class SchemeKind { vanilla, class_weighted, trsmap, riskmap };

inline std::string to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::vanilla: return "vanilla";
    case SchemeKind::class_weighted: return "class";
    case SchemeKind::trsmap: return "trsmap";
    case SchemeKind::riskmap: return "riskmap";
  }
  return "?";
}

inline SchemeKind scheme_from_string(const std::string& s) {
  if (s == "vanilla") return SchemeKind::vanilla;
  if (s == "class") return SchemeKind::class_weighted;
  if (s == "trsmap") return SchemeKind::trsmap;
  if (s == "riskmap") return SchemeKind::riskmap;
  fail(Errc::validation, "unknown scheme '" + s + "' (expected vanilla|class|trsmap|riskmap)");
}

// Scheme + its payload. vanilla carries nothing; class carries ClassWeights;
// trsmap carries the scaled map (no exponential); riskmap carries the
// exponential risk map and uses the foreground-normalized reduction.
struct WeightingScheme {
  SchemeKind kind = SchemeKind::vanilla;
  std::optional<ClassWeights> class_w;
  std::optional<ScaledMap> trs;
  std::optional<RiskMap> risk;

  static WeightingScheme vanilla() { return {}; }
  static WeightingScheme with_class(ClassWeights cw) {
    return {SchemeKind::class_weighted, std::move(cw), std::nullopt, std::nullopt};
  }
  static WeightingScheme with_trs(ScaledMap m) {
    return {SchemeKind::trsmap, std::nullopt, std::move(m), std::nullopt};
  }
  static WeightingScheme with_risk(RiskMap m) {
    return {SchemeKind::riskmap, std::nullopt, std::nullopt, std::move(m)};
  }
};

inline Tensor scheme_loss(const WeightingScheme& scheme, const Tensor& loss_map,
                          const LabelField& labels, Tape* tape = nullptr) {
  if (loss_map.ndim() != 3) {
    fail(Errc::validation, "scheme_loss expects a [N,H,W] loss map, got " + shape_str(loss_map.shape()));
  }
  const std::int64_t n = loss_map.dim(0), h = loss_map.dim(1), w = loss_map.dim(2);
  if (labels.n != n || labels.h != h || labels.w != w) {
    fail(Errc::validation, "scheme_loss label raster does not match the loss map");
  }
  const double all = static_cast<double>(n * h * w);
  switch (scheme.kind) {
    case SchemeKind::vanilla: {
      Tensor ones({n, h, w}, 1.0);
      return weighted_mean(loss_map, ones, all, tape);
    }
    case SchemeKind::class_weighted: {
      if (!scheme.class_w) fail(Errc::validation, "scheme 'class' is missing its ClassWeights payload");
      const auto& cw = scheme.class_w->w;
      Tensor weights({n, h, w});
      auto wd = weights.data();
      for (std::int64_t i = 0; i < n * h * w; ++i) {
        const std::int32_t lab = labels.data[static_cast<std::size_t>(i)];
        if (lab < 0 || lab >= static_cast<std::int32_t>(cw.size())) {
          fail(Errc::validation, "label " + std::to_string(lab) + " has no class weight");
        }
        wd[static_cast<std::size_t>(i)] = cw[static_cast<std::size_t>(lab)];
      }
      return weighted_mean(loss_map, weights, all, tape);
    }
    case SchemeKind::trsmap: {
      if (!scheme.trs) fail(Errc::validation, "scheme 'trsmap' is missing its scaled-map payload");
      if (scheme.trs->h != h || scheme.trs->w != w) {
        fail(Errc::validation, "trsmap payload extent does not match the loss map");
      }
      Tensor weights({n, h, w});
      for (std::int64_t i = 0; i < n; ++i)
        std::copy(scheme.trs->v.begin(), scheme.trs->v.end(), weights.data().begin() + i * h * w);
      return weighted_mean(loss_map, weights, all, tape);
    }
    case SchemeKind::riskmap: {
      if (!scheme.risk) fail(Errc::validation, "scheme 'riskmap' is missing its risk-map payload");
      return weighted_loss(loss_map, *scheme.risk, labels, tape);
    }
  }
  fail(Errc::validation, "unhandled scheme");
}

// ---------------------------------------------------------------------------
// Map exports
// ---------------------------------------------------------------------------

inline void export_transferability_map(const TransferabilityMap& map,
                                       const std::filesystem::path& prefix) {
  write_csv_grid(map.t, map.h, map.w, prefix.string() + ".csv");
  Raster r;
  r.dtype = RasterDtype::f64;
  r.dims = {map.h, map.w};
  r.f64 = map.t;
  write_raster(r, prefix.string() + ".rmrs");
}

// PGM preview maps [1, 10] -> [0, 255]; brighter pixels carry higher risk.
inline void export_risk_map(const RiskMap& map, const std::filesystem::path& prefix) {
  write_csv_grid(map.weights, map.h, map.w, prefix.string() + ".csv");
  Raster r;
  r.dtype = RasterDtype::f64;
  r.dims = {map.h, map.w};
  r.f64 = map.weights;
  write_raster(r, prefix.string() + ".rmrs");
  write_pgm(map.weights, map.h, map.w, 1.0, 10.0, prefix.string() + ".pgm");
}

}  // namespace trm
