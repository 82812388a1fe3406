#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "trm/dataio.hpp"
#include "trm/rng.hpp"

namespace trm {

// Nested random ellipses standing in for hierarchical anatomy. Radii are
// fractions of the parent ellipse's radii (the outermost parent is the
// image-inscribed ellipse), which keeps containment enforceable by
// construction: a child's bounding circle must fit inside the parent.
struct StructureSpec {
  std::string name;
  double rx_min = 0.4, rx_max = 0.6;  // fraction of parent rx
  double ry_min = 0.4, ry_max = 0.6;  // fraction of parent ry
  double jitter = 0.05;               // center offset budget, parent-relative
  double intensity = 0.5;             // base tissue intensity in [0, 1]
};

// Monotone intensity transfer curve plus additive noise; one per imaging
// modality. observed = offset + gain * base^gamma + noise * eta
struct ModalitySpec {
  std::string name;
  double gamma = 1.0;
  double gain = 1.0;
  double offset = 0.0;
  double noise = 0.0;
};

// Maps tissues (background + structures, in order) onto label classes.
struct TaskSpec {
  std::string name;
  std::vector<std::int32_t> mapping;       // length = structures + 1, index 0 = background
  std::vector<std::string> class_names;    // length = C_t
};

struct PhantomSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t subjects = 16;
  double background = 0.05;
  std::vector<StructureSpec> structures;  // outermost first
  std::vector<ModalitySpec> modalities;
  TaskSpec task;

  void validate() const {
    if (height < 4 || width < 4) fail(Errc::validation, "phantom extent must be at least 4x4");
    if (subjects < 1) fail(Errc::validation, "phantom spec needs at least one subject");
    if (structures.empty()) fail(Errc::validation, "phantom spec needs at least one structure");
    if (modalities.empty()) fail(Errc::validation, "phantom spec needs at least one modality");
    for (const auto& s : structures) {
      if (!(s.rx_min > 0 && s.rx_max >= s.rx_min && s.ry_min > 0 && s.ry_max >= s.ry_min)) {
        fail(Errc::validation, "structure '" + s.name + "' has an empty radius range");
      }
      if (s.rx_max > 1.0 || s.ry_max > 1.0 || s.jitter + s.rx_max > 1.0 + 1e-12 ||
          s.jitter + s.ry_max > 1.0 + 1e-12) {
        fail(Errc::validation, "structure '" + s.name + "' can exceed its parent (image bounds)");
      }
      if (!(s.intensity >= 0.0 && s.intensity <= 1.0)) {
        fail(Errc::validation, "structure '" + s.name + "' intensity outside [0,1]");
      }
      if (s.jitter < 0) fail(Errc::validation, "structure '" + s.name + "' has negative jitter");
    }
    for (const auto& m : modalities) {
      if (!(m.gain > 0.0) || !(m.gamma > 0.0)) {
        fail(Errc::validation, "modality '" + m.name + "' transfer curve must be monotone (gain, gamma > 0)");
      }
      if (m.noise < 0) fail(Errc::validation, "modality '" + m.name + "' has negative noise");
    }
    if (task.mapping.size() != structures.size() + 1) {
      fail(Errc::validation, "task mapping must cover background plus every structure");
    }
    if (task.class_names.size() < 2) fail(Errc::validation, "task needs at least 2 classes");
    for (std::int32_t c : task.mapping) {
      if (c < 0 || c >= static_cast<std::int32_t>(task.class_names.size())) {
        fail(Errc::validation, "task mapping targets a class outside [0,C)");
      }
    }
    if (task.mapping[0] != 0) fail(Errc::validation, "background must map to class 0");
  }

  static PhantomSpec from_json(const json& j) {
    PhantomSpec p;
    p.height = j.value("height", std::int64_t{64});
    p.width = j.value("width", std::int64_t{64});
    p.subjects = j.value("subjects", std::int64_t{16});
    p.background = j.value("background", 0.05);
    for (const auto& sj : j.at("structures")) {
      StructureSpec s;
      s.name = sj.at("name").get<std::string>();
      s.rx_min = sj.at("rx").at(0).get<double>();
      s.rx_max = sj.at("rx").at(1).get<double>();
      s.ry_min = sj.at("ry").at(0).get<double>();
      s.ry_max = sj.at("ry").at(1).get<double>();
      s.jitter = sj.value("jitter", 0.05);
      s.intensity = sj.at("intensity").get<double>();
      p.structures.push_back(s);
    }
    for (const auto& mj : j.at("modalities")) {
      ModalitySpec m;
      m.name = mj.at("name").get<std::string>();
      m.gamma = mj.value("gamma", 1.0);
      m.gain = mj.value("gain", 1.0);
      m.offset = mj.value("offset", 0.0);
      m.noise = mj.value("noise", 0.0);
      p.modalities.push_back(m);
    }
    p.task.name = j.at("task").at("name").get<std::string>();
    p.task.mapping = j.at("task").at("mapping").get<std::vector<std::int32_t>>();
    p.task.class_names = j.at("task").at("classes").get<std::vector<std::string>>();
    return p;
  }

  json to_json() const {
    json j;
    j["height"] = height;
    j["width"] = width;
    j["subjects"] = subjects;
    j["background"] = background;
    j["structures"] = json::array();
    for (const auto& s : structures) {
      j["structures"].push_back({{"name", s.name},
                                 {"rx", {s.rx_min, s.rx_max}},
                                 {"ry", {s.ry_min, s.ry_max}},
                                 {"jitter", s.jitter},
                                 {"intensity", s.intensity}});
    }
    j["modalities"] = json::array();
    for (const auto& m : modalities) {
      j["modalities"].push_back({{"name", m.name},
                                 {"gamma", m.gamma},
                                 {"gain", m.gain},
                                 {"offset", m.offset},
                                 {"noise", m.noise}});
    }
    j["task"] = {{"name", task.name}, {"mapping", task.mapping}, {"classes", task.class_names}};
    return j;
  }
};

namespace detail {

struct Ellipse {
  double cx, cy, rx, ry;
  bool contains(double x, double y) const {
    const double dx = (x - cx) / rx;
    const double dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

// Sample the nested ellipse chain for one subject. Each child is confined
// to its parent by budgeting the center offset against the bounding circle
// of the child in parent-normalized coordinates.
inline std::vector<Ellipse> sample_geometry(const PhantomSpec& spec, SplitMix64& rng) {
  std::vector<Ellipse> chain;
  Ellipse parent{static_cast<double>(spec.width) / 2.0, static_cast<double>(spec.height) / 2.0,
                 static_cast<double>(spec.width) / 2.0 - 1.0,
                 static_cast<double>(spec.height) / 2.0 - 1.0};
  for (const auto& s : spec.structures) {
    const double fx = rng.uniform(s.rx_min, s.rx_max);
    const double fy = rng.uniform(s.ry_min, s.ry_max);
    double ox = rng.uniform(-s.jitter, s.jitter);
    double oy = rng.uniform(-s.jitter, s.jitter);
    const double budget = 1.0 - std::max(fx, fy);
    const double mag = std::sqrt(ox * ox + oy * oy);
    if (mag > budget && mag > 0.0) {
      ox *= budget / mag;
      oy *= budget / mag;
    }
    Ellipse e{parent.cx + ox * parent.rx, parent.cy + oy * parent.ry, fx * parent.rx,
              fy * parent.ry};
    chain.push_back(e);
    parent = e;
  }
  return chain;
}

}  // namespace detail

// Deterministic registered phantom stack: all modalities of a subject share
// one geometry and one label raster; intensities differ only through the
// modality transfer curves plus per-modality noise streams.
inline std::vector<SliceDataset> generate_phantoms(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::int64_t n = spec.subjects, h = spec.height, w = spec.width;
  const std::int64_t tissues = static_cast<std::int64_t>(spec.structures.size()) + 1;

  std::vector<SliceDataset> out(spec.modalities.size());
  for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
    out[m].images = Tensor({n, 1, h, w});
    out[m].labels = LabelField(n, h, w);
    out[m].manifest.id = spec.task.name + "-" + spec.modalities[m].name;
    out[m].manifest.modality = spec.modalities[m].name;
    out[m].manifest.task = spec.task.name;
    out[m].manifest.class_names = spec.task.class_names;
    out[m].manifest.seed = seed;
    out[m].manifest.generator_version = 1;
    out[m].manifest.count = n;
    out[m].manifest.height = h;
    out[m].manifest.width = w;
  }

  // per-modality tissue intensities through the transfer curves
  std::vector<std::vector<double>> tissue_curve(spec.modalities.size());
  for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
    const auto& mod = spec.modalities[m];
    tissue_curve[m].resize(static_cast<std::size_t>(tissues));
    for (std::int64_t t = 0; t < tissues; ++t) {
      const double base = t == 0 ? spec.background : spec.structures[static_cast<std::size_t>(t - 1)].intensity;
      tissue_curve[m][static_cast<std::size_t>(t)] = mod.offset + mod.gain * std::pow(base, mod.gamma);
    }
  }

  std::vector<std::int32_t> tissue_of(static_cast<std::size_t>(h * w));
  for (std::int64_t subject = 0; subject < n; ++subject) {
    SplitMix64 geom(derive_seed(seed, {fnv1a64("geometry"), static_cast<std::uint64_t>(subject)}));
    const auto chain = detail::sample_geometry(spec, geom);

    // innermost containing structure wins; structures are nested by construction
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const double px = static_cast<double>(x) + 0.5;
        const double py = static_cast<double>(y) + 0.5;
        std::int32_t tissue = 0;
        for (std::size_t s = 0; s < chain.size(); ++s) {
          if (chain[s].contains(px, py)) tissue = static_cast<std::int32_t>(s + 1);
        }
        tissue_of[static_cast<std::size_t>(y * w + x)] = tissue;
      }
    }

    for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
      const auto& mod = spec.modalities[m];
      SplitMix64 noise(derive_seed(
          seed, {fnv1a64("noise"), static_cast<std::uint64_t>(subject), fnv1a64(mod.name)}));
      auto img = out[m].images.data();
      auto& labs = out[m].labels;
      for (std::int64_t p = 0; p < h * w; ++p) {
        const std::int32_t tissue = tissue_of[static_cast<std::size_t>(p)];
        double v = tissue_curve[m][static_cast<std::size_t>(tissue)];
        if (mod.noise > 0.0) v += mod.noise * noise.gauss();
        img[static_cast<std::size_t>(subject * h * w + p)] = std::clamp(v, 0.0, 1.0);
        labs.data[static_cast<std::size_t>(subject * h * w + p)] =
            spec.task.mapping[static_cast<std::size_t>(tissue)];
      }
    }
  }
  for (auto& ds : out) ds.validate();
  return out;
}

// Convenience: generate and keep only one modality.
inline SliceDataset generate_phantom_modality(const PhantomSpec& spec, const std::string& modality,
                                              std::uint64_t seed) {
  PhantomSpec narrowed = spec;
  narrowed.modalities.clear();
  for (const auto& m : spec.modalities)
    if (m.name == modality) narrowed.modalities.push_back(m);
  if (narrowed.modalities.empty()) {
    fail(Errc::validation, "spec declares no modality named '" + modality + "'");
  }
  return generate_phantoms(narrowed, seed)[0];
}

}  // namespace trm
