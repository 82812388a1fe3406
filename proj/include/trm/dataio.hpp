#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trm/common.hpp"
#include "trm/rng.hpp"
#include "trm/tensor.hpp"

namespace trm {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// RMRS raster format, version 1. Little-endian:
//   "RMRS" | u32 version | u8 dtype (0 = f64, 1 = u8) | u32 ndim |
//   ndim x i64 dims | row-major payload
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kRasterVersion = 1;

enum class RasterDtype : std::uint8_t { f64 = 0, u8 = 1 };

struct Raster {
  RasterDtype dtype = RasterDtype::f64;
  std::vector<std::int64_t> dims;
  std::vector<double> f64;
  std::vector<std::uint8_t> u8;

  std::int64_t count() const {
    std::int64_t n = 1;
    for (std::int64_t d : dims) n *= d;
    return n;
  }
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) fail(Errc::truncated, "raster ended mid-record");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void write_raster(const Raster& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::missing_file, "cannot open " + path.string() + " for writing");
  os.write("RMRS", 4);
  detail::put_le<std::uint32_t>(os, kRasterVersion);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.dtype));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.dims.size()));
  for (std::int64_t d : r.dims) detail::put_le<std::int64_t>(os, d);
  if (r.dtype == RasterDtype::f64) {
    for (double v : r.f64) detail::put_le<double>(os, v);
  } else {
    os.write(reinterpret_cast<const char*>(r.u8.data()), static_cast<std::streamsize>(r.u8.size()));
  }
  if (!os) fail(Errc::runtime, "write failed for " + path.string());
}

inline Raster read_raster(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::missing_file, "cannot open raster " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RMRS", 4) != 0) {
    fail(Errc::bad_magic, path.string() + " is not an RMRS raster");
  }
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kRasterVersion) {
    fail(Errc::bad_version, "unsupported raster version " + std::to_string(version));
  }
  const auto dtype = detail::get_le<std::uint8_t>(is);
  if (dtype > 1) fail(Errc::bad_version, "unknown raster dtype code " + std::to_string(dtype));
  Raster r;
  r.dtype = static_cast<RasterDtype>(dtype);
  const auto ndim = detail::get_le<std::uint32_t>(is);
  r.dims.resize(ndim);
  for (auto& d : r.dims) {
    d = detail::get_le<std::int64_t>(is);
    if (d <= 0) fail(Errc::dim_mismatch, path.string() + " declares a non-positive extent");
  }
  const std::int64_t n = r.count();
  if (r.dtype == RasterDtype::f64) {
    r.f64.resize(static_cast<std::size_t>(n));
    for (auto& v : r.f64) v = detail::get_le<double>(is);
  } else {
    r.u8.resize(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(r.u8.data()), n);
    if (!is) fail(Errc::truncated, path.string() + " ended mid-payload");
  }
  return r;
}

// Row-major CSV at full round-trip precision, one line per row.
inline void write_csv_grid(std::span<const double> values, std::int64_t h, std::int64_t w,
                           const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) fail(Errc::missing_file, "cannot open " + path.string() + " for writing");
  char buf[40];
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      std::snprintf(buf, sizeof(buf), "%.17g", values[static_cast<std::size_t>(y * w + x)]);
      os << buf << (x + 1 == w ? "" : ",");
    }
    os << '\n';
  }
}

// Binary 8-bit PGM with a linear [lo, hi] -> [0, 255] mapping.
inline void write_pgm(std::span<const double> values, std::int64_t h, std::int64_t w, double lo,
                      double hi, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::missing_file, "cannot open " + path.string() + " for writing");
  os << "P5\n" << w << " " << h << "\n255\n";
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  for (std::int64_t i = 0; i < h * w; ++i) {
    const double v = std::clamp((values[static_cast<std::size_t>(i)] - lo) * scale, 0.0, 255.0);
    const auto byte = static_cast<unsigned char>(std::lround(v));
    os.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

// ---------------------------------------------------------------------------
// SliceDataset: registered stack of single-channel slices with labels.
// ---------------------------------------------------------------------------

struct DatasetManifest {
  std::string id;
  std::string modality;
  std::string task;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  std::int64_t generator_version = 1;
  std::int64_t count = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::string lineage;  // how this dataset was derived (splits, subsets)

  json to_json() const {
    json j;
    j["id"] = id;
    j["modality"] = modality;
    j["task"] = task;
    j["class_names"] = class_names;
    j["seed"] = seed;
    j["generator_version"] = generator_version;
    j["count"] = count;
    j["height"] = height;
    j["width"] = width;
    j["lineage"] = lineage;
    return j;
  }

  static DatasetManifest from_json(const json& j) {
    DatasetManifest m;
    m.id = j.at("id").get<std::string>();
    m.modality = j.at("modality").get<std::string>();
    m.task = j.at("task").get<std::string>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.generator_version = j.at("generator_version").get<std::int64_t>();
    m.count = j.at("count").get<std::int64_t>();
    m.height = j.at("height").get<std::int64_t>();
    m.width = j.at("width").get<std::int64_t>();
    m.lineage = j.value("lineage", "");
    return m;
  }
};

struct SliceDataset {
  Tensor images;      // [N, 1, H, W], intensities in [0, 1]
  LabelField labels;  // [N, H, W], class 0 is background
  DatasetManifest manifest;

  std::int64_t count() const { return labels.n; }
  std::int64_t height() const { return labels.h; }
  std::int64_t width() const { return labels.w; }
  std::int64_t num_classes() const { return static_cast<std::int64_t>(manifest.class_names.size()); }

  void validate() const {
    if (images.ndim() != 4 || images.dim(1) != 1) {
      fail(Errc::validation, "dataset images must be [N,1,H,W], got " + shape_str(images.shape()));
    }
    if (images.dim(0) != labels.n || images.dim(2) != labels.h || images.dim(3) != labels.w) {
      fail(Errc::dim_mismatch, "image stack " + shape_str(images.shape()) +
                                   " does not match label raster [" + std::to_string(labels.n) +
                                   "," + std::to_string(labels.h) + "," + std::to_string(labels.w) +
                                   "]");
    }
    if (manifest.count != labels.n || manifest.height != labels.h || manifest.width != labels.w) {
      fail(Errc::dim_mismatch, "manifest declares " + std::to_string(manifest.count) + "x" +
                                   std::to_string(manifest.height) + "x" +
                                   std::to_string(manifest.width) + " but rasters hold " +
                                   std::to_string(labels.n) + "x" + std::to_string(labels.h) + "x" +
                                   std::to_string(labels.w));
    }
    const auto classes = num_classes();
    for (double v : images.data()) {
      if (!(v >= 0.0 && v <= 1.0)) fail(Errc::validation, "image intensity outside [0,1]");
    }
    for (std::int32_t v : labels.data) {
      if (v < 0 || v >= classes) {
        fail(Errc::validation, "label " + std::to_string(v) + " outside [0," +
                                   std::to_string(classes) + ")");
      }
    }
  }

  // Row-copy of the selected subjects, in the order given.
  SliceDataset take(const std::vector<std::int64_t>& indices, const std::string& lineage_note) const {
    const std::int64_t h = height(), w = width();
    const std::int64_t k = static_cast<std::int64_t>(indices.size());
    SliceDataset out;
    out.images = Tensor({k, 1, h, w});
    out.labels = LabelField(k, h, w);
    for (std::int64_t r = 0; r < k; ++r) {
      const std::int64_t src = indices[static_cast<std::size_t>(r)];
      std::copy_n(images.data().begin() + src * h * w, h * w, out.images.data().begin() + r * h * w);
      std::copy_n(labels.data.begin() + src * h * w, h * w, out.labels.data.begin() + r * h * w);
    }
    out.manifest = manifest;
    out.manifest.count = k;
    out.manifest.lineage =
        (manifest.lineage.empty() ? manifest.id : manifest.lineage) + " -> " + lineage_note;
    return out;
  }
};

inline void save_dataset(const SliceDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "manifest.json");
    if (!os) fail(Errc::missing_file, "cannot write manifest in " + dir.string());
    os << ds.manifest.to_json().dump(2) << '\n';
  }
  Raster imgs;
  imgs.dtype = RasterDtype::f64;
  imgs.dims = {ds.count(), 1, ds.height(), ds.width()};
  imgs.f64.assign(ds.images.data().begin(), ds.images.data().end());
  write_raster(imgs, dir / "images.rmrs");

  Raster labs;
  labs.dtype = RasterDtype::u8;
  labs.dims = {ds.count(), ds.height(), ds.width()};
  labs.u8.resize(static_cast<std::size_t>(ds.labels.numel()));
  for (std::size_t i = 0; i < labs.u8.size(); ++i)
    labs.u8[i] = static_cast<std::uint8_t>(ds.labels.data[i]);
  write_raster(labs, dir / "labels.rmrs");
}

inline SliceDataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) fail(Errc::missing_file, "missing " + manifest_path.string());
  json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    fail(Errc::validation, manifest_path.string() + ": " + e.what());
  }
  SliceDataset ds;
  ds.manifest = DatasetManifest::from_json(j);

  const Raster imgs = read_raster(dir / "images.rmrs");
  if (imgs.dtype != RasterDtype::f64 || imgs.dims.size() != 4 || imgs.dims[1] != 1) {
    fail(Errc::dim_mismatch, "images.rmrs must be a [N,1,H,W] f64 raster");
  }
  const Raster labs = read_raster(dir / "labels.rmrs");
  if (labs.dtype != RasterDtype::u8 || labs.dims.size() != 3) {
    fail(Errc::dim_mismatch, "labels.rmrs must be a [N,H,W] u8 raster");
  }
  ds.images = Tensor::from({imgs.dims[0], 1, imgs.dims[2], imgs.dims[3]}, imgs.f64);
  ds.labels = LabelField(labs.dims[0], labs.dims[1], labs.dims[2]);
  for (std::size_t i = 0; i < labs.u8.size(); ++i) ds.labels.data[i] = labs.u8[i];
  ds.validate();
  return ds;
}

// Deterministic shuffled partition by subject: disjoint and exhaustive.
// Fractions must be non-negative and sum to 1; sizes round down except the
// last split, which takes the remainder.
inline std::array<SliceDataset, 3> split(const SliceDataset& ds, const std::array<double, 3>& fractions,
                                         std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) fail(Errc::validation, "split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) fail(Errc::validation, "split fractions must sum to 1");

  std::vector<std::int64_t> order(static_cast<std::size_t>(ds.count()));
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(derive_seed(seed, {fnv1a64("split")}));
  fisher_yates(order, rng);

  const std::int64_t n = ds.count();
  const std::int64_t n0 = static_cast<std::int64_t>(fractions[0] * static_cast<double>(n));
  const std::int64_t n1 = static_cast<std::int64_t>(fractions[1] * static_cast<double>(n));
  const std::array<std::pair<std::int64_t, std::int64_t>, 3> ranges = {
      std::pair{std::int64_t{0}, n0}, {n0, n0 + n1}, {n0 + n1, n}};
  std::array<SliceDataset, 3> out;
  const std::array<std::string, 3> names = {"train", "val", "test"};
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<std::int64_t> idx(order.begin() + ranges[s].first, order.begin() + ranges[s].second);
    out[s] = ds.take(idx, "split:" + names[s]);
  }
  return out;
}

// Deterministic k-subject subset preserving manifest lineage.
inline SliceDataset few_shot_subset(const SliceDataset& ds, std::int64_t k, std::uint64_t seed) {
  if (k < 1 || k > ds.count()) {
    fail(Errc::validation, "few_shot_subset k=" + std::to_string(k) + " outside [1," +
                               std::to_string(ds.count()) + "]");
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(ds.count()));
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(derive_seed(seed, {fnv1a64("few-shot")}));
  fisher_yates(order, rng);
  order.resize(static_cast<std::size_t>(k));
  return ds.take(order, "fewshot:k=" + std::to_string(k));
}

}  // namespace trm
