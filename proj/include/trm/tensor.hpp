#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "trm/common.hpp"

namespace trm {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major f64 tensor. Copies are shallow (storage is shared);
// clone() makes an independent buffer. The gradient buffer exists exactly
// when requires_grad is set and always matches the data shape.
class Tensor {
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };

 public:
  Tensor() : impl_(std::make_shared<Impl>()) {}

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (std::int64_t e : shape) {
      if (e < 0) fail(Errc::validation, "tensor extents must be non-negative, got " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(shape_numel(impl_->shape)), fill);
    set_requires_grad(requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
      fail(Errc::validation, "value count " + std::to_string(values.size()) +
                                 " does not fill shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.set_requires_grad(requires_grad);
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }

  double value() const {
    if (numel() != 1) fail(Errc::validation, "value() requires a scalar, shape is " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }

  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
      impl_->grad.assign(impl_->data.size(), 0.0);
    } else {
      impl_->grad.clear();
    }
  }

  std::span<double> grad() {
    if (!impl_->requires_grad) fail(Errc::validation, "grad() on a tensor without requires_grad");
    return impl_->grad;
  }
  std::span<const double> grad() const {
    if (!impl_->requires_grad) fail(Errc::validation, "grad() on a tensor without requires_grad");
    return impl_->grad;
  }

  void zero_grad() {
    if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  Tensor clone() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.set_requires_grad(impl_->requires_grad);
    return t;
  }

  bool shares_storage(const Tensor& o) const { return impl_ == o.impl_; }

  bool all_finite() const {
    for (double v : impl_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::shared_ptr<Impl> impl_;
};

// Integer label raster [N, H, W]. Class 0 is background by convention.
struct LabelField {
  std::int64_t n = 0, h = 0, w = 0;
  std::vector<std::int32_t> data;

  LabelField() = default;
  LabelField(std::int64_t n_, std::int64_t h_, std::int64_t w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_ * h_ * w_), fill) {}

  std::int64_t numel() const { return n * h * w; }
  std::int32_t at(std::int64_t i, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>((i * h + y) * w + x)];
  }
  std::int32_t& at(std::int64_t i, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>((i * h + y) * w + x)];
  }
};

// Reverse-mode tape. Ops append adjoint callbacks in execution order;
// backward() replays them exactly once, in reverse.
class Tape {
 public:
  void record(std::function<void()> adjoint) { records_.push_back(std::move(adjoint)); }
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  void replay_reverse() {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> records_;
};

inline void backward(Tensor scalar, Tape& tape) {
  if (scalar.numel() != 1) {
    fail(Errc::validation, "backward() root must be a scalar, shape is " + shape_str(scalar.shape()));
  }
  if (scalar.requires_grad()) scalar.grad()[0] += 1.0;
  tape.replay_reverse();
}

namespace detail {

inline bool want_grad(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}
inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

}  // namespace detail

namespace detail {

// Fast path: 3x3 kernel, stride 1, padding 1 (the U-Net workhorse).
// One pass per output row with nine fused multiply-adds per pixel.
inline void conv3x3_forward(const double* iplane, const double* k9, double* oplane,
                            std::int64_t h, std::int64_t w) {
  for (std::int64_t y = 0; y < h; ++y) {
    const double* r0 = y > 0 ? iplane + (y - 1) * w : nullptr;
    const double* r1 = iplane + y * w;
    const double* r2 = y + 1 < h ? iplane + (y + 1) * w : nullptr;
    double* out = oplane + y * w;
    auto row_acc = [&](const double* r, const double* kr) {
      if (!r) return;
      out[0] += kr[1] * r[0] + kr[2] * r[1];
      for (std::int64_t x = 1; x + 1 < w; ++x)
        out[x] += kr[0] * r[x - 1] + kr[1] * r[x] + kr[2] * r[x + 1];
      if (w > 1) out[w - 1] += kr[0] * r[w - 2] + kr[1] * r[w - 1];
    };
    row_acc(r0, k9 + 0);
    row_acc(r1, k9 + 3);
    row_acc(r2, k9 + 6);
  }
}

// Gradient w.r.t. the input: correlation of the output gradient with the
// flipped kernel, same geometry as the forward pass.
inline void conv3x3_input_grad(const double* gplane, const double* k9, double* igplane,
                               std::int64_t h, std::int64_t w) {
  double flipped[9];
  for (int i = 0; i < 9; ++i) flipped[i] = k9[8 - i];
  conv3x3_forward(gplane, flipped, igplane, h, w);
}

// Gradient w.r.t. the nine kernel taps: nine shifted dot products in one
// pass over the output gradient.
inline void conv3x3_kernel_grad(const double* iplane, const double* gplane, double* k9grad,
                                std::int64_t h, std::int64_t w) {
  double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
  for (std::int64_t y = 0; y < h; ++y) {
    const double* r0 = y > 0 ? iplane + (y - 1) * w : nullptr;
    const double* r1 = iplane + y * w;
    const double* r2 = y + 1 < h ? iplane + (y + 1) * w : nullptr;
    const double* g = gplane + y * w;
    auto row_acc = [&](const double* r, int base) {
      if (!r) return;
      double a0 = 0, a1 = 0, a2 = 0;
      a1 += g[0] * r[0];
      a2 += g[0] * r[1];
      for (std::int64_t x = 1; x + 1 < w; ++x) {
        const double gv = g[x];
        a0 += gv * r[x - 1];
        a1 += gv * r[x];
        a2 += gv * r[x + 1];
      }
      if (w > 1) {
        a0 += g[w - 1] * r[w - 2];
        a1 += g[w - 1] * r[w - 1];
      }
      acc[base] += a0;
      acc[base + 1] += a1;
      acc[base + 2] += a2;
    };
    row_acc(r0, 0);
    row_acc(r1, 3);
    row_acc(r2, 6);
  }
  for (int i = 0; i < 9; ++i) k9grad[i] += acc[i];
}

}  // namespace detail

// 2D cross-correlation with zero padding.
//   input  [N, Cin, H, W], kernel [Cout, Cin, kh, kw], bias [Cout]
//   output [N, Cout, (H+2p-kh)/s+1, (W+2p-kw)/s+1]
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     std::int64_t stride, std::int64_t padding, Tape* tape = nullptr) {
  if (input.ndim() != 4 || kernel.ndim() != 4) {
    fail(Errc::validation, "conv2d expects 4-d input and kernel, got " + shape_str(input.shape()) +
                               " and " + shape_str(kernel.shape()));
  }
  const std::int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t cout = kernel.dim(0), kcin = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (cin != kcin) {
    fail(Errc::validation, "conv2d channel mismatch: input " + shape_str(input.shape()) +
                               " has Cin=" + std::to_string(cin) + " but kernel " +
                               shape_str(kernel.shape()) + " expects Cin=" + std::to_string(kcin));
  }
  if (bias.ndim() != 1 || bias.dim(0) != cout) {
    fail(Errc::validation, "conv2d bias shape " + shape_str(bias.shape()) + " must be [" +
                               std::to_string(cout) + "]");
  }
  if (stride < 1) fail(Errc::validation, "conv2d stride must be >= 1");
  if (padding < 0) fail(Errc::validation, "conv2d padding must be >= 0");
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    fail(Errc::validation, "conv2d kernel " + shape_str(kernel.shape()) +
                               " exceeds padded input extents of " + shape_str(input.shape()));
  }
  const std::int64_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - kw) / stride + 1;

  const bool fast3x3 = stride == 1 && padding == 1 && kh == 3 && kw == 3 && w >= 2;

  Tensor out({n, cout, ho, wo});
  {
    const double* in = input.data().data();
    const double* kp = kernel.data().data();
    const double* bp = bias.data().data();
    double* op = out.data().data();
    for (std::int64_t ni = 0; ni < n; ++ni) {
      for (std::int64_t co = 0; co < cout; ++co) {
        double* oplane = op + (ni * cout + co) * ho * wo;
        std::fill(oplane, oplane + ho * wo, bp[co]);
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          const double* iplane = in + (ni * cin + ci) * h * w;
          const double* kbase = kp + (co * cin + ci) * kh * kw;
          if (fast3x3) {
            detail::conv3x3_forward(iplane, kbase, oplane, h, w);
            continue;
          }
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const std::int64_t oy0 = std::max<std::int64_t>(0, detail::ceil_div(padding - ky, stride));
            const std::int64_t oy1 =
                std::min(ho, detail::floor_div(h - 1 - ky + padding, stride) + 1);
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const double kv = kbase[ky * kw + kx];
              const std::int64_t ox0 = std::max<std::int64_t>(0, detail::ceil_div(padding - kx, stride));
              const std::int64_t ox1 =
                  std::min(wo, detail::floor_div(w - 1 - kx + padding, stride) + 1);
              for (std::int64_t oy = oy0; oy < oy1; ++oy) {
                const double* irow = iplane + (oy * stride + ky - padding) * w + kx - padding;
                double* orow = oplane + oy * wo;
                if (stride == 1) {
                  for (std::int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += kv * irow[ox];
                } else {
                  for (std::int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += kv * irow[ox * stride];
                }
              }
            }
          }
        }
      }
    }
  }

  if (detail::want_grad(tape, {&input, &kernel, &bias})) {
    out.set_requires_grad(true);
    Tensor in_c = input, k_c = kernel, b_c = bias, out_c = out;
    tape->record([in_c, k_c, b_c, out_c, stride, padding, n, cin, cout, h, w, kh, kw, ho,
                  wo]() mutable {
      const double* g = out_c.grad().data();
      if (b_c.requires_grad()) {
        double* bg = b_c.grad().data();
        for (std::int64_t ni = 0; ni < n; ++ni)
          for (std::int64_t co = 0; co < cout; ++co) {
            const double* gplane = g + (ni * cout + co) * ho * wo;
            double acc = 0.0;
            for (std::int64_t i = 0; i < ho * wo; ++i) acc += gplane[i];
            bg[co] += acc;
          }
      }
      const bool need_kg = k_c.requires_grad();
      const bool need_ig = in_c.requires_grad();
      if (!need_kg && !need_ig) return;
      const bool fast3x3 = stride == 1 && padding == 1 && kh == 3 && kw == 3 && w >= 2;
      const double* in = in_c.data().data();
      const double* kp = k_c.data().data();
      double* kg = need_kg ? k_c.grad().data() : nullptr;
      double* ig = need_ig ? in_c.grad().data() : nullptr;
      for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t co = 0; co < cout; ++co) {
          const double* gplane = g + (ni * cout + co) * ho * wo;
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            const double* iplane = in + (ni * cin + ci) * h * w;
            double* igplane = need_ig ? ig + (ni * cin + ci) * h * w : nullptr;
            const std::int64_t koff = (co * cin + ci) * kh * kw;
            if (fast3x3) {
              if (need_kg) detail::conv3x3_kernel_grad(iplane, gplane, kg + koff, h, w);
              if (need_ig) detail::conv3x3_input_grad(gplane, kp + koff, igplane, h, w);
              continue;
            }
            for (std::int64_t ky = 0; ky < kh; ++ky) {
              const std::int64_t oy0 = std::max<std::int64_t>(0, detail::ceil_div(padding - ky, stride));
              const std::int64_t oy1 =
                  std::min(ho, detail::floor_div(h - 1 - ky + padding, stride) + 1);
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const std::int64_t ox0 =
                    std::max<std::int64_t>(0, detail::ceil_div(padding - kx, stride));
                const std::int64_t ox1 =
                    std::min(wo, detail::floor_div(w - 1 - kx + padding, stride) + 1);
                const double kv = kp[koff + ky * kw + kx];
                double kacc = 0.0;
                for (std::int64_t oy = oy0; oy < oy1; ++oy) {
                  const double* grow = gplane + oy * wo;
                  const std::int64_t ibase = (oy * stride + ky - padding) * w + kx - padding;
                  if (stride == 1) {
                    const double* irow = iplane + ibase;
                    if (need_kg)
                      for (std::int64_t ox = ox0; ox < ox1; ++ox) kacc += grow[ox] * irow[ox];
                    if (need_ig) {
                      double* igrow = igplane + ibase;
                      for (std::int64_t ox = ox0; ox < ox1; ++ox) igrow[ox] += kv * grow[ox];
                    }
                  } else {
                    if (need_kg)
                      for (std::int64_t ox = ox0; ox < ox1; ++ox)
                        kacc += grow[ox] * iplane[ibase + ox * stride];
                    if (need_ig)
                      for (std::int64_t ox = ox0; ox < ox1; ++ox)
                        igplane[ibase + ox * stride] += kv * grow[ox];
                  }
                }
                if (need_kg) kg[koff + ky * kw + kx] += kacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Elementwise max(0, x). Subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& input, Tape* tape = nullptr) {
  Tensor out(input.shape());
  const std::span<const double> xd = input.data();
  std::span<double> od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  if (detail::want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor in_c = input, out_c = out;
    tape->record([in_c, out_c]() mutable {
      const std::span<const double> g = out_c.grad();
      const std::span<const double> xd = in_c.data();
      std::span<double> xg = in_c.grad();
      for (std::size_t i = 0; i < xd.size(); ++i)
        if (xd[i] > 0.0) xg[i] += g[i];
    });
  }
  return out;
}

// 2x2 non-overlapping max pool. Gradient routes to the first (row-major)
// argmax of each window on ties.
inline Tensor max_pool2(const Tensor& input, Tape* tape = nullptr) {
  if (input.ndim() != 4) fail(Errc::validation, "max_pool2 expects [N,C,H,W], got " + shape_str(input.shape()));
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    fail(Errc::validation, "max_pool2 needs even spatial extents, got " + shape_str(input.shape()));
  }
  const std::int64_t ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  {
    const double* in = input.data().data();
    double* op = out.data().data();
    std::int64_t oi = 0;
    for (std::int64_t p = 0; p < n * c; ++p) {
      const double* plane = in + p * h * w;
      const std::int64_t pbase = p * h * w;
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox, ++oi) {
          const std::int64_t y = 2 * oy, x = 2 * ox;
          std::int64_t best = y * w + x;
          double bv = plane[best];
          const std::int64_t cand[3] = {y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1};
          for (std::int64_t idx : cand) {
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
          op[oi] = bv;
          (*argmax)[static_cast<std::size_t>(oi)] = pbase + best;
        }
      }
    }
  }
  if (detail::want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor in_c = input, out_c = out;
    tape->record([in_c, out_c, argmax]() mutable {
      const std::span<const double> g = out_c.grad();
      std::span<double> xg = in_c.grad();
      for (std::size_t i = 0; i < g.size(); ++i) xg[static_cast<std::size_t>((*argmax)[i])] += g[i];
    });
  }
  return out;
}

// Nearest-neighbor 2x upsampling. Adjoint sums the four replicas.
inline Tensor upsample_nn2(const Tensor& input, Tape* tape = nullptr) {
  if (input.ndim() != 4) fail(Errc::validation, "upsample_nn2 expects [N,C,H,W], got " + shape_str(input.shape()));
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  Tensor out({n, c, 2 * h, 2 * w});
  {
    const double* in = input.data().data();
    double* op = out.data().data();
    for (std::int64_t p = 0; p < n * c; ++p) {
      const double* plane = in + p * h * w;
      double* oplane = op + p * 4 * h * w;
      for (std::int64_t y = 0; y < h; ++y) {
        double* r0 = oplane + (2 * y) * 2 * w;
        double* r1 = r0 + 2 * w;
        for (std::int64_t x = 0; x < w; ++x) {
          const double v = plane[y * w + x];
          r0[2 * x] = v;
          r0[2 * x + 1] = v;
          r1[2 * x] = v;
          r1[2 * x + 1] = v;
        }
      }
    }
  }
  if (detail::want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor in_c = input, out_c = out;
    tape->record([in_c, out_c, n, c, h, w]() mutable {
      const double* g = out_c.grad().data();
      double* xg = in_c.grad().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        const double* gplane = g + p * 4 * h * w;
        double* xplane = xg + p * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
          const double* r0 = gplane + (2 * y) * 2 * w;
          const double* r1 = r0 + 2 * w;
          for (std::int64_t x = 0; x < w; ++x) {
            xplane[y * w + x] += r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
          }
        }
      }
    });
  }
  return out;
}

// Concatenation along the channel axis: [N,Ca,H,W] ++ [N,Cb,H,W].
inline Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  if (a.ndim() != 4 || b.ndim() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3)) {
    fail(Errc::validation, "concat_channels shape mismatch: " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
  }
  const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor out({n, ca + cb, h, w});
  {
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    const std::int64_t plane = h * w;
    for (std::int64_t ni = 0; ni < n; ++ni) {
      std::copy(ad + ni * ca * plane, ad + (ni + 1) * ca * plane, od + ni * (ca + cb) * plane);
      std::copy(bd + ni * cb * plane, bd + (ni + 1) * cb * plane,
                od + (ni * (ca + cb) + ca) * plane);
    }
  }
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor a_c = a, b_c = b, out_c = out;
    tape->record([a_c, b_c, out_c, n, ca, cb, h, w]() mutable {
      const double* g = out_c.grad().data();
      const std::int64_t plane = h * w;
      if (a_c.requires_grad()) {
        double* ag = a_c.grad().data();
        for (std::int64_t ni = 0; ni < n; ++ni) {
          const double* src = g + ni * (ca + cb) * plane;
          double* dst = ag + ni * ca * plane;
          for (std::int64_t i = 0; i < ca * plane; ++i) dst[i] += src[i];
        }
      }
      if (b_c.requires_grad()) {
        double* bg = b_c.grad().data();
        for (std::int64_t ni = 0; ni < n; ++ni) {
          const double* src = g + (ni * (ca + cb) + ca) * plane;
          double* dst = bg + ni * cb * plane;
          for (std::int64_t i = 0; i < cb * plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

// Per-pixel softmax over the channel axis, stabilized by max subtraction.
inline Tensor channel_softmax(const Tensor& logits, Tape* tape = nullptr) {
  if (logits.ndim() != 4) fail(Errc::validation, "channel_softmax expects [N,C,H,W], got " + shape_str(logits.shape()));
  const std::int64_t n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::int64_t plane = h * w;
  Tensor out(logits.shape());
  {
    const double* in = logits.data().data();
    double* op = out.data().data();
    for (std::int64_t ni = 0; ni < n; ++ni) {
      const double* ibase = in + ni * c * plane;
      double* obase = op + ni * c * plane;
      for (std::int64_t px = 0; px < plane; ++px) {
        double m = ibase[px];
        for (std::int64_t ci = 1; ci < c; ++ci) m = std::max(m, ibase[ci * plane + px]);
        double z = 0.0;
        for (std::int64_t ci = 0; ci < c; ++ci) {
          const double e = std::exp(ibase[ci * plane + px] - m);
          obase[ci * plane + px] = e;
          z += e;
        }
        const double inv = 1.0 / z;
        for (std::int64_t ci = 0; ci < c; ++ci) obase[ci * plane + px] *= inv;
      }
    }
  }
  if (detail::want_grad(tape, {&logits})) {
    out.set_requires_grad(true);
    Tensor in_c = logits, out_c = out;
    tape->record([in_c, out_c, n, c, plane]() mutable {
      const double* g = out_c.grad().data();
      const double* p = out_c.data().data();
      double* xg = in_c.grad().data();
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const std::int64_t base = ni * c * plane;
        for (std::int64_t px = 0; px < plane; ++px) {
          double dot = 0.0;
          for (std::int64_t ci = 0; ci < c; ++ci) {
            const std::int64_t idx = base + ci * plane + px;
            dot += g[idx] * p[idx];
          }
          for (std::int64_t ci = 0; ci < c; ++ci) {
            const std::int64_t idx = base + ci * plane + px;
            xg[idx] += p[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

inline constexpr double kProbFloor = 1e-12;

// Unreduced per-pixel cross entropy: -log softmax(logits)[label].
// Probabilities are clamped below at 1e-12 before the log; a clamped pixel
// contributes zero gradient (the clamp is part of the function).
inline Tensor cross_entropy_map(const Tensor& logits, const LabelField& labels,
                                Tape* tape = nullptr) {
  if (logits.ndim() != 4) fail(Errc::validation, "cross_entropy_map expects [N,C,H,W] logits, got " + shape_str(logits.shape()));
  const std::int64_t n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (labels.n != n || labels.h != h || labels.w != w) {
    fail(Errc::validation, "cross_entropy_map label raster [" + std::to_string(labels.n) + "," +
                               std::to_string(labels.h) + "," + std::to_string(labels.w) +
                               "] does not match logits " + shape_str(logits.shape()));
  }
  const std::int64_t plane = h * w;
  Tensor out({n, h, w});
  const bool rec = detail::want_grad(tape, {&logits});
  auto probs = rec ? std::make_shared<std::vector<double>>(logits.data().begin(), logits.data().end())
                   : nullptr;
  auto clamped = rec ? std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(n * plane), 0)
                     : nullptr;
  {
    const double* in = logits.data().data();
    double* op = out.data().data();
    for (std::int64_t ni = 0; ni < n; ++ni) {
      const double* ibase = in + ni * c * plane;
      double* pbase = rec ? probs->data() + ni * c * plane : nullptr;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t px = y * w + x;
          const std::int32_t lab = labels.at(ni, y, x);
          if (lab < 0 || lab >= c) {
            fail(Errc::validation, "label " + std::to_string(lab) + " out of range [0," +
                                       std::to_string(c) + ") at image " + std::to_string(ni) +
                                       ", pixel (" + std::to_string(y) + "," + std::to_string(x) +
                                       ")");
          }
          double m = ibase[px];
          for (std::int64_t ci = 1; ci < c; ++ci) m = std::max(m, ibase[ci * plane + px]);
          double z = 0.0;
          for (std::int64_t ci = 0; ci < c; ++ci) z += std::exp(ibase[ci * plane + px] - m);
          const double py = std::exp(ibase[lab * plane + px] - m) / z;
          if (rec) {
            const double inv = 1.0 / z;
            for (std::int64_t ci = 0; ci < c; ++ci)
              pbase[ci * plane + px] = std::exp(ibase[ci * plane + px] - m) * inv;
          }
          if (py < kProbFloor) {
            op[ni * plane + px] = -std::log(kProbFloor);
            if (rec) (*clamped)[static_cast<std::size_t>(ni * plane + px)] = 1;
          } else {
            op[ni * plane + px] = (m + std::log(z)) - ibase[lab * plane + px];
          }
        }
      }
    }
  }
  if (rec) {
    out.set_requires_grad(true);
    Tensor in_c = logits, out_c = out;
    LabelField lab_c = labels;
    tape->record([in_c, out_c, lab_c, probs, clamped, n, c, plane]() mutable {
      const double* g = out_c.grad().data();
      double* xg = in_c.grad().data();
      const double* p = probs->data();
      for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t px = 0; px < plane; ++px) {
          const std::int64_t oi = ni * plane + px;
          if ((*clamped)[static_cast<std::size_t>(oi)]) continue;
          const double go = g[oi];
          if (go == 0.0) continue;
          const std::int32_t lab = lab_c.data[static_cast<std::size_t>(oi)];
          const std::int64_t base = ni * c * plane + px;
          for (std::int64_t ci = 0; ci < c; ++ci) {
            const double onehot = ci == lab ? 1.0 : 0.0;
            xg[base + ci * plane] += go * (p[base + ci * plane] - onehot);
          }
        }
      }
    });
  }
  return out;
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  if (a.shape() != b.shape()) {
    fail(Errc::validation, "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const std::span<const double> ad = a.data(), bd = b.data();
  std::span<double> od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor a_c = a, b_c = b, out_c = out;
    tape->record([a_c, b_c, out_c]() mutable {
      const std::span<const double> g = out_c.grad();
      if (a_c.requires_grad()) {
        std::span<double> ag = a_c.grad();
        const std::span<const double> bd = b_c.data();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bd[i];
      }
      if (b_c.requires_grad()) {
        std::span<double> bg = b_c.grad();
        const std::span<const double> ad = a_c.data();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * ad[i];
      }
    });
  }
  return out;
}

// Full reduction to a scalar.
inline Tensor sum(const Tensor& a, Tape* tape = nullptr) {
  Tensor out({1});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out.data()[0] = acc;
  if (detail::want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor a_c = a, out_c = out;
    tape->record([a_c, out_c]() mutable {
      const double g = out_c.grad()[0];
      std::span<double> ag = a_c.grad();
      for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += g;
    });
  }
  return out;
}

// sum(weights ∘ x) / divisor, with constant weights. This is the reduction
// behind every per-pixel weighting scheme; its adjoint w.r.t. x is
// weights/divisor per element.
inline Tensor weighted_mean(const Tensor& x, const Tensor& weights, double divisor,
                            Tape* tape = nullptr) {
  if (x.shape() != weights.shape()) {
    fail(Errc::validation, "weighted_mean shape mismatch: " + shape_str(x.shape()) + " vs " +
                               shape_str(weights.shape()));
  }
  if (!(divisor > 0.0)) fail(Errc::validation, "weighted_mean divisor must be positive");
  Tensor out({1});
  {
    const std::span<const double> xd = x.data(), wd = weights.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < xd.size(); ++i) acc += xd[i] * wd[i];
    out.data()[0] = acc / divisor;
  }
  if (detail::want_grad(tape, {&x, &weights})) {
    out.set_requires_grad(true);
    Tensor x_c = x, w_c = weights, out_c = out;
    tape->record([x_c, w_c, out_c, divisor]() mutable {
      const double g = out_c.grad()[0] / divisor;
      if (x_c.requires_grad()) {
        std::span<double> xg = x_c.grad();
        const std::span<const double> wd = w_c.data();
        for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g * wd[i];
      }
      if (w_c.requires_grad()) {
        std::span<double> wg = w_c.grad();
        const std::span<const double> xd = x_c.data();
        for (std::size_t i = 0; i < wg.size(); ++i) wg[i] += g * xd[i];
      }
    });
  }
  return out;
}

}  // namespace trm
