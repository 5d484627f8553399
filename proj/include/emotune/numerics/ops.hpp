#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "emotune/numerics/graph.hpp"

namespace emotune {
namespace detail {

inline void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + " must be rank 2, got " + to_string(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("operand shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Numerically stable log(1 + exp(z)).
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

// y[n, :] += x[n, :] * w  (x: n×k, w: k×m)
inline void gemm_acc(const double* x, const double* w, double* y, std::size_t n, std::size_t k,
                     std::size_t m) {
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x + r * k;
    double* yr = y + r * m;
    for (std::size_t i = 0; i < k; ++i) {
      const double xv = xr[i];
      if (xv == 0.0) continue;
      const double* wi = w + i * m;
      for (std::size_t j = 0; j < m; ++j) yr[j] += xv * wi[j];
    }
  }
}

}  // namespace detail

namespace prim {

/// x·W (+ b). x: [N, in], W: [in, out], b: [out].
class Affine final : public Primitive {
 public:
  explicit Affine(bool has_bias) : has_bias_(has_bias) {}
  std::string_view name() const override { return has_bias_ ? "affine" : "matmul"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    detail::require_rank2(x, "affine input");
    detail::require_rank2(w, "affine weight");
    if (x.shape()[1] != w.shape()[0]) {
      throw ShapeError("input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
    }
    const std::size_t n = x.shape()[0], k = x.shape()[1], m = w.shape()[1];
    Tensor y({n, m});
    if (has_bias_) {
      const Tensor& b = *in[2];
      if (b.rank() != 1 || b.shape()[0] != m) {
        throw ShapeError("bias " + to_string(b.shape()) + " incompatible with weight " + to_string(w.shape()));
      }
      for (std::size_t r = 0; r < n; ++r) std::copy(b.data().begin(), b.data().end(), y.row_span(r).begin());
    }
    detail::gemm_acc(x.data().data(), w.data().data(), y.data().data(), n, k, m);
    return y;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const std::size_t n = x.shape()[0], k = x.shape()[1], m = w.shape()[1];
    if (Tensor* gx = grads[0]) {
      for (std::size_t r = 0; r < n; ++r) {
        const double* gr = g.data().data() + r * m;
        double* gxr = gx->data().data() + r * k;
        for (std::size_t i = 0; i < k; ++i) {
          const double* wi = w.data().data() + i * m;
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += gr[j] * wi[j];
          gxr[i] += s;
        }
      }
    }
    if (Tensor* gw = grads[1]) {
      for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x.data().data() + r * k;
        const double* gr = g.data().data() + r * m;
        for (std::size_t i = 0; i < k; ++i) {
          const double xv = xr[i];
          if (xv == 0.0) continue;
          double* gwi = gw->data().data() + i * m;
          for (std::size_t j = 0; j < m; ++j) gwi[j] += xv * gr[j];
        }
      }
    }
    if (has_bias_) {
      if (Tensor* gb = grads[2]) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < m; ++j) (*gb)[j] += g.at(r, j);
      }
    }
  }

 private:
  bool has_bias_;
};

/// Row lookup into an embedding table. table: [V, d] -> [ids.size(), d].
class Embedding final : public Primitive {
 public:
  explicit Embedding(std::vector<int> ids) : ids_(std::move(ids)) {}
  std::string_view name() const override { return "embedding"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& table = *in[0];
    detail::require_rank2(table, "embedding table");
    if (ids_.empty()) throw ShapeError("embedding lookup of an empty id list");
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    Tensor y({ids_.size(), d});
    for (std::size_t r = 0; r < ids_.size(); ++r) {
      if (ids_[r] < 0 || static_cast<std::size_t>(ids_[r]) >= v) {
        throw ShapeError("token id " + std::to_string(ids_[r]) + " outside table " + to_string(table.shape()));
      }
      auto src = table.row_span(static_cast<std::size_t>(ids_[r]));
      std::copy(src.begin(), src.end(), y.row_span(r).begin());
    }
    return y;
  }

  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor* gt = grads[0];
    if (!gt) return;
    for (std::size_t r = 0; r < ids_.size(); ++r) {
      auto dst = gt->row_span(static_cast<std::size_t>(ids_[r]));
      auto src = g.row_span(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }

 private:
  std::vector<int> ids_;
};

/// Selects rows of a rank-2 tensor by index (repeats allowed).
class GatherRows final : public Primitive {
 public:
  explicit GatherRows(std::vector<std::size_t> rows) : rows_(std::move(rows)) {}
  std::string_view name() const override { return "gather_rows"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    detail::require_rank2(x, "gather input");
    if (rows_.empty()) throw ShapeError("gather of zero rows");
    Tensor y({rows_.size(), x.shape()[1]});
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      if (rows_[r] >= x.shape()[0]) {
        throw ShapeError("row " + std::to_string(rows_[r]) + " outside " + to_string(x.shape()));
      }
      auto src = x.row_span(rows_[r]);
      std::copy(src.begin(), src.end(), y.row_span(r).begin());
    }
    return y;
  }

  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor* gx = grads[0];
    if (!gx) return;
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      auto dst = gx->row_span(rows_[r]);
      auto src = g.row_span(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }

 private:
  std::vector<std::size_t> rows_;
};

/// Per-row normalization with learned gain and shift.
class LayerNorm final : public Primitive {
 public:
  explicit LayerNorm(double eps = 1e-5) : eps_(eps) {}
  std::string_view name() const override { return "layer_norm"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    detail::require_rank2(x, "layer_norm input");
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    check_param(*in[1], d, "gain");
    check_param(*in[2], d, "shift");
    Tensor y({n, d});
    for (std::size_t r = 0; r < n; ++r) {
      auto xr = x.row_span(r);
      auto [mu, inv] = moments(xr);
      auto yr = y.row_span(r);
      for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * inv * (*in[1])[j] + (*in[2])[j];
    }
    return y;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor& x = *in[0];
    const Tensor& gain = *in[1];
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    std::vector<double> xhat(d), dxhat(d);
    for (std::size_t r = 0; r < n; ++r) {
      auto xr = x.row_span(r);
      auto gr = g.row_span(r);
      auto [mu, inv] = moments(xr);
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (xr[j] - mu) * inv;
        dxhat[j] = gr[j] * gain[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      if (Tensor* gx = grads[0]) {
        auto gxr = gx->row_span(r);
        for (std::size_t j = 0; j < d; ++j) gxr[j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
      }
      if (Tensor* gg = grads[1]) {
        for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * xhat[j];
      }
      if (Tensor* gb = grads[2]) {
        for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gr[j];
      }
    }
  }

 private:
  static void check_param(const Tensor& p, std::size_t d, const char* what) {
    if (p.rank() != 1 || p.shape()[0] != d) {
      throw ShapeError(std::string("layer_norm ") + what + " " + to_string(p.shape()) + " for width " +
                       std::to_string(d));
    }
  }

  std::pair<double, double> moments(std::span<const double> xr) const {
    const double d = static_cast<double>(xr.size());
    double mu = 0.0;
    for (double v : xr) mu += v;
    mu /= d;
    double var = 0.0;
    for (double v : xr) var += (v - mu) * (v - mu);
    var /= d;
    return {mu, 1.0 / std::sqrt(var + eps_)};
  }

  double eps_;
};

/// Row-wise softmax with max subtraction.
class Softmax final : public Primitive {
 public:
  std::string_view name() const override { return "softmax"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    Tensor y(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto xr = x.row_span(r);
      auto yr = y.row_span(r);
      const double mx = *std::max_element(xr.begin(), xr.end());
      double s = 0.0;
      for (std::size_t j = 0; j < xr.size(); ++j) s += (yr[j] = std::exp(xr[j] - mx));
      for (double& v : yr) v /= s;
    }
    return y;
  }

  void backward(std::span<const Tensor* const>, const Tensor& y, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor* gx = grads[0];
    if (!gx) return;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row_span(r);
      auto gr = g.row_span(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
      auto gxr = gx->row_span(r);
      for (std::size_t j = 0; j < yr.size(); ++j) gxr[j] += yr[j] * (gr[j] - dot);
    }
  }
};

/// Shared shape for elementwise unary maps.
template <typename Fn, typename Deriv>
class Unary final : public Primitive {
 public:
  Unary(const char* name, Fn fn, Deriv deriv) : name_(name), fn_(fn), deriv_(deriv) {}
  std::string_view name() const override { return name_; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fn_(x[i]);
    return y;
  }

  void backward(std::span<const Tensor* const> in, const Tensor& y, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor* gx = grads[0];
    if (!gx) return;
    const Tensor& x = *in[0];
    for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += g[i] * deriv_(x[i], y[i]);
  }

 private:
  const char* name_;
  Fn fn_;
  Deriv deriv_;
};

template <typename Fn, typename Deriv>
std::shared_ptr<const Primitive> make_unary(const char* name, Fn fn, Deriv deriv) {
  return std::make_shared<Unary<Fn, Deriv>>(name, fn, deriv);
}

/// Parametric ReLU with a single learned negative slope.
class PRelu final : public Primitive {
 public:
  std::string_view name() const override { return "prelu"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    const Tensor& a = *in[1];
    if (!a.is_scalar()) throw ShapeError("prelu slope must be scalar, got " + to_string(a.shape()));
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : a[0] * x[i];
    return y;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor& x = *in[0];
    const double a = (*in[1])[0];
    if (Tensor* gx = grads[0]) {
      for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += g[i] * (x[i] > 0 ? 1.0 : a);
    }
    if (Tensor* ga = grads[1]) {
      double s = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0)) s += g[i] * x[i];
      }
      (*ga)[0] += s;
    }
  }
};

/// Multiplication by a fixed mask; the mask is drawn once at construction.
class Dropout final : public Primitive {
 public:
  Dropout(std::size_t size, double rate, std::uint64_t seed) : mask_(size) {
    Rng rng(seed);
    const double keep = 1.0 / (1.0 - rate);
    for (double& m : mask_) m = rng.uniform() < rate ? 0.0 : keep;
  }
  std::string_view name() const override { return "dropout"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    if (x.size() != mask_.size()) {
      throw ShapeError("dropout mask of " + std::to_string(mask_.size()) + " entries applied to " +
                       to_string(x.shape()));
    }
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask_[i];
    return y;
  }

  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (Tensor* gx = grads[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * mask_[i];
    }
  }

  const std::vector<double>& mask() const noexcept { return mask_; }

 private:
  std::vector<double> mask_;
};

class Add final : public Primitive {
 public:
  std::string_view name() const override { return "add"; }
  Tensor forward(std::span<const Tensor* const> in) const override {
    detail::require_same(*in[0], *in[1]);
    Tensor y = *in[0];
    y += *in[1];
    return y;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    for (Tensor* gi : grads)
      if (gi) *gi += g;
  }
};

class Mul final : public Primitive {
 public:
  std::string_view name() const override { return "mul"; }
  Tensor forward(std::span<const Tensor* const> in) const override {
    detail::require_same(*in[0], *in[1]);
    Tensor y(in[0]->shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = (*in[0])[i] * (*in[1])[i];
    return y;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (Tensor* ga = grads[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (*in[1])[i];
    if (Tensor* gb = grads[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * (*in[0])[i];
  }
};

class Scale final : public Primitive {
 public:
  explicit Scale(double factor) : factor_(factor) {}
  std::string_view name() const override { return "scale"; }
  Tensor forward(std::span<const Tensor* const> in) const override {
    Tensor y = *in[0];
    for (double& v : y.data()) v *= factor_;
    return y;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (Tensor* gx = grads[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += factor_ * g[i];
  }

 private:
  double factor_;
};

class Sum final : public Primitive {
 public:
  std::string_view name() const override { return "sum"; }
  Tensor forward(std::span<const Tensor* const> in) const override {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    return Tensor::scalar(s);
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (Tensor* gx = grads[0])
      for (double& v : gx->data()) v += g[0];
  }
};

/// Concatenation of rank-2 tensors along rows (axis 0) or columns (axis 1).
class Concat final : public Primitive {
 public:
  explicit Concat(int axis) : axis_(axis) {}
  std::string_view name() const override { return "concat"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    if (in.empty()) throw ShapeError("concat of nothing");
    for (const Tensor* t : in) detail::require_rank2(*t, "concat operand");
    const std::size_t keep = axis_ == 0 ? 1 : 0;
    std::size_t total = 0;
    for (const Tensor* t : in) {
      if (t->shape()[keep] != in[0]->shape()[keep]) {
        throw ShapeError("concat operands " + to_string(in[0]->shape()) + " and " + to_string(t->shape()));
      }
      total += t->shape()[axis_];
    }
    if (axis_ == 0) {
      Tensor y({total, in[0]->shape()[1]});
      auto out = y.data().begin();
      for (const Tensor* t : in) out = std::copy(t->data().begin(), t->data().end(), out);
      return y;
    }
    const std::size_t n = in[0]->shape()[0];
    Tensor y({n, total});
    for (std::size_t r = 0; r < n; ++r) {
      auto out = y.row_span(r).begin();
      for (const Tensor* t : in) {
        auto src = t->row_span(r);
        out = std::copy(src.begin(), src.end(), out);
      }
    }
    return y;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (axis_ == 0) {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (Tensor* gi = grads[i])
          for (std::size_t j = 0; j < gi->size(); ++j) (*gi)[j] += g[offset + j];
        offset += in[i]->size();
      }
      return;
    }
    const std::size_t n = g.shape()[0];
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t col = 0;
      auto gr = g.row_span(r);
      for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t w = in[i]->shape()[1];
        if (Tensor* gi = grads[i]) {
          auto dst = gi->row_span(r);
          for (std::size_t j = 0; j < w; ++j) dst[j] += gr[col + j];
        }
        col += w;
      }
    }
  }

 private:
  int axis_;
};

class SliceCols final : public Primitive {
 public:
  SliceCols(std::size_t begin, std::size_t end) : begin_(begin), end_(end) {}
  std::string_view name() const override { return "slice_cols"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    detail::require_rank2(x, "slice input");
    if (!(begin_ < end_ && end_ <= x.shape()[1])) {
      throw ShapeError("columns [" + std::to_string(begin_) + ", " + std::to_string(end_) + ") of " +
                       to_string(x.shape()));
    }
    Tensor y({x.shape()[0], end_ - begin_});
    for (std::size_t r = 0; r < x.shape()[0]; ++r) {
      auto src = x.row_span(r);
      std::copy(src.begin() + begin_, src.begin() + end_, y.row_span(r).begin());
    }
    return y;
  }

  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor* gx = grads[0];
    if (!gx) return;
    for (std::size_t r = 0; r < g.shape()[0]; ++r) {
      auto dst = gx->row_span(r);
      auto src = g.row_span(r);
      for (std::size_t j = 0; j < src.size(); ++j) dst[begin_ + j] += src[j];
    }
  }

 private:
  std::size_t begin_, end_;
};

/// A run of consecutive rows forming one sequence.
struct Segment {
  std::size_t offset;
  std::size_t length;
};

/// Multi-head scaled dot-product attention, causal within each segment.
/// q, k, v: [N, d] with rows packed segment after segment.
class CausalAttention final : public Primitive {
 public:
  CausalAttention(std::size_t heads, std::vector<Segment> segments)
      : heads_(heads), segments_(std::move(segments)) {}
  std::string_view name() const override { return "causal_attention"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor &q = *in[0], &k = *in[1], &v = *in[2];
    detail::require_rank2(q, "attention query");
    detail::require_same(q, k);
    detail::require_same(q, v);
    const std::size_t n = q.shape()[0], d = q.shape()[1];
    if (heads_ == 0 || d % heads_ != 0) {
      throw ShapeError("width " + std::to_string(d) + " not divisible into " + std::to_string(heads_) + " heads");
    }
    std::size_t covered = 0;
    for (const auto& s : segments_) covered = std::max(covered, s.offset + s.length);
    if (covered > n) throw ShapeError("segments cover " + std::to_string(covered) + " rows of " + to_string(q.shape()));
    Tensor y({n, d});
    const std::size_t dh = d / heads_;
    std::vector<double> p;
    for (const auto& seg : segments_) {
      for (std::size_t h = 0; h < heads_; ++h) {
        for (std::size_t i = 0; i < seg.length; ++i) {
          probs(q, k, seg, h, dh, i, p);
          double* yr = y.data().data() + (seg.offset + i) * d + h * dh;
          for (std::size_t j = 0; j <= i; ++j) {
            const double* vr = v.data().data() + (seg.offset + j) * d + h * dh;
            for (std::size_t c = 0; c < dh; ++c) yr[c] += p[j] * vr[c];
          }
        }
      }
    }
    return y;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor &q = *in[0], &k = *in[1], &v = *in[2];
    const std::size_t d = q.shape()[1];
    const std::size_t dh = d / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> p, dp;
    for (const auto& seg : segments_) {
      for (std::size_t h = 0; h < heads_; ++h) {
        for (std::size_t i = 0; i < seg.length; ++i) {
          probs(q, k, seg, h, dh, i, p);
          const double* gr = g.data().data() + (seg.offset + i) * d + h * dh;
          dp.assign(i + 1, 0.0);
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const double* vr = v.data().data() + (seg.offset + j) * d + h * dh;
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += gr[c] * vr[c];
            dp[j] = s;
            dot += s * p[j];
            if (Tensor* gv = grads[2]) {
              double* gvr = gv->data().data() + (seg.offset + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gvr[c] += p[j] * gr[c];
            }
          }
          const double* qr = q.data().data() + (seg.offset + i) * d + h * dh;
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = p[j] * (dp[j] - dot) * scale;
            if (ds == 0.0) continue;
            const double* kr = k.data().data() + (seg.offset + j) * d + h * dh;
            if (Tensor* gq = grads[0]) {
              double* gqr = gq->data().data() + (seg.offset + i) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gqr[c] += ds * kr[c];
            }
            if (Tensor* gk = grads[1]) {
              double* gkr = gk->data().data() + (seg.offset + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gkr[c] += ds * qr[c];
            }
          }
        }
      }
    }
  }

 private:
  void probs(const Tensor& q, const Tensor& k, const Segment& seg, std::size_t h, std::size_t dh,
             std::size_t i, std::vector<double>& p) const {
    const std::size_t d = q.shape()[1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double* qr = q.data().data() + (seg.offset + i) * d + h * dh;
    p.assign(i + 1, 0.0);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) {
      const double* kr = k.data().data() + (seg.offset + j) * d + h * dh;
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    double z = 0.0;
    for (double& x : p) z += (x = std::exp(x - mx));
    for (double& x : p) x /= z;
  }

  std::size_t heads_;
  std::vector<Segment> segments_;
};

/// Mean next-token cross entropy. Targets of -1 are ignored.
class SoftmaxCrossEntropy final : public Primitive {
 public:
  explicit SoftmaxCrossEntropy(std::vector<int> targets) : targets_(std::move(targets)) {
    for (int t : targets_) count_ += t >= 0;
  }
  std::string_view name() const override { return "softmax_cross_entropy"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& z = *in[0];
    detail::require_rank2(z, "logits");
    if (z.shape()[0] != targets_.size()) {
      throw ShapeError("logits " + to_string(z.shape()) + " for " + std::to_string(targets_.size()) + " targets");
    }
    double total = 0.0;
    for (std::size_t r = 0; r < targets_.size(); ++r) {
      if (targets_[r] < 0) continue;
      if (static_cast<std::size_t>(targets_[r]) >= z.shape()[1]) {
        throw ShapeError("target " + std::to_string(targets_[r]) + " outside logits " + to_string(z.shape()));
      }
      auto zr = z.row_span(r);
      total += log_sum_exp(zr) - zr[static_cast<std::size_t>(targets_[r])];
    }
    return Tensor::scalar(count_ ? total / static_cast<double>(count_) : 0.0);
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor* gz = grads[0];
    if (!gz || count_ == 0) return;
    const Tensor& z = *in[0];
    const double w = g[0] / static_cast<double>(count_);
    for (std::size_t r = 0; r < targets_.size(); ++r) {
      if (targets_[r] < 0) continue;
      auto zr = z.row_span(r);
      const double lse = log_sum_exp(zr);
      auto gr = gz->row_span(r);
      for (std::size_t j = 0; j < zr.size(); ++j) gr[j] += w * std::exp(zr[j] - lse);
      gr[static_cast<std::size_t>(targets_[r])] -= w;
    }
  }

  std::size_t count() const noexcept { return count_; }

  static double log_sum_exp(std::span<const double> z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    return mx + std::log(s);
  }

 private:
  std::vector<int> targets_;
  std::size_t count_ = 0;
};

/// Mean sigmoid binary cross entropy over every entry, computed from logits.
class SigmoidBinaryCrossEntropy final : public Primitive {
 public:
  explicit SigmoidBinaryCrossEntropy(Tensor labels) : labels_(std::move(labels)) {}
  std::string_view name() const override { return "sigmoid_bce"; }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& z = *in[0];
    if (z.shape() != labels_.shape()) {
      throw ShapeError("logits " + to_string(z.shape()) + " vs labels " + to_string(labels_.shape()));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) total += detail::softplus(z[i]) - labels_[i] * z[i];
    return Tensor::scalar(total / static_cast<double>(z.size()));
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor* gz = grads[0];
    if (!gz) return;
    const Tensor& z = *in[0];
    const double w = g[0] / static_cast<double>(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) (*gz)[i] += w * (detail::sigmoid(z[i]) - labels_[i]);
  }

 private:
  Tensor labels_;
};

}  // namespace prim

/// Graph-building front end: each function appends one primitive.
namespace ops {

inline NodeId affine(Graph& g, NodeId x, NodeId w, NodeId b) {
  return g.apply(std::make_shared<prim::Affine>(true), {x, w, b});
}
inline NodeId matmul(Graph& g, NodeId x, NodeId w) {
  return g.apply(std::make_shared<prim::Affine>(false), {x, w});
}
inline NodeId embedding(Graph& g, NodeId table, std::vector<int> ids) {
  return g.apply(std::make_shared<prim::Embedding>(std::move(ids)), {table});
}
inline NodeId gather_rows(Graph& g, NodeId x, std::vector<std::size_t> rows) {
  return g.apply(std::make_shared<prim::GatherRows>(std::move(rows)), {x});
}
inline NodeId layer_norm(Graph& g, NodeId x, NodeId gain, NodeId shift) {
  return g.apply(std::make_shared<prim::LayerNorm>(), {x, gain, shift});
}
inline NodeId softmax(Graph& g, NodeId x) { return g.apply(std::make_shared<prim::Softmax>(), {x}); }

inline NodeId sigmoid(Graph& g, NodeId x) {
  static const auto op = prim::make_unary(
      "sigmoid", [](double z) { return detail::sigmoid(z); },
      [](double, double y) { return y * (1.0 - y); });
  return g.apply(op, {x});
}
inline NodeId tanh(Graph& g, NodeId x) {
  static const auto op = prim::make_unary(
      "tanh", [](double z) { return std::tanh(z); }, [](double, double y) { return 1.0 - y * y; });
  return g.apply(op, {x});
}
/// Exact (erf-based) GELU.
inline NodeId gelu(Graph& g, NodeId x) {
  static const auto op = prim::make_unary(
      "gelu", [](double z) { return 0.5 * z * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0)); },
      [](double z, double) {
        const double cdf = 0.5 * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + z * pdf;
      });
  return g.apply(op, {x});
}
inline NodeId prelu(Graph& g, NodeId x, NodeId slope) { return g.apply(std::make_shared<prim::PRelu>(), {x, slope}); }

/// Inverted dropout. Identity when the graph is not training or rate is 0.
inline NodeId dropout(Graph& g, NodeId x, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (!g.training() || rate == 0.0) return x;
  return g.apply(std::make_shared<prim::Dropout>(g.value(x).size(), rate, g.next_stream_seed()), {x});
}

inline NodeId add(Graph& g, NodeId a, NodeId b) { return g.apply(std::make_shared<prim::Add>(), {a, b}); }
inline NodeId mul(Graph& g, NodeId a, NodeId b) { return g.apply(std::make_shared<prim::Mul>(), {a, b}); }
inline NodeId scale(Graph& g, NodeId x, double factor) { return g.apply(std::make_shared<prim::Scale>(factor), {x}); }
inline NodeId sum(Graph& g, NodeId x) { return g.apply(std::make_shared<prim::Sum>(), {x}); }
inline NodeId concat(Graph& g, std::vector<NodeId> xs, int axis) {
  return g.apply(std::make_shared<prim::Concat>(axis), std::move(xs));
}
inline NodeId slice_cols(Graph& g, NodeId x, std::size_t begin, std::size_t end) {
  return g.apply(std::make_shared<prim::SliceCols>(begin, end), {x});
}
inline NodeId causal_attention(Graph& g, NodeId q, NodeId k, NodeId v, std::size_t heads,
                               std::vector<prim::Segment> segments) {
  return g.apply(std::make_shared<prim::CausalAttention>(heads, std::move(segments)), {q, k, v});
}
inline NodeId softmax_cross_entropy(Graph& g, NodeId logits, std::vector<int> targets) {
  return g.apply(std::make_shared<prim::SoftmaxCrossEntropy>(std::move(targets)), {logits});
}
inline NodeId sigmoid_bce(Graph& g, NodeId logits, Tensor labels) {
  return g.apply(std::make_shared<prim::SigmoidBinaryCrossEntropy>(std::move(labels)), {logits});
}

}  // namespace ops

/// Row-wise log-softmax outside the graph (inference only).
inline Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto zr = logits.row_span(r);
    const double lse = prim::SoftmaxCrossEntropy::log_sum_exp(zr);
    auto o = out.row_span(r);
    for (std::size_t j = 0; j < zr.size(); ++j) o[j] = zr[j] - lse;
  }
  return out;
}

}  // namespace emotune
