#include "ctxreg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ctxreg::ops {
namespace {

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// Number of times `b` repeats inside `a` under leading-dimension broadcast.
std::size_t broadcast_outer(std::string_view op, const Shape& a, const Shape& b) {
  if (b.size() > a.size() || !std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    shape_fail(op, a, b);
  }
  return shape_numel(a) / std::max<std::size_t>(shape_numel(b), 1);
}

void record(std::string_view op, const Tensor& out, std::function<void()> fn) {
  if (out.requires_grad()) ComputationRecord::current().push(op, std::move(fn));
}

bool needs(const ImplPtr& p) { return p->requires_grad; }

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    const Real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * n;
    Real* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real* brow = b + p * n;
      Real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    const Real* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      Real* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = make_output(x.shape(), {&x});
  const Real* xp = x.ptr();
  Real* op_ = out.ptr();
  for (std::size_t i = 0; i < x.numel(); ++i) op_[i] = fwd(xp[i]);
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record(op, out, [xi, oi, deriv] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* gx = xi->grad_buffer();
    for (std::size_t i = 0; i < oi->data.size(); ++i) gx[i] += oi->grad[i] * deriv(xi->data[i], oi->data[i]);
  });
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb) shape_fail("matmul", a.shape(), b.shape());
  const bool broadcast_rhs = b.rank() == 2;
  if (!broadcast_rhs) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      shape_fail("matmul", a.shape(), b.shape());
    }
  }
  const std::size_t batch = a.numel() / (m * k == 0 ? 1 : m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out = make_output(out_shape, {&a, &b});
  if (broadcast_rhs) {
    gemm_nn(batch * m, k, n, a.ptr(), b.ptr(), out.ptr());
  } else {
    for (std::size_t s = 0; s < batch; ++s) {
      gemm_nn(m, k, n, a.ptr() + s * m * k, b.ptr() + s * k * n, out.ptr() + s * m * n);
    }
  }
  ImplPtr ai = a.shared_impl(), bi = b.shared_impl(), oi = out.shared_impl();
  record("matmul", out, [ai, bi, oi, m, k, n, batch, broadcast_rhs] {
    if (oi->grad.empty()) return;
    const Real* go = oi->grad.data();
    if (broadcast_rhs) {
      if (needs(ai)) gemm_nt(batch * m, n, k, go, bi->data.data(), ai->grad_buffer());
      if (needs(bi)) gemm_tn(batch * m, k, n, ai->data.data(), go, bi->grad_buffer());
      return;
    }
    for (std::size_t s = 0; s < batch; ++s) {
      if (needs(ai)) gemm_nt(m, n, k, go + s * m * n, bi->data.data() + s * k * n, ai->grad_buffer() + s * m * k);
      if (needs(bi)) gemm_tn(m, k, n, ai->data.data() + s * m * k, go + s * m * n, bi->grad_buffer() + s * k * n);
    }
  });
  return out;
}

namespace {
template <typename Fwd, typename GradA, typename GradB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, Fwd fwd, GradA ga, GradB gb) {
  const std::size_t outer = broadcast_outer(op, a.shape(), b.shape());
  const std::size_t inner = b.numel();
  Tensor out = make_output(a.shape(), {&a, &b});
  const Real* ap = a.ptr();
  const Real* bp = b.ptr();
  Real* o = out.ptr();
  for (std::size_t s = 0; s < outer; ++s) {
    for (std::size_t i = 0; i < inner; ++i) o[s * inner + i] = fwd(ap[s * inner + i], bp[i]);
  }
  ImplPtr ai = a.shared_impl(), bi = b.shared_impl(), oi = out.shared_impl();
  record(op, out, [ai, bi, oi, outer, inner, ga, gb] {
    if (oi->grad.empty()) return;
    const Real* g = oi->grad.data();
    Real* gA = needs(ai) ? ai->grad_buffer() : nullptr;
    Real* gB = needs(bi) ? bi->grad_buffer() : nullptr;
    for (std::size_t s = 0; s < outer; ++s) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = s * inner + i;
        if (gA) gA[idx] += ga(g[idx], ai->data[idx], bi->data[i]);
        if (gB) gB[i] += gb(g[idx], ai->data[idx], bi->data[i]);
      }
    }
  });
  return out;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real g, Real, Real) { return g; },
      [](Real g, Real, Real) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real g, Real, Real) { return g; },
      [](Real g, Real, Real) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real g, Real, Real y) { return g * y; },
      [](Real g, Real x, Real) { return g * x; });
}

Tensor scale(const Tensor& x, Real factor, Real shift) {
  return unary(
      "scale", x, [factor, shift](Real v) { return factor * v + shift; },
      [factor](Real, Real) { return factor; });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat_last: scalar input");
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin(), first.end() - 1, p.shape().begin())) {
      shape_fail("concat_last", first, p.shape());
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  Shape out_shape = first;
  out_shape.back() = total;
  const std::size_t rows = shape_numel(first) / std::max<std::size_t>(first.back(), 1);
  auto& rec = ComputationRecord::current();
  bool track = false;
  if (rec.enabled()) {
    for (const Tensor& p : parts) track = track || p.requires_grad();
  }
  Tensor out = Tensor::zeros(out_shape, track);
  if (track) out.impl()->record_generation = rec.generation();
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Real* src = parts[pi].ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src + r * widths[pi], widths[pi], out.ptr() + r * total + offset);
    }
    offset += widths[pi];
  }
  std::vector<ImplPtr> ins;
  for (const Tensor& p : parts) ins.push_back(p.shared_impl());
  ImplPtr oi = out.shared_impl();
  record("concat_last", out, [ins, oi, widths, rows, total] {
    if (oi->grad.empty()) return;
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < ins.size(); ++pi) {
      if (needs(ins[pi])) {
        Real* g = ins[pi]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[pi]; ++j) g[r * widths[pi] + j] += oi->grad[r * total + off + j];
        }
      }
      off += widths[pi];
    }
  });
  return out;
}

std::vector<Tensor> split_last(const Tensor& x, std::size_t pieces) {
  if (x.rank() == 0 || pieces == 0 || x.shape().back() % pieces != 0) {
    throw ShapeError("split_last: cannot split " + shape_str(x.shape()) + " into " + std::to_string(pieces));
  }
  const std::size_t width = x.shape().back();
  const std::size_t piece = width / pieces;
  const std::size_t rows = x.numel() / width;
  Shape ps = x.shape();
  ps.back() = piece;
  std::vector<Tensor> outs;
  ImplPtr xi = x.shared_impl();
  for (std::size_t p = 0; p < pieces; ++p) {
    Tensor out = make_output(ps, {&x});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.ptr() + r * width + p * piece, piece, out.ptr() + r * piece);
    ImplPtr oi = out.shared_impl();
    record("split_last", out, [xi, oi, rows, width, piece, p] {
      if (oi->grad.empty() || !needs(xi)) return;
      Real* g = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < piece; ++j) g[r * width + p * piece + j] += oi->grad[r * piece + j];
      }
    });
    outs.push_back(std::move(out));
  }
  return outs;
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2 for " + shape_str(x.shape()));
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  const std::size_t batch = x.numel() / std::max<std::size_t>(r * c, 1);
  Shape s = x.shape();
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor out = make_output(s, {&x});
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* src = x.ptr() + b * r * c;
    Real* dst = out.ptr() + b * r * c;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
    }
  }
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("transpose_last2", out, [xi, oi, r, c, batch] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += oi->grad[b * r * c + j * r + i];
      }
    }
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  Tensor out = make_output(std::move(shape), {&x});
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("reshape", out, [xi, oi] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i];
  });
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / std::max<std::size_t>(n, 1);
  Tensor out = make_output(x.shape(), {&x});
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.ptr() + r * n;
    Real* o = out.ptr() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("softmax", out, [xi, oi, n, rows] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = oi->data.data() + r * n;
      const Real* gy = oi->grad.data() + r * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
    }
  });
  return out;
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / std::max<std::size_t>(n, 1);
  Tensor out = make_output(x.shape(), {&x});
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.ptr() + r * n;
    Real* o = out.ptr() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("log_softmax", out, [xi, oi, n, rows] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = oi->data.data() + r * n;
      const Real* gy = oi->grad.data() + r * n;
      Real total = 0;
      for (std::size_t j = 0; j < n; ++j) total += gy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  if (x.rank() == 0 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.shape().back() ||
      bias.dim(0) != x.shape().back()) {
    shape_fail("layer_norm", x.shape(), gain.shape());
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out = make_output(x.shape(), {&x, &gain, &bias});
  std::vector<Real> xhat(x.numel());
  std::vector<Real> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.ptr() + r * n;
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= Real(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= Real(n);
    rstd[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mu) * rstd[r];
      out.ptr()[r * n + j] = xhat[r * n + j] * gain.ptr()[j] + bias.ptr()[j];
    }
  }
  ImplPtr xi = x.shared_impl(), gi = gain.shared_impl(), bi = bias.shared_impl(), oi = out.shared_impl();
  record("layer_norm", out, [xi, gi, bi, oi, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)] {
    if (oi->grad.empty()) return;
    Real* gx = needs(xi) ? xi->grad_buffer() : nullptr;
    Real* gg = needs(gi) ? gi->grad_buffer() : nullptr;
    Real* gb = needs(bi) ? bi->grad_buffer() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* gy = oi->grad.data() + r * n;
      const Real* xh = xhat.data() + r * n;
      Real mean_d = 0, mean_dx = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const Real d = gy[j] * gi->data[j];
        mean_d += d;
        mean_dx += d * xh[j];
        if (gg) gg[j] += gy[j] * xh[j];
        if (gb) gb[j] += gy[j];
      }
      mean_d /= Real(n);
      mean_dx /= Real(n);
      if (gx) {
        for (std::size_t j = 0; j < n; ++j) {
          gx[r * n + j] += rstd[r] * (gy[j] * gi->data[j] - mean_d - xh[j] * mean_dx);
        }
      }
    }
  });
  return out;
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor dropout(const Tensor& x, Real rate, bool training, std::mt19937_64& rng) {
  if (!training || rate <= Real(0)) return x;
  if (rate >= Real(1)) throw TensorError("dropout: rate must be < 1");
  std::vector<Real> keep(x.numel());
  const Real kept_scale = Real(1) / (Real(1) - rate);
  // 53-bit uniform in [0, 1) built directly from the engine output.
  for (Real& k : keep) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    k = u >= static_cast<double>(rate) ? kept_scale : Real(0);
  }
  Tensor out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < x.numel(); ++i) out.ptr()[i] = x.ptr()[i] * keep[i];
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("dropout", out, [xi, oi, keep = std::move(keep)] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t i = 0; i < keep.size(); ++i) g[i] += oi->grad[i] * keep[i];
  });
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2 || shape_numel(ids_shape) != ids.size()) shape_fail("embedding", table.shape(), ids_shape);
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  Shape s = ids_shape;
  s.push_back(width);
  Tensor out = make_output(s, {&table});
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab) {
      throw TensorError("embedding: id " + std::to_string(idv[i]) + " out of range for vocabulary " +
                        std::to_string(vocab));
    }
    std::copy_n(table.ptr() + static_cast<std::size_t>(idv[i]) * width, width, out.ptr() + i * width);
  }
  ImplPtr ti = table.shared_impl(), oi = out.shared_impl();
  record("embedding", out, [ti, oi, idv = std::move(idv), width] {
    if (oi->grad.empty() || !needs(ti)) return;
    Real* g = ti->grad_buffer();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      Real* row = g + static_cast<std::size_t>(idv[i]) * width;
      for (std::size_t j = 0; j < width; ++j) row[j] += oi->grad[i * width + j];
    }
  });
  return out;
}

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, Real value) {
  if (mask.size() != x.numel()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) + " elements for shape " +
                     shape_str(x.shape()));
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  Tensor out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < x.numel(); ++i) out.ptr()[i] = m[i] ? value : x.ptr()[i];
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("masked_fill", out, [xi, oi, m = std::move(m)] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) g[i] += oi->grad[i];
    }
  });
  return out;
}

Tensor pick_last(const Tensor& x, std::span<const std::int32_t> index) {
  if (x.rank() == 0) throw ShapeError("pick_last: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / std::max<std::size_t>(n, 1);
  if (index.size() != rows) {
    throw ShapeError("pick_last: " + std::to_string(index.size()) + " indices for shape " + shape_str(x.shape()));
  }
  Shape s(x.shape().begin(), x.shape().end() - 1);
  Tensor out = make_output(s, {&x});
  std::vector<std::int32_t> idx(index.begin(), index.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n) throw TensorError("pick_last: index out of range");
    out.ptr()[r] = x.ptr()[r * n + static_cast<std::size_t>(idx[r])];
  }
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("pick_last", out, [xi, oi, idx = std::move(idx), n] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) g[r * n + static_cast<std::size_t>(idx[r])] += oi->grad[r];
  });
  return out;
}

Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw ShapeError("index_rows: scalar input");
  const std::size_t lead = x.dim(0);
  const std::size_t stride = x.numel() / std::max<std::size_t>(lead, 1);
  Shape s = x.shape();
  s[0] = rows.size();
  Tensor out = make_output(s, {&x});
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  for (std::size_t i = 0; i < rv.size(); ++i) {
    if (rv[i] >= lead) throw TensorError("index_rows: row index out of range");
    std::copy_n(x.ptr() + rv[i] * stride, stride, out.ptr() + i * stride);
  }
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("index_rows", out, [xi, oi, rv = std::move(rv), stride] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t i = 0; i < rv.size(); ++i) {
      for (std::size_t j = 0; j < stride; ++j) g[rv[i] * stride + j] += oi->grad[i * stride + j];
    }
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_output({}, {&x});
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  out.ptr()[0] = acc;
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("sum", out, [xi, oi] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += oi->grad[0];
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), Real(1) / Real(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("sum_last: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / std::max<std::size_t>(n, 1);
  Shape s(x.shape().begin(), x.shape().end() - 1);
  Tensor out = make_output(s, {&x});
  for (std::size_t r = 0; r < rows; ++r) {
    Real acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += x.ptr()[r * n + j];
    out.ptr()[r] = acc;
  }
  ImplPtr xi = x.shared_impl(), oi = out.shared_impl();
  record("sum_last", out, [xi, oi, n, rows] {
    if (oi->grad.empty() || !needs(xi)) return;
    Real* g = xi->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += oi->grad[r];
    }
  });
  return out;
}

Tensor hinge(const Tensor& x) {
  return unary(
      "hinge", x, [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log_mean_exp(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("log_mean_exp: no inputs");
  const Shape& s = xs.front().shape();
  auto& rec = ComputationRecord::current();
  bool track = false;
  for (const Tensor& t : xs) {
    if (t.shape() != s) shape_fail("log_mean_exp", s, t.shape());
    track = track || (rec.enabled() && t.requires_grad());
  }
  Tensor out = Tensor::zeros(s, track);
  if (track) out.impl()->record_generation = rec.generation();
  const std::size_t count = xs.size();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    Real mx = xs[0].ptr()[i];
    for (std::size_t m = 1; m < count; ++m) mx = std::max(mx, xs[m].ptr()[i]);
    Real acc = 0;
    for (std::size_t m = 0; m < count; ++m) acc += std::exp(xs[m].ptr()[i] - mx);
    out.ptr()[i] = mx + std::log(acc / Real(count));
  }
  std::vector<ImplPtr> ins;
  for (const Tensor& t : xs) ins.push_back(t.shared_impl());
  ImplPtr oi = out.shared_impl();
  record("log_mean_exp", out, [ins, oi, count] {
    if (oi->grad.empty()) return;
    for (const ImplPtr& in : ins) {
      if (!needs(in)) continue;
      Real* g = in->grad_buffer();
      for (std::size_t i = 0; i < oi->data.size(); ++i) {
        g[i] += oi->grad[i] * std::exp(in->data[i] - oi->data[i]) / Real(count);
      }
    }
  });
  return out;
}

}  // namespace ctxreg::ops
