// SPDX-License-Identifier: Apache-2.0
#include "cbb/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cbb/errors.hpp"

namespace cbb::kernels {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// c[m×n] += a[k×m]ᵀ · b[k×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

namespace {

Shape batch_dims(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape()[b.rank() - 1];
  if (k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape ba = batch_dims(a.shape());
  const Shape bb = batch_dims(b.shape());

  if (bb.empty()) {
    // Shared right operand: fold a's batch into its rows.
    Shape out_shape = ba;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);
    gemm_nn(a.data().data(), b.data().data(), out.data().data(), shape_numel(ba) * m, k, n);
    return out;
  }
  if (ba.empty()) {
    Shape out_shape = bb;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);
    const std::size_t batches = shape_numel(bb);
    for (std::size_t t = 0; t < batches; ++t) {
      gemm_nn(a.data().data(), b.data().data() + t * k * n, out.data().data() + t * m * n, m, k, n);
    }
    return out;
  }
  if (ba != bb) {
    throw ShapeError("matmul batch dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape out_shape = ba;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  const std::size_t batches = shape_numel(ba);
  for (std::size_t t = 0; t < batches; ++t) {
    gemm_nn(a.data().data() + t * m * k, b.data().data() + t * k * n, out.data().data() + t * m * n, m, k, n);
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  const std::size_t r = a.shape()[a.rank() - 2];
  const std::size_t c = a.shape()[a.rank() - 1];
  std::swap(out_shape[a.rank() - 2], out_shape[a.rank() - 1]);
  Tensor out(out_shape);
  const std::size_t batches = a.numel() / (r * c);
  for (std::size_t t = 0; t < batches; ++t) {
    const double* src = a.data().data() + t * r * c;
    double* dst = out.data().data() + t * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  return out;
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  const long ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(ax);
}

namespace {

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
  std::size_t outer, extent, inner;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), ax);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      double mx = x[base];
      for (std::size_t e = 1; e < v.extent; ++e) mx = std::max(mx, x[base + e * v.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const double ex = std::exp(x[base + e * v.inner] - mx);
        out[base + e * v.inner] = ex;
        z += ex;
      }
      for (std::size_t e = 0; e < v.extent; ++e) out[base + e * v.inner] /= z;
    }
  }
  return out;
}

Tensor softmax_backward(const Tensor& y, const Tensor& grad_y, int axis) {
  const std::size_t ax = normalize_axis(axis, y.rank());
  const AxisView v = axis_view(y.shape(), ax);
  Tensor gx(y.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      double dot = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) dot += y[base + e * v.inner] * grad_y[base + e * v.inner];
      for (std::size_t e = 0; e < v.extent; ++e) {
        const std::size_t i = base + e * v.inner;
        gx[i] = y[i] * (grad_y[i] - dot);
      }
    }
  }
  return gx;
}

namespace {

// Number of leading axes on which `b` matches `a`; the remaining axes of b
// must all be singleton for a valid trailing broadcast.
bool trailing_broadcastable(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) return false;
  std::size_t t = 0;
  while (t < a.size() && a[t] == b[t]) ++t;
  for (std::size_t i = t; i < b.size(); ++i) {
    if (b[i] != 1) return false;
  }
  return true;
}

}  // namespace

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  if (op != ElementwiseOp::broadcast_mul) {
    if (a.shape() != b.shape()) {
      throw ShapeError("elementwise shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
      switch (op) {
        case ElementwiseOp::add: out[i] = a[i] + b[i]; break;
        case ElementwiseOp::sub: out[i] = a[i] - b[i]; break;
        default: out[i] = a[i] * b[i]; break;
      }
    }
    return out;
  }
  if (!trailing_broadcastable(a.shape(), b.shape())) {
    throw ShapeError("cannot broadcast " + shape_str(b.shape()) + " against " + shape_str(a.shape()));
  }
  // b's trailing singleton block repeats `inner` times per element of b.
  const std::size_t inner = a.numel() / b.numel();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < b.numel(); ++i) {
    const double s = b[i];
    for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = a[i * inner + j] * s;
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * factor;
  return out;
}

Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (!trailing_broadcastable(g.shape(), target)) {
    throw ShapeError("cannot reduce " + shape_str(g.shape()) + " to " + shape_str(target));
  }
  Tensor out(target);
  const std::size_t inner = g.numel() / out.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < inner; ++j) acc += g[i * inner + j];
    out[i] = acc;
  }
  return out;
}

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim || x.rank() == 1) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  }
  Tensor out(out_shape);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t e = 0; e < v.extent; ++e)
      for (std::size_t in = 0; in < v.inner; ++in)
        out[o * v.inner + in] += x[(o * v.extent + e) * v.inner + in];
  return out;
}

double sum(const Tensor& x) {
  return std::accumulate(x.data().begin(), x.data().end(), 0.0);
}

namespace {

thread_local std::uint64_t g_solve_count = 0;

bool try_cholesky(const Tensor& s, double ridge, Tensor& lower, double& bad_pivot) {
  const std::size_t n = s.dim(0);
  lower = Tensor({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = s.at(j, j) + ridge;
    for (std::size_t p = 0; p < j; ++p) d -= lower.at(j, p) * lower.at(j, p);
    if (!(d > 0.0) || !std::isfinite(d)) {
      bad_pivot = d;
      return false;
    }
    const double ljj = std::sqrt(d);
    lower.at(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s.at(i, j);
      for (std::size_t p = 0; p < j; ++p) v -= lower.at(i, p) * lower.at(j, p);
      lower.at(i, j) = v / ljj;
    }
  }
  return true;
}

}  // namespace

SpdFactor cholesky(const Tensor& s, double fallback_ridge) {
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) {
    throw ShapeError("cholesky needs a square matrix, got " + shape_str(s.shape()));
  }
  const std::size_t n = s.dim(0);
  double scale_ref = 0.0;
  for (double v : s.data()) scale_ref = std::max(scale_ref, std::abs(v));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(s.at(i, j) - s.at(j, i)) > 1e-10 * std::max(1.0, scale_ref)) {
        std::ostringstream msg;
        msg << "solve_spd: matrix not symmetric at (" << i << "," << j << "): " << s.at(i, j) << " vs " << s.at(j, i);
        throw NumericalError(msg.str());
      }
    }
  }
  SpdFactor f;
  double pivot = 0.0;
  if (try_cholesky(s, 0.0, f.lower, pivot)) return f;
  double retry_pivot = 0.0;
  if (fallback_ridge > 0.0 && try_cholesky(s, fallback_ridge, f.lower, retry_pivot)) {
    f.ridge = fallback_ridge;
    return f;
  }
  double min_diag = s.at(0, 0);
  for (std::size_t i = 1; i < n; ++i) min_diag = std::min(min_diag, s.at(i, i));
  std::ostringstream msg;
  msg << "solve_spd: matrix " << n << "x" << n << " not positive definite (pivot " << pivot
      << ", after ridge " << fallback_ridge << ": " << retry_pivot << "; max |entry| " << scale_ref
      << ", min diagonal " << min_diag << ")";
  throw NumericalError(msg.str());
}

Tensor cholesky_solve(const SpdFactor& factor, const Tensor& rhs) {
  const Tensor& l = factor.lower;
  const std::size_t n = l.dim(0);
  if (rhs.rank() != 2 || rhs.dim(0) != n) {
    throw ShapeError("solve_spd rhs " + shape_str(rhs.shape()) + " incompatible with " + shape_str(l.shape()));
  }
  const std::size_t cols = rhs.dim(1);
  Tensor w = rhs;
  // Forward substitution L·y = rhs, row-wise over all columns at once.
  for (std::size_t i = 0; i < n; ++i) {
    double* wi = &w.at(i, 0);
    for (std::size_t p = 0; p < i; ++p) {
      const double lip = l.at(i, p);
      const double* wp = &w.at(p, 0);
      for (std::size_t c = 0; c < cols; ++c) wi[c] -= lip * wp[c];
    }
    const double inv = 1.0 / l.at(i, i);
    for (std::size_t c = 0; c < cols; ++c) wi[c] *= inv;
  }
  // Back substitution Lᵀ·x = y.
  for (std::size_t ii = n; ii-- > 0;) {
    double* wi = &w.at(ii, 0);
    for (std::size_t p = ii + 1; p < n; ++p) {
      const double lpi = l.at(p, ii);
      const double* wp = &w.at(p, 0);
      for (std::size_t c = 0; c < cols; ++c) wi[c] -= lpi * wp[c];
    }
    const double inv = 1.0 / l.at(ii, ii);
    for (std::size_t c = 0; c < cols; ++c) wi[c] *= inv;
  }
  w.check_finite("solve_spd");
  return w;
}

SpdSolution solve_spd_factored(const Tensor& s, const Tensor& rhs) {
  ++g_solve_count;
  SpdSolution out{cholesky(s), Tensor()};
  out.solution = cholesky_solve(out.factor, rhs);
  return out;
}

Tensor solve_spd(const Tensor& s, const Tensor& rhs) { return solve_spd_factored(s, rhs).solution; }

std::uint64_t solve_count() { return g_solve_count; }

namespace {

void check_conv_shapes(const Shape& x, const Shape& w) {
  if (x.size() != 4) throw ShapeError("conv2d input must be [B×C×H×W], got " + shape_str(x));
  if (w.size() != 4 || w[2] != 3 || w[3] != 3) throw ShapeError("conv2d kernel must be [C×C×3×3], got " + shape_str(w));
  if (w[0] != w[1] || w[1] != x[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + ", kernel " + shape_str(w));
  }
}

// col[(ci·9 + tap) × ld] for one image, written at columns [0, H·W) of each row.
void im2col(const double* img, std::size_t c, std::size_t h, std::size_t w, double* col, std::size_t ld) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = col + (ci * 9 + ky * 3 + kx) * ld;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x + kx) - 1;
            const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w);
            row[y * w + x] = inside ? img[(ci * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, std::size_t c, std::size_t h, std::size_t w, double* img, std::size_t ld) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = col + (ci * 9 + ky * 3 + kx) * ld;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x + kx) - 1;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            img[(ci * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] += row[y * w + x];
          }
        }
      }
    }
  }
}

// The whole batch goes through one GEMM: columns of `col` and of the
// channel-major staging buffer run over (image, location).
std::vector<double> batch_im2col(const Tensor& x) {
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), hw = h * wd;
  std::vector<double> col(c * 9 * b * hw);
  for (std::size_t n = 0; n < b; ++n) im2col(x.data().data() + n * c * hw, c, h, wd, col.data() + n * hw, b * hw);
  return col;
}

// [B×C×HW] <-> [C×(B·HW)]
std::vector<double> to_channel_major(const Tensor& t) {
  const std::size_t b = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  std::vector<double> out(t.numel());
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ci = 0; ci < c; ++ci)
      std::copy_n(t.data().data() + (n * c + ci) * hw, hw, out.data() + ci * b * hw + n * hw);
  return out;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w) {
  check_conv_shapes(x.shape(), w.shape());
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::vector<double> col = batch_im2col(x);
  std::vector<double> staged(c * b * hw, 0.0);
  gemm_nn(w.data().data(), col.data(), staged.data(), c, c * 9, b * hw);
  Tensor out(x.shape());
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t co = 0; co < c; ++co)
      std::copy_n(staged.data() + co * b * hw + n * hw, hw, out.data().data() + (n * c + co) * hw);
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& w) {
  check_conv_shapes(grad_out.shape(), w.shape());
  const std::size_t b = grad_out.dim(0), c = grad_out.dim(1), h = grad_out.dim(2), wd = grad_out.dim(3);
  const std::size_t hw = h * wd;
  const std::vector<double> g = to_channel_major(grad_out);
  std::vector<double> col(c * 9 * b * hw, 0.0);
  gemm_tn(w.data().data(), g.data(), col.data(), c * 9, c, b * hw);
  Tensor gx(grad_out.shape());
  for (std::size_t n = 0; n < b; ++n) col2im_add(col.data() + n * hw, c, h, wd, gx.data().data() + n * c * hw, b * hw);
  return gx;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x) {
  if (grad_out.shape() != x.shape()) {
    throw ShapeError("conv2d_grad_weight: " + shape_str(grad_out.shape()) + " vs " + shape_str(x.shape()));
  }
  check_conv_shapes(x.shape(), Shape{x.dim(1), x.dim(1), 3, 3});
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::vector<double> col = batch_im2col(x);
  const std::vector<double> g = to_channel_major(grad_out);
  Tensor gw({c, c, 3, 3});
  gemm_nt(g.data(), col.data(), gw.data().data(), c, b * hw, c * 9);
  return gw;
}

namespace {

// In-place Householder QR of column-major `cols` (n columns of length m,
// m >= n); leaves R in the leading n entries of each column.
void householder_r(std::vector<std::vector<double>>& cols, std::size_t m) {
  const std::size_t n = cols.size();
  std::vector<double> v(m);
  for (std::size_t j = 0; j < n; ++j) {
    double norm = 0.0;
    for (std::size_t i = j; i < m; ++i) norm += cols[j][i] * cols[j][i];
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = cols[j][j] > 0 ? -norm : norm;
    for (std::size_t i = j; i < m; ++i) v[i] = cols[j][i];
    v[j] -= alpha;
    double vv = 0.0;
    for (std::size_t i = j; i < m; ++i) vv += v[i] * v[i];
    if (vv == 0.0) continue;
    for (std::size_t q = j; q < n; ++q) {
      double dot = 0.0;
      for (std::size_t i = j; i < m; ++i) dot += v[i] * cols[q][i];
      const double f = 2.0 * dot / vv;
      for (std::size_t i = j; i < m; ++i) cols[q][i] -= f * v[i];
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    cols[j].resize(n);
    for (std::size_t i = j + 1; i < n; ++i) cols[j][i] = 0.0;
  }
}

}  // namespace

std::vector<double> singular_values(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("singular_values needs a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  // One-sided Jacobi on columns, stored column-major for contiguous access.
  std::vector<std::vector<double>> cols(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cols[j][i] = a.at(i, j);
  // Tall inputs: R of a QR has the same singular values and is only n×n.
  std::size_t len = m;
  if (m > n) {
    householder_r(cols, m);
    len = n;
  }

  constexpr double eps = 1e-15;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& u = cols[p];
        auto& v = cols[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          alpha += u[i] * u[i];
          beta += v[i] * v[i];
          gamma += u[i] * v[i];
        }
        if (std::abs(gamma) <= eps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (std::size_t i = 0; i < len; ++i) {
          const double ui = u[i];
          const double vi = v[i];
          u[i] = cs * ui - sn * vi;
          v[i] = sn * ui + cs * vi;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (double v : cols[j]) s += v * v;
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

std::size_t numerical_rank(const Tensor& a, double rel_tol) {
  const auto sv = singular_values(a);
  if (sv.empty() || sv.front() == 0.0) return 0;
  const double cut = rel_tol * sv.front();
  return static_cast<std::size_t>(std::count_if(sv.begin(), sv.end(), [cut](double s) { return s >= cut; }));
}

}  // namespace cbb::kernels
