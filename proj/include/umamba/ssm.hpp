#pragma once

// Linear state-space machinery: bilinear discretization, recurrent and
// convolutional evaluation of time-invariant systems, and the selective
// (input-dependent) scan used inside the Mamba module.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "umamba/ops.hpp"
#include "umamba/tensor.hpp"

namespace umamba::ssm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Continuous-time system h' = A h + B x, y = C h + D x.
// Dense mode stores A as N x N; diagonal mode stores only diag(A) and
// leaves `a` empty. D is either F x F or a per-channel diagonal (F x 1).
struct SsmParams {
  Matrix a;
  Vector a_diag;
  Matrix b;  // N x F
  Matrix c;  // F x N
  Matrix d;  // F x F or F x 1
  double delta = 1.0;

  bool diagonal() const { return a.size() == 0; }
  std::size_t state_size() const { return diagonal() ? a_diag.size() : a.rows(); }
  std::size_t channels() const { return b.cols(); }
};

// Discretized system. C_bar and D_bar are copies of C and D.
struct DiscreteSsm {
  Matrix a_bar;  // N x N
  Matrix b_bar;  // N x F
  Matrix c_bar;  // F x N
  Matrix d_bar;  // F x F or F x 1
};

// K[t] = C_bar A_bar^t B_bar, each F x F.
struct SsmKernel {
  std::vector<Matrix> taps;
  std::size_t length() const { return taps.size(); }
};

struct BilinearResult {
  Matrix a_bar;
  Matrix b_bar;
};

// A_bar = (I - dt/2 A)^-1 (I + dt/2 A), B_bar = (I - dt/2 A)^-1 dt B.
inline BilinearResult discretize_bilinear(const Matrix& a, const Matrix& b, double delta) {
  if (a.rows() != a.cols()) throw ShapeError("discretize_bilinear: A must be square");
  if (b.rows() != a.rows()) throw ShapeError("discretize_bilinear: B rows must equal state size");
  if (!(delta > 0)) throw std::invalid_argument("discretize_bilinear: step must be positive");
  const auto n = a.rows();
  const Matrix eye = Matrix::Identity(n, n);
  const Matrix lhs = eye - (delta / 2.0) * a;
  Eigen::FullPivLU<Matrix> lu(lhs);
  if (!lu.isInvertible()) {
    throw std::domain_error("discretize_bilinear: (I - delta/2 A) is singular for delta = " +
                            std::to_string(delta));
  }
  return {lu.solve(eye + (delta / 2.0) * a), lu.solve(delta * b)};
}

// Elementwise form for diagonal A.
inline BilinearResult discretize_bilinear_diagonal(const Vector& a_diag, const Matrix& b, double delta) {
  if (b.rows() != a_diag.size()) throw ShapeError("discretize_bilinear_diagonal: B rows must equal state size");
  if (!(delta > 0)) throw std::invalid_argument("discretize_bilinear_diagonal: step must be positive");
  const auto n = a_diag.size();
  Matrix a_bar = Matrix::Zero(n, n);
  Matrix b_bar(n, b.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double q = 0.5 * delta * a_diag(i);
    if (q == 1.0) {
      throw std::domain_error("discretize_bilinear_diagonal: singular entry at state " + std::to_string(i));
    }
    a_bar(i, i) = (1.0 + q) / (1.0 - q);
    b_bar.row(i) = (delta / (1.0 - q)) * b.row(i);
  }
  return {a_bar, b_bar};
}

inline DiscreteSsm discretize(const SsmParams& p) {
  const BilinearResult r = p.diagonal() ? discretize_bilinear_diagonal(p.a_diag, p.b, p.delta)
                                        : discretize_bilinear(p.a, p.b, p.delta);
  return {r.a_bar, r.b_bar, p.c, p.d};
}

namespace detail {
inline Vector apply_skip(const Matrix& d, const Eigen::Ref<const Vector>& x) {
  if (d.cols() == 1 && d.rows() == x.size() && x.size() != 1) return d.col(0).cwiseProduct(x);
  return d * x;
}
}  // namespace detail

// h_t = A_bar h_{t-1} + B_bar x_t; y_t = C_bar h_t + D_bar x_t. x is F x T.
inline Matrix ssm_recurrence(const DiscreteSsm& d, const Matrix& x, const Vector& h0 = Vector()) {
  const auto n = d.a_bar.rows();
  if (x.rows() != d.b_bar.cols()) throw ShapeError("ssm_recurrence: input channels mismatch");
  Vector h = h0.size() ? h0 : Vector::Zero(n);
  if (h.size() != n) throw ShapeError("ssm_recurrence: initial state size mismatch");
  Matrix y(d.c_bar.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.cols(); ++t) {
    h = d.a_bar * h + d.b_bar * x.col(t);
    y.col(t) = d.c_bar * h + detail::apply_skip(d.d_bar, x.col(t));
  }
  return y;
}

inline SsmKernel ssm_kernel(const DiscreteSsm& d, std::size_t length) {
  if (length == 0) throw std::invalid_argument("ssm_kernel: length must be at least 1");
  SsmKernel k;
  k.taps.reserve(length);
  Matrix power_b = d.b_bar;  // A_bar^t B_bar
  for (std::size_t t = 0; t < length; ++t) {
    k.taps.push_back(d.c_bar * power_b);
    if (t + 1 < length) power_b = d.a_bar * power_b;
  }
  return k;
}

// Causal convolution y_t = sum_{j<=t} K[j] x_{t-j} + D_bar x_t.
inline Matrix ssm_convolve(const SsmKernel& kernel, const Matrix& d_bar, const Matrix& x) {
  const auto frames = static_cast<std::size_t>(x.cols());
  if (kernel.length() != frames) {
    throw ShapeError("ssm_convolve: kernel length " + std::to_string(kernel.length()) +
                     " does not match input length " + std::to_string(frames));
  }
  const auto f_out = kernel.taps.empty() ? 0 : kernel.taps[0].rows();
  Matrix y = Matrix::Zero(f_out, x.cols());
  for (Eigen::Index t = 0; t < x.cols(); ++t) {
    for (Eigen::Index j = 0; j <= t; ++j) y.col(t) += kernel.taps[j] * x.col(t - j);
    y.col(t) += detail::apply_skip(d_bar, x.col(t));
  }
  return y;
}

// Real diagonal HiPPO-derived initialization: A_n = -(n + 1).
inline std::vector<double> hippo_init(std::size_t n) {
  if (n == 0) throw std::invalid_argument("hippo_init: state size must be at least 1");
  std::vector<double> a(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = -static_cast<double>(i + 1);
  return a;
}

// ------------------------------------------------------------------ scans

// First-order affine map h -> a h + b. Composition (a1,b1) then (a2,b2)
// gives (a2 a1, a2 b1 + b2), which is associative.
struct AffinePair {
  double a = 1.0;
  double b = 0.0;
};

struct AffineCombine {
  AffinePair operator()(const AffinePair& first, const AffinePair& second) const {
    return {second.a * first.a, second.a * first.b + second.b};
  }
};

// In-place inclusive scan with an associative `combine(earlier, later)`.
// The sequence is cut into blocks: each block is scanned locally, block
// totals are scanned, then every block is offset by its predecessor's
// carry. Results agree with a left fold up to floating-point reassociation.
template <class T, class Combine>
void blocked_inclusive_scan(std::span<T> items, Combine combine, std::size_t block_size) {
  if (block_size == 0) throw std::invalid_argument("blocked_inclusive_scan: block size must be positive");
  const std::size_t n = items.size();
  if (n == 0) return;
  const std::size_t blocks = (n + block_size - 1) / block_size;
  std::vector<T> totals(blocks);
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t lo = blk * block_size;
    const std::size_t hi = std::min(n, lo + block_size);
    for (std::size_t i = lo + 1; i < hi; ++i) items[i] = combine(items[i - 1], items[i]);
    totals[blk] = items[hi - 1];
  }
  for (std::size_t blk = 1; blk < blocks; ++blk) totals[blk] = combine(totals[blk - 1], totals[blk]);
  for (std::size_t blk = 1; blk < blocks; ++blk) {
    const std::size_t lo = blk * block_size;
    const std::size_t hi = std::min(n, lo + block_size);
    for (std::size_t i = lo; i < hi; ++i) items[i] = combine(totals[blk - 1], items[i]);
  }
}

// Dense inputs of the selective scan. D channels, N states, T steps.
// a: D x N (diagonal of A per channel), b, c: N x T, delta, u: D x T, skip: D.
struct SelectiveInputs {
  std::size_t channels = 0;
  std::size_t states = 0;
  std::size_t frames = 0;
  std::span<const double> u;
  std::span<const double> delta;
  std::span<const double> a;
  std::span<const double> b;
  std::span<const double> c;
  std::span<const double> skip;
};

namespace detail {

inline void validate(const SelectiveInputs& in) {
  const std::size_t dt = in.channels * in.frames;
  if (in.u.size() != dt || in.delta.size() != dt || in.a.size() != in.channels * in.states ||
      in.b.size() != in.states * in.frames || in.c.size() != in.states * in.frames ||
      in.skip.size() != in.channels) {
    throw ShapeError("selective_scan: inconsistent input sizes");
  }
  for (double v : in.delta) {
    if (!(v > 0)) throw std::invalid_argument("selective_scan: step sizes must be positive");
  }
}

// Writes y (D x T) and, when `states_out` is non-null, every hidden state
// h[(d * N + n) * T + t].
inline void selective_forward(const SelectiveInputs& in, std::size_t block_size, std::span<double> y,
                              std::vector<double>* states_out) {
  const std::size_t D = in.channels, N = in.states, T = in.frames;
  std::vector<AffinePair> pairs(T);
  if (states_out) states_out->assign(D * N * T, 0.0);
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    const double* u = in.u.data() + d * T;
    const double* dt = in.delta.data() + d * T;
    double* yd = y.data() + d * T;
    for (std::size_t n = 0; n < N; ++n) {
      const double a = in.a[d * N + n];
      const double* bn = in.b.data() + n * T;
      const double* cn = in.c.data() + n * T;
      for (std::size_t t = 0; t < T; ++t) {
        const double q = 0.5 * dt[t] * a;
        const double inv = 1.0 / (1.0 - q);
        pairs[t] = {(1.0 + q) * inv, dt[t] * bn[t] * inv * u[t]};
      }
      blocked_inclusive_scan(std::span<AffinePair>(pairs), AffineCombine{}, block_size);
      for (std::size_t t = 0; t < T; ++t) yd[t] += cn[t] * pairs[t].b;
      if (states_out) {
        double* h = states_out->data() + (d * N + n) * T;
        for (std::size_t t = 0; t < T; ++t) h[t] = pairs[t].b;
      }
    }
    for (std::size_t t = 0; t < T; ++t) yd[t] += in.skip[d] * u[t];
  }
}

}  // namespace detail

// Multiply-accumulates charged per selective scan: per channel, state and
// step, the state update (2) and readout (1); plus the skip term.
inline std::uint64_t selective_scan_macs(std::size_t channels, std::size_t states, std::size_t frames) {
  return static_cast<std::uint64_t>(channels) * frames * (3 * states + 1);
}

inline std::vector<double> selective_scan(const SelectiveInputs& in, std::size_t block_size = 64) {
  detail::validate(in);
  std::vector<double> y(in.channels * in.frames);
  detail::selective_forward(in, block_size, y, nullptr);
  return y;
}

// Differentiable selective scan.
//   u, delta: D x T;  a: D x N;  b, c: N x T;  skip: D.
inline Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b,
                             const Tensor& c, const Tensor& skip, std::size_t block_size = 64) {
  umamba::detail::require_rank(u, 2, "selective_scan u");
  umamba::detail::require_rank(a, 2, "selective_scan A");
  umamba::detail::require_rank(b, 2, "selective_scan B");
  const std::size_t D = u.dim(0), T = u.dim(1), N = a.dim(1);
  umamba::detail::require(delta.shape() == u.shape(), "selective_scan: delta must match u");
  umamba::detail::require(a.dim(0) == D, "selective_scan: A rows must equal channel count");
  umamba::detail::require(b.dim(0) == N && b.dim(1) == T && c.shape() == b.shape(),
                          "selective_scan: B and C must be N x T");
  umamba::detail::require(skip.size() == D, "selective_scan: skip length must equal channel count");
  SelectiveInputs in{D, N, T, u.values(), delta.values(), a.values(), b.values(), c.values(), skip.values()};
  detail::validate(in);
  const bool record = umamba::detail::should_record({&u, &delta, &a, &b, &c, &skip});
  auto states = std::make_shared<std::vector<double>>();
  std::vector<double> y(D * T);
  detail::selective_forward(in, block_size, y, record ? states.get() : nullptr);
  mac_counter() += selective_scan_macs(D, N, T);
  return umamba::detail::make_result(
      {D, T}, std::move(y), {&u, &delta, &a, &b, &c, &skip},
      [u, delta, a, b, c, skip, states, D, N, T](umamba::detail::Node& self) {
        using umamba::detail::grad_of;
        const auto uv = u.values(), dv = delta.values(), av = a.values(), bv = b.values(),
                   cv = c.values(), sv = skip.values();
        const auto& gy = self.grad;
        auto* gu = grad_of(u);
        auto* gd = grad_of(delta);
        auto* ga = grad_of(a);
        auto* gb = grad_of(b);
        auto* gc = grad_of(c);
        auto* gs = grad_of(skip);
        std::vector<double> scratch_u(T, 0.0), scratch_dt(T, 0.0);
        for (std::size_t d = 0; d < D; ++d) {
          const double* ud = uv.data() + d * T;
          const double* dtd = dv.data() + d * T;
          const double* gyd = gy.data() + d * T;
          std::fill(scratch_u.begin(), scratch_u.end(), 0.0);
          std::fill(scratch_dt.begin(), scratch_dt.end(), 0.0);
          if (gs) {
            double acc = 0.0;
            for (std::size_t t = 0; t < T; ++t) acc += gyd[t] * ud[t];
            (*gs)[d] += acc;
          }
          for (std::size_t t = 0; t < T; ++t) scratch_u[t] += gyd[t] * sv[d];
          for (std::size_t n = 0; n < N; ++n) {
            const double an = av[d * N + n];
            const double* bn = bv.data() + n * T;
            const double* cn = cv.data() + n * T;
            const double* h = states->data() + (d * N + n) * T;
            double carry = 0.0;  // A_bar_{t+1} * lambda_{t+1}
            double ga_acc = 0.0;
            for (std::size_t t = T; t-- > 0;) {
              const double lam = gyd[t] * cn[t] + carry;
              if (gc) (*gc)[n * T + t] += gyd[t] * h[t];
              const double q = 0.5 * dtd[t] * an;
              const double inv = 1.0 / (1.0 - q);
              const double a_bar = (1.0 + q) * inv;
              const double b_bar = dtd[t] * bn[t] * inv;
              const double h_prev = t > 0 ? h[t - 1] : 0.0;
              const double d_abar = lam * h_prev;
              const double d_bbar = lam * ud[t];
              scratch_u[t] += lam * b_bar;
              const double dq = d_abar * 2.0 * inv * inv + d_bbar * dtd[t] * bn[t] * inv * inv;
              scratch_dt[t] += d_bbar * bn[t] * inv + dq * 0.5 * an;
              ga_acc += dq * 0.5 * dtd[t];
              if (gb) (*gb)[n * T + t] += d_bbar * dtd[t] * inv;
              carry = a_bar * lam;
            }
            if (ga) (*ga)[d * N + n] += ga_acc;
          }
          if (gu) {
            for (std::size_t t = 0; t < T; ++t) (*gu)[d * T + t] += scratch_u[t];
          }
          if (gd) {
            for (std::size_t t = 0; t < T; ++t) (*gd)[d * T + t] += scratch_dt[t];
          }
        }
      });
}

}  // namespace umamba::ssm
