#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "m3/numcore/tensor.hpp"

// Differentiable operations.
//
// Broadcasting: binary elementwise ops accept operands of identical shape
// (any rank), or operands of rank <= 2 that agree per axis after viewing a
// scalar as [1, 1] and a vector [n] as [1, n]; an extent of 1 stretches to
// the other operand's extent. So [m, n] (+) [n], [m, n] (+) [m, 1] and
// [m, n] (+) scalar are all valid. Anything else throws ShapeError naming
// both shapes.
//
// Sequence tensors are stored position-major as [l * b, d]: row t * b + i
// holds token t of batch row i.
namespace m3::numcore {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, Real factor);
Tensor add_scalar(const Tensor& x, Real offset);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
// Values outside [lo, hi] are clamped and pass no gradient.
Tensor clamp(const Tensor& x, Real lo, Real hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, Real c) { return scale(x, c); }
inline Tensor operator*(Real c, const Tensor& x) { return scale(x, c); }
inline Tensor operator+(const Tensor& x, Real c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, Real c) { return add_scalar(x, -c); }

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [m, n] -> [m, 1]
Tensor sum_cols(const Tensor& x);
// [m, n] -> [1, n]
Tensor sum_rows(const Tensor& x);

// [m, k] x [k, n] -> [m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [m, k], weight [k, n], optional bias [n] -> [m, n]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);

// Row-wise x / sqrt(mean(x^2) + eps) * weight, weight [n].
Tensor rms_norm(const Tensor& x, const Tensor& weight, Real eps = 1e-5);

// Depthwise causal convolution over the position axis of a sequence tensor
// x [l * b, c] with kernel weight [c, k] and bias [c]:
//   y[t, i, ch] = bias[ch] + sum_j weight[ch, j] * x[t - (k - 1) + j, i, ch]
// with x at negative positions treated as zero.
Tensor causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t length,
                     std::int64_t batch);

// Cumulative first-order linear recurrence along axis 0 of [l, n] tensors:
//   h[0] = b[0],  h[t] = a[t] * h[t - 1] + b[t].
Tensor linear_scan(const Tensor& a, const Tensor& b);

// In-place kernel behind linear_scan: on return b holds h. a is overwritten
// with running products. Evaluated chunk-wise as an associative scan so the
// work stays O(l * n).
void scan_linear_recurrence(std::span<Real> a, std::span<Real> b, std::int64_t length, std::int64_t width);

}  // namespace m3::numcore
