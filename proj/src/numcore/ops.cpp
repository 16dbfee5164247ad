#include "m3/numcore/ops.hpp"

#include "m3/numcore/vecmath.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace m3::numcore {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::span<Real> target(const Tensor& t) {
  if (!t.requires_grad()) return {};
  return t.node()->grad_buffer();
}

Real sigmoid_scalar(Real x) {
  if (x >= 0) return Real{1} / (Real{1} + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real{1} + e);
}

Real softplus_scalar(Real x) { return x > 30 ? x : std::log1p(std::exp(x)); }

// Recomputes entries the bulk kernels clamp (huge magnitudes, NaN) with the
// scalar function so overflow and NaN propagate as usual.
template <class F>
void patch_extremes(std::span<const Real> x, std::span<Real> out, F f) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(std::abs(x[i]) <= 700)) out[i] = f(x[i]);
  }
}

std::vector<Real> sigmoid_values(std::span<const Real> x) {
  std::vector<Real> out(x.size());
  vec::sigmoid(x, out);
  patch_extremes(x, out, sigmoid_scalar);
  return out;
}

struct View2 {
  std::int64_t rows;
  std::int64_t cols;
};

View2 view2(const Shape& s, const char* op) {
  switch (s.size()) {
    case 0: return {1, 1};
    case 1: return {1, s[0]};
    case 2: return {s[0], s[1]};
    default: throw ShapeError(std::string(op) + ": cannot broadcast rank-" + std::to_string(s.size()) + " shape " + shape_str(s));
  }
}

struct BroadcastPlan {
  Shape out;
  bool same = false;
  View2 a{}, b{}, o{};
};

BroadcastPlan plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  BroadcastPlan p;
  if (a.shape() == b.shape()) {
    p.out = a.shape();
    p.same = true;
    return p;
  }
  const bool scalar_a = a.numel() == 1 && a.rank() <= 2;
  const bool scalar_b = b.numel() == 1 && b.rank() <= 2;
  if (a.rank() > 2 || b.rank() > 2) {
    if (!(scalar_a || scalar_b)) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    // Scalar against higher rank degenerates to a flat broadcast.
    const auto& big = scalar_a ? b : a;
    p.out = big.shape();
    p.a = scalar_a ? View2{1, 1} : View2{1, big.numel()};
    p.b = scalar_b ? View2{1, 1} : View2{1, big.numel()};
    p.o = {1, big.numel()};
    return p;
  }
  p.a = view2(a.shape(), op);
  p.b = view2(b.shape(), op);
  auto merge = [&](std::int64_t x, std::int64_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  };
  p.o = {merge(p.a.rows, p.b.rows), merge(p.a.cols, p.b.cols)};
  if (std::max(a.rank(), b.rank()) == 2) {
    p.out = {p.o.rows, p.o.cols};
  } else {
    p.out = {p.o.cols};
  }
  return p;
}

inline std::size_t bidx(const View2& v, std::int64_t r, std::int64_t c) {
  return static_cast<std::size_t>((v.rows == 1 ? 0 : r) * v.cols + (v.cols == 1 ? 0 : c));
}

// Elementwise binary op with local partials da(x, y) and db(x, y).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  const auto plan = plan_broadcast(a, b, name);
  const auto n = static_cast<std::size_t>(shape_numel(plan.out));
  std::vector<Real> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  if (plan.same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::int64_t r = 0; r < plan.o.rows; ++r) {
      for (std::int64_t c = 0; c < plan.o.cols; ++c) {
        out[static_cast<std::size_t>(r * plan.o.cols + c)] = f(av[bidx(plan.a, r, c)], bv[bidx(plan.b, r, c)]);
      }
    }
  }
  return make_result(plan.out, std::move(out), {a, b}, [a, b, plan, da, db](Node& self) {
    const auto g = std::span<const Real>(self.grad);
    auto ga = target(a);
    auto gb = target(b);
    const auto av = a.data();
    const auto bv = b.data();
    if (plan.same) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!ga.empty()) ga[i] += g[i] * da(av[i], bv[i]);
        if (!gb.empty()) gb[i] += g[i] * db(av[i], bv[i]);
      }
      return;
    }
    for (std::int64_t r = 0; r < plan.o.rows; ++r) {
      for (std::int64_t c = 0; c < plan.o.cols; ++c) {
        const Real gi = g[static_cast<std::size_t>(r * plan.o.cols + c)];
        const auto ia = bidx(plan.a, r, c);
        const auto ib = bidx(plan.b, r, c);
        if (!ga.empty()) ga[ia] += gi * da(av[ia], bv[ib]);
        if (!gb.empty()) gb[ib] += gi * db(av[ia], bv[ib]);
      }
    }
  });
}

// Elementwise unary op; the derivative sees both input x and output y.
template <class F, class D>
Tensor unary(const Tensor& x, F f, D d) {
  const auto xv = x.data();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [x, d](Node& self) {
    auto gx = target(x);
    if (gx.empty()) return;
    const auto xv = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * d(xv[i], self.value[i]);
  });
}

void require_matrix(const Tensor& t, const char* op, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": " + what + " must be a matrix, got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real{1}; },
      [](Real, Real) { return Real{1}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real{1}; },
      [](Real, Real) { return Real{-1}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](Real x, Real y) { return x / y; }, [](Real, Real y) { return Real{1} / y; },
      [](Real x, Real y) { return -x / (y * y); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](Real x, Real y) { return x <= y ? x : y; },
      [](Real x, Real y) { return x <= y ? Real{1} : Real{0}; },
      [](Real x, Real y) { return x <= y ? Real{0} : Real{1}; });
}

Tensor neg(const Tensor& x) {
  return unary(x, [](Real v) { return -v; }, [](Real, Real) { return Real{-1}; });
}

Tensor scale(const Tensor& x, Real factor) {
  return unary(x, [factor](Real v) { return v * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& x, Real offset) {
  return unary(x, [offset](Real v) { return v + offset; }, [](Real, Real) { return Real{1}; });
}

Tensor exp(const Tensor& x) {
  const auto xv = x.data();
  std::vector<Real> out(xv.begin(), xv.end());
  vec::exp_inplace(out);
  patch_extremes(xv, out, [](Real v) { return std::exp(v); });
  return make_result(x.shape(), std::move(out), {x}, [x](Node& self) {
    auto gx = target(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * self.value[i];
  });
}

Tensor log(const Tensor& x) {
  return unary(x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real{1} / v; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real{1} - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return make_result(x.shape(), sigmoid_values(x.data()), {x}, [x](Node& self) {
    auto gx = target(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const Real y = self.value[i];
      gx[i] += self.grad[i] * y * (Real{1} - y);
    }
  });
}

Tensor softplus(const Tensor& x) {
  const auto xv = x.data();
  std::vector<Real> out(xv.size());
  vec::softplus(xv, out);
  patch_extremes(xv, out, softplus_scalar);
  return make_result(x.shape(), std::move(out), {x}, [x](Node& self) {
    auto gx = target(x);
    if (gx.empty()) return;
    const auto s = sigmoid_values(x.data());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * s[i];
  });
}

Tensor silu(const Tensor& x) {
  const auto xv = x.data();
  auto s = std::make_shared<std::vector<Real>>(sigmoid_values(xv));
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * (*s)[i];
  return make_result(x.shape(), std::move(out), {x}, [x, s](Node& self) {
    auto gx = target(x);
    const auto xv = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const Real si = (*s)[i];
      gx[i] += self.grad[i] * si * (Real{1} + xv[i] * (Real{1} - si));
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](Real v) { return v > 0 ? v : Real{0}; }, [](Real v, Real) { return v > 0 ? Real{1} : Real{0}; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](Real v) { return v * v; }, [](Real v, Real) { return 2 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, [](Real v) { return std::sqrt(v); }, [](Real, Real y) { return Real{0.5} / y; });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  return unary(
      x, [lo, hi](Real v) { return std::clamp(v, lo, hi); },
      [lo, hi](Real v, Real) { return (v >= lo && v <= hi) ? Real{1} : Real{0}; });
}

Tensor sum(const Tensor& x) {
  const auto xv = x.data();
  const Real total = std::accumulate(xv.begin(), xv.end(), Real{0});
  return make_result({}, {total}, {x}, [x](Node& self) {
    auto gx = target(x);
    for (auto& g : gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), Real{1} / static_cast<Real>(x.numel()));
}

Tensor sum_cols(const Tensor& x) {
  require_matrix(x, "sum_cols", "input");
  const auto m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(static_cast<std::size_t>(m), Real{0});
  const auto xv = x.data();
  for (std::int64_t r = 0; r < m; ++r) {
    for (std::int64_t c = 0; c < n; ++c) out[r] += xv[r * n + c];
  }
  return make_result({m, 1}, std::move(out), {x}, [x, m, n](Node& self) {
    auto gx = target(x);
    if (gx.empty()) return;
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t c = 0; c < n; ++c) gx[r * n + c] += self.grad[r];
    }
  });
}

Tensor sum_rows(const Tensor& x) {
  require_matrix(x, "sum_rows", "input");
  const auto m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(static_cast<std::size_t>(n), Real{0});
  const auto xv = x.data();
  for (std::int64_t r = 0; r < m; ++r) {
    for (std::int64_t c = 0; c < n; ++c) out[c] += xv[r * n + c];
  }
  return make_result({1, n}, std::move(out), {x}, [x, m, n](Node& self) {
    auto gx = target(x);
    if (gx.empty()) return;
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t c = 0; c < n; ++c) gx[r * n + c] += self.grad[c];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul", "lhs");
  require_matrix(b, "matmul", "rhs");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  // Accumulate into the zeroed buffer; plain assignment would clear it again.
  std::vector<Real> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() += ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
    ConstMap g(self.grad.data(), m, n);
    if (auto ga = target(a); !ga.empty()) {
      MutMap(ga.data(), m, k).noalias() += g * ConstMap(b.data().data(), k, n).transpose();
    }
    if (auto gb = target(b); !gb.empty()) {
      MutMap(gb.data(), k, n).noalias() += ConstMap(a.data().data(), m, k).transpose() * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_matrix(x, "linear", "input");
  require_matrix(weight, "linear", "weight");
  const auto m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (weight.dim(0) != k) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != n) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  std::vector<Real> out(static_cast<std::size_t>(m * n));
  MutMap o(out.data(), m, n);
  o.noalias() += ConstMap(x.data().data(), m, k) * ConstMap(weight.data().data(), k, n);
  if (has_bias) o.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(bias.data().data(), n);
  return make_result({m, n}, std::move(out), {x, weight, bias}, [x, weight, bias, m, k, n](Node& self) {
    ConstMap g(self.grad.data(), m, n);
    if (auto gx = target(x); !gx.empty()) {
      MutMap(gx.data(), m, k).noalias() += g * ConstMap(weight.data().data(), k, n).transpose();
    }
    if (auto gw = target(weight); !gw.empty()) {
      MutMap(gw.data(), k, n).noalias() += ConstMap(x.data().data(), m, k).transpose() * g;
    }
    if (bias.defined()) {
      if (auto gb = target(bias); !gb.empty()) {
        Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(gb.data(), n) += g.colwise().sum();
      }
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const auto m = parts.front().dim(0);
  std::int64_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols", "operand");
    if (p.dim(0) != m) {
      throw ShapeError("concat_cols: row counts differ, " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  std::vector<Real> out(static_cast<std::size_t>(m * total));
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto n = p.dim(1);
    const auto pv = p.data();
    for (std::int64_t r = 0; r < m; ++r) {
      std::copy_n(pv.begin() + r * n, n, out.begin() + r * total + offset);
    }
    offset += n;
  }
  return make_result({m, total}, std::move(out), parts, [parts, m, total](Node& self) {
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      const auto n = p.dim(1);
      if (auto gp = target(p); !gp.empty()) {
        for (std::int64_t r = 0; r < m; ++r) {
          for (std::int64_t c = 0; c < n; ++c) gp[r * n + c] += self.grad[r * total + offset + c];
        }
      }
      offset += n;
    }
  });
}

Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t count) {
  require_matrix(x, "slice_cols", "input");
  const auto m = x.dim(0), n = x.dim(1);
  if (start < 0 || count < 0 || start + count > n) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " + shape_str(x.shape()));
  }
  std::vector<Real> out(static_cast<std::size_t>(m * count));
  const auto xv = x.data();
  for (std::int64_t r = 0; r < m; ++r) std::copy_n(xv.begin() + r * n + start, count, out.begin() + r * count);
  return make_result({m, count}, std::move(out), {x}, [x, m, n, start, count](Node& self) {
    auto gx = target(x);
    if (gx.empty()) return;
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t c = 0; c < count; ++c) gx[r * n + start + c] += self.grad[r * count + c];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t count) {
  require_matrix(x, "slice_rows", "input");
  const auto m = x.dim(0), n = x.dim(1);
  if (start < 0 || count < 0 || start + count > m) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " + shape_str(x.shape()));
  }
  const auto xv = x.data();
  std::vector<Real> out(xv.begin() + start * n, xv.begin() + (start + count) * n);
  return make_result({count, n}, std::move(out), {x}, [x, n, start](Node& self) {
    auto gx = target(x);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[start * n + i] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  const auto xv = x.data();
  return make_result(std::move(shape), std::vector<Real>(xv.begin(), xv.end()), {x}, [x](Node& self) {
    auto gx = target(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose", "input");
  const auto m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), n, m) = ConstMap(x.data().data(), m, n).transpose();
  return make_result({n, m}, std::move(out), {x}, [x, m, n](Node& self) {
    if (auto gx = target(x); !gx.empty()) {
      MutMap(gx.data(), m, n) += ConstMap(self.grad.data(), n, m).transpose();
    }
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, Real eps) {
  require_matrix(x, "rms_norm", "input");
  const auto m = x.dim(0), n = x.dim(1);
  if (weight.numel() != n) {
    throw ShapeError("rms_norm: weight " + shape_str(weight.shape()) + " does not match input " + shape_str(x.shape()));
  }
  const auto xv = x.data();
  const auto wv = weight.data();
  std::vector<Real> out(static_cast<std::size_t>(m * n));
  std::vector<Real> inv(static_cast<std::size_t>(m));
  for (std::int64_t r = 0; r < m; ++r) {
    Real ms = 0;
    for (std::int64_t c = 0; c < n; ++c) ms += xv[r * n + c] * xv[r * n + c];
    inv[r] = Real{1} / std::sqrt(ms / static_cast<Real>(n) + eps);
    for (std::int64_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] * inv[r] * wv[c];
  }
  return make_result({m, n}, std::move(out), {x, weight}, [x, weight, inv = std::move(inv), m, n](Node& self) {
    const auto xv = x.data();
    const auto wv = weight.data();
    auto gx = target(x);
    auto gw = target(weight);
    for (std::int64_t r = 0; r < m; ++r) {
      const Real ri = inv[r];
      Real dot = 0;
      for (std::int64_t c = 0; c < n; ++c) {
        const Real g = self.grad[r * n + c];
        const Real xh = xv[r * n + c] * ri;
        if (!gw.empty()) gw[c] += g * xh;
        dot += g * wv[c] * xh;
      }
      if (gx.empty()) continue;
      dot /= static_cast<Real>(n);
      for (std::int64_t c = 0; c < n; ++c) {
        const Real xh = xv[r * n + c] * ri;
        gx[r * n + c] += ri * (self.grad[r * n + c] * wv[c] - xh * dot);
      }
    }
  });
}

Tensor causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t length,
                     std::int64_t batch) {
  require_matrix(x, "causal_conv1d", "input");
  require_matrix(weight, "causal_conv1d", "weight");
  const auto ch = x.dim(1), k = weight.dim(1);
  if (x.dim(0) != length * batch) {
    throw ShapeError("causal_conv1d: input " + shape_str(x.shape()) + " is not " + std::to_string(length) + " x " +
                     std::to_string(batch) + " rows");
  }
  if (weight.dim(0) != ch || bias.numel() != ch) {
    throw ShapeError("causal_conv1d: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match " + std::to_string(ch) + " channels");
  }
  const auto xv = x.data();
  const auto wv = weight.data();
  const auto bv = bias.data();
  std::vector<Real> out(xv.size());
  for (std::int64_t t = 0; t < length; ++t) {
    for (std::int64_t i = 0; i < batch; ++i) {
      Real* o = out.data() + (t * batch + i) * ch;
      for (std::int64_t c = 0; c < ch; ++c) o[c] = bv[c];
      for (std::int64_t j = 0; j < k; ++j) {
        const auto s = t - (k - 1) + j;
        if (s < 0) continue;
        const Real* xi = xv.data() + (s * batch + i) * ch;
        for (std::int64_t c = 0; c < ch; ++c) o[c] += wv[c * k + j] * xi[c];
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x, weight, bias},
                     [x, weight, bias, length, batch, ch, k](Node& self) {
                       const auto xv = x.data();
                       const auto wv = weight.data();
                       auto gx = target(x);
                       auto gw = target(weight);
                       auto gb = target(bias);
                       for (std::int64_t t = 0; t < length; ++t) {
                         for (std::int64_t i = 0; i < batch; ++i) {
                           const Real* g = self.grad.data() + (t * batch + i) * ch;
                           if (!gb.empty()) {
                             for (std::int64_t c = 0; c < ch; ++c) gb[c] += g[c];
                           }
                           for (std::int64_t j = 0; j < k; ++j) {
                             const auto s = t - (k - 1) + j;
                             if (s < 0) continue;
                             const auto base = (s * batch + i) * ch;
                             for (std::int64_t c = 0; c < ch; ++c) {
                               if (!gx.empty()) gx[base + c] += wv[c * k + j] * g[c];
                               if (!gw.empty()) gw[c * k + j] += xv[base + c] * g[c];
                             }
                           }
                         }
                       }
                     });
}

void scan_linear_recurrence(std::span<Real> a, std::span<Real> b, std::int64_t length, std::int64_t width) {
  if (static_cast<std::int64_t>(a.size()) != length * width || a.size() != b.size()) {
    throw ShapeError("scan_linear_recurrence: buffers do not hold " + std::to_string(length) + " x " +
                     std::to_string(width) + " values");
  }
  constexpr std::int64_t chunk = 8;
  // Pass 1: independent local scans per chunk. b becomes the chunk-local
  // state, a the running product of coefficients since the chunk start.
  for (std::int64_t start = 0; start < length; start += chunk) {
    const auto stop = std::min(start + chunk, length);
    for (std::int64_t t = start + 1; t < stop; ++t) {
      Real* at = a.data() + t * width;
      Real* bt = b.data() + t * width;
      const Real* ap = a.data() + (t - 1) * width;
      const Real* bp = b.data() + (t - 1) * width;
      for (std::int64_t j = 0; j < width; ++j) {
        bt[j] += at[j] * bp[j];
        at[j] *= ap[j];
      }
    }
  }
  // Pass 2: carry the final state of each chunk into the next one.
  for (std::int64_t start = chunk; start < length; start += chunk) {
    const auto stop = std::min(start + chunk, length);
    const Real* carry = b.data() + (start - 1) * width;
    for (std::int64_t t = start; t < stop; ++t) {
      Real* bt = b.data() + t * width;
      const Real* at = a.data() + t * width;
      for (std::int64_t j = 0; j < width; ++j) bt[j] += at[j] * carry[j];
    }
  }
}

Tensor linear_scan(const Tensor& a, const Tensor& b) {
  require_matrix(a, "linear_scan", "coefficients");
  if (a.shape() != b.shape()) {
    throw ShapeError("linear_scan: coefficient shape " + shape_str(a.shape()) + " differs from input " + shape_str(b.shape()));
  }
  const auto l = a.dim(0), n = a.dim(1);
  std::vector<Real> prod(a.data().begin(), a.data().end());
  std::vector<Real> h(b.data().begin(), b.data().end());
  scan_linear_recurrence(prod, h, l, n);
  return make_result(a.shape(), std::move(h), {a, b}, [a, b, l, n](Node& self) {
    auto ga = target(a);
    auto gb = target(b);
    const auto av = a.data();
    // G[t] = g[t] + a[t + 1] * G[t + 1], accumulated backwards.
    std::vector<Real> carry(static_cast<std::size_t>(n), Real{0});
    for (std::int64_t t = l - 1; t >= 0; --t) {
      for (std::int64_t j = 0; j < n; ++j) {
        const auto idx = t * n + j;
        const Real G = self.grad[idx] + carry[j];
        if (!gb.empty()) gb[idx] += G;
        if (!ga.empty() && t > 0) ga[idx] += G * self.value[idx - n];
        carry[j] = G * av[idx];
      }
    }
  });
}

}  // namespace m3::numcore
