#include "m3/numcore/optim.hpp"

#include <cmath>
#include <string>

namespace m3::numcore {

Real clip_global_norm(std::vector<Tensor>& params, Real max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  Real sq = 0;
  for (const auto& p : params) {
    for (Real g : p.grad()) sq += g * g;
  }
  const Real norm = std::sqrt(sq);
  if (norm > max_norm) {
    const Real factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (Real& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  first_.reserve(params_.size());
  second_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.is_leaf() || !p.requires_grad()) throw std::invalid_argument("Adam: parameters must be trainable leaves");
    first_.emplace_back(static_cast<std::size_t>(p.numel()), Real{0});
    second_.emplace_back(static_cast<std::size_t>(p.numel()), Real{0});
  }
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (Real g : params_[i].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("Adam: non-finite gradient in parameter " + std::to_string(i) + " of shape " +
                           shape_str(params_[i].shape()));
      }
    }
  }
  ++step_count_;
  const auto& o = options_;
  const Real c1 = Real{1} - std::pow(o.beta1, static_cast<Real>(step_count_));
  const Real c2 = Real{1} - std::pow(o.beta2, static_cast<Real>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const Real gj = g.empty() ? Real{0} : g[j];
      m[j] = o.beta1 * m[j] + (Real{1} - o.beta1) * gj;
      v[j] = o.beta2 * v[j] + (Real{1} - o.beta2) * gj * gj;
      w[j] -= o.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + o.epsilon);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace m3::numcore
