#pragma once

#include <cstdint>
#include <vector>

#include "m3/numcore/tensor.hpp"

namespace m3::numcore {

// Scales every gradient by max_norm / g when the global L2 norm g exceeds
// max_norm. Returns g measured before clipping.
Real clip_global_norm(std::vector<Tensor>& params, Real max_norm = 1.0);

struct AdamOptions {
  Real learning_rate = 3e-4;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
};

// Bias-corrected adaptive-moment optimizer over a fixed parameter list.
class Adam {
public:
  Adam(std::vector<Tensor> params, AdamOptions options = {});

  // Applies one update from the accumulated gradients. Throws NumericError
  // (naming the parameter index) on a non-finite gradient.
  void step();
  void zero_grad();

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const AdamOptions& options() const { return options_; }
  std::int64_t step_count() const { return step_count_; }

  // Moment buffers, exposed for checkpointing.
  std::vector<std::vector<Real>>& first_moments() { return first_; }
  std::vector<std::vector<Real>>& second_moments() { return second_; }
  const std::vector<std::vector<Real>>& first_moments() const { return first_; }
  const std::vector<std::vector<Real>>& second_moments() const { return second_; }
  void set_step_count(std::int64_t n) { step_count_ = n; }

private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<Real>> first_;
  std::vector<std::vector<Real>> second_;
  std::int64_t step_count_ = 0;
};

}  // namespace m3::numcore
