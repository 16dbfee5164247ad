#pragma once

#include <span>

#include "m3/numcore/tensor.hpp"

// Bulk transcendental kernels. They are compiled so that the loops map onto
// the vector math library; results agree with the scalar libm calls to a few
// ulp. Inputs are clamped to the finite range of exp before evaluation.
namespace m3::numcore::vec {

void exp_inplace(std::span<Real> x);
void sigmoid(std::span<const Real> x, std::span<Real> out);
void softplus(std::span<const Real> x, std::span<Real> out);

}  // namespace m3::numcore::vec
