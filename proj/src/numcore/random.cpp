#include "m3/numcore/random.hpp"

namespace m3::numcore {

void uniform_fill(Tensor& t, Real bound, Rng& rng) {
  for (Real& v : t.mutable_data()) v = rng.uniform(-bound, bound);
}

}  // namespace m3::numcore
