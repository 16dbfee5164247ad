#include "m3/trainer/replay.hpp"

#include <stdexcept>
#include <string>
#include <unordered_set>

namespace m3::trainer {

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("replay capacity must be positive");
}

void ReplayBuffer::push(env::Transition t) {
  ++inserted_;
  if (rows_.size() < capacity_) {
    rows_.push_back(std::move(t));
    return;
  }
  rows_[head_] = std::move(t);
  head_ = (head_ + 1) % capacity_;
}

void ReplayBuffer::clear(std::size_t capacity) {
  rows_.clear();
  head_ = 0;
  if (capacity > 0) capacity_ = capacity;
}

const env::Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= rows_.size()) throw std::out_of_range("replay index " + std::to_string(i));
  return rows_[(head_ + i) % rows_.size()];
}

void ReplayBuffer::sample(std::size_t k, numcore::Rng& rng, std::vector<const env::Transition*>& out) const {
  const std::size_t n = rows_.size();
  if (k > n) {
    throw std::invalid_argument("cannot draw " + std::to_string(k) + " distinct rows from " + std::to_string(n));
  }
  std::unordered_set<std::size_t> taken;
  taken.reserve(k * 2);
  for (std::size_t j = n - k; j < n; ++j) {
    std::size_t pick = rng.index(j + 1);
    if (!taken.insert(pick).second) {
      pick = j;
      taken.insert(j);
    }
    out.push_back(&rows_[pick]);
  }
}

}  // namespace m3::trainer
