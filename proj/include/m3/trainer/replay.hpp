#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "m3/env/env.hpp"
#include "m3/numcore/random.hpp"

namespace m3::trainer {

// Fixed-capacity ring of transitions. Once full, each push overwrites the
// oldest row.
class ReplayBuffer {
public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(env::Transition t);
  // Drops every row; with a nonzero argument also changes the capacity.
  void clear(std::size_t capacity = 0);

  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  std::size_t capacity() const { return capacity_; }
  std::int64_t inserted() const { return inserted_; }

  // Row i in insertion order, 0 being the oldest still held.
  const env::Transition& at(std::size_t i) const;
  // Storage order; equals insertion order until the ring wraps.
  std::span<const env::Transition> rows() const { return rows_; }

  // Appends k distinct rows drawn uniformly (Floyd's algorithm). Throws
  // std::invalid_argument when k exceeds the size.
  void sample(std::size_t k, numcore::Rng& rng, std::vector<const env::Transition*>& out) const;

private:
  std::size_t capacity_;
  std::vector<env::Transition> rows_;
  std::size_t head_ = 0;  // next slot to overwrite once full
  std::int64_t inserted_ = 0;
};

}  // namespace m3::trainer
