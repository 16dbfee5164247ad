#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3/agent/sac.hpp"
#include "m3/backbone/backbone.hpp"
#include "m3/backbone/checkpoint.hpp"
#include "m3/env/env.hpp"
#include "m3/numcore/optim.hpp"
#include "m3/numcore/random.hpp"

namespace m3::worldmodel {

using numcore::Real;
using numcore::Tensor;

inline constexpr int kInputLen = env::kObsLen + env::kActLen;  // obs then action
inline constexpr int kTargetLen = env::kObsLen + 1;            // obs delta then reward
inline constexpr Real kDoneEpsilon = 1e-6;

struct EnsembleConfig {
  int members = 7;
  int elites = 5;
  Real val_ratio = 0.2;
  int patience = 5;
  Real learning_rate = 3e-4;
  Real min_rel_improvement = 1e-3;
  int max_epochs = 200;
  std::int64_t batch_size = 256;
  // 0 runs a full pass over the training split each epoch.
  std::int64_t max_batches_per_epoch = 0;
  // Soft bounds on the learned log-variance (normalized target units).
  Real logvar_min = -10;
  Real logvar_max = 0.5;
  // head_out is overridden with kTargetLen.
  backbone::BackboneConfig network;

  void validate() const;
};

// Indices of the n smallest losses, ascending; equal losses keep index order.
std::vector<int> select_elites(std::span<const Real> losses, int n);

// Stops after `patience` consecutive epochs whose loss fails to beat the best
// so far by at least `min_rel` of its magnitude.
class EarlyStopper {
public:
  EarlyStopper(int patience, Real min_rel);

  // Records one epoch; returns true when it counts as an improvement.
  bool update(Real loss);
  bool should_stop() const { return stale_ >= patience_; }
  Real best() const { return best_; }
  int stale_epochs() const { return stale_; }
  int epochs() const { return epochs_; }

private:
  int patience_;
  Real min_rel_;
  Real best_;
  int stale_ = 0;
  int epochs_ = 0;
};

// Per-position affine standardization with a floor on the spread, so
// constant positions (padding, one-hot) map to zero.
struct Normalizer {
  std::vector<Real> mean;
  std::vector<Real> stddev;

  static Normalizer fit(std::span<const std::vector<Real>> rows, std::size_t width);
  bool fitted() const { return !mean.empty(); }
  void apply(std::span<Real> row) const;
  void invert(std::span<Real> row) const;
};

struct TrainReport {
  std::vector<Real> val_losses;  // best validation loss per member
  std::vector<int> epochs;       // epochs run per member
  std::vector<int> elites;
  Real mean_elite_loss = 0;
};

struct Prediction {
  std::vector<Real> next_obs;
  Real reward = 0;
};

// One synthetic rollout's output, grouped by start state order then step.
struct RolloutResult {
  std::vector<env::Transition> transitions;
  std::int64_t terminated = 0;  // rows stopped by a predicted success
};

// Input and target rows for the ensemble from stored transitions.
std::vector<Real> model_input(std::span<const Real> obs, std::span<const Real> action);
std::vector<Real> model_target(const env::Transition& t);

// Restores packing invariants on a predicted observation given the input it
// came from: one-hot and target entries copied, padding zeroed, parameters
// clamped to [0, 1].
void project_observation(std::span<const Real> current, std::span<Real> predicted);

// Probabilistic ensemble of backbone dynamics models. Each member maps the
// packed obs-action sequence to a diagonal Gaussian over (obs delta, reward)
// in normalized units; the mean comes from the network and the log-variance
// is a learned vector per output.
class Ensemble {
public:
  Ensemble(EnsembleConfig config, std::uint64_t seed);

  const EnsembleConfig& config() const { return config_; }
  int size() const { return static_cast<int>(members_.size()); }

  // Fits normalizers on `data`, trains every member (warm start) with early
  // stopping and best-weight restore, then selects elites. Throws
  // std::invalid_argument when data holds fewer than 10 batches.
  TrainReport train(std::span<const env::Transition> data);

  bool trained() const { return !elites_.empty(); }
  const std::vector<int>& elites() const { return elites_; }
  const std::vector<Real>& val_losses() const { return val_losses_; }

  // Batched prediction for one member: obs [b, kObsLen], action [b, kActLen].
  // Returns [b, kTargetLen] rows (projected next obs, reward). With
  // `sample` false the Gaussian mean is returned.
  Tensor predict_batch(const Tensor& obs, const Tensor& action, int member, bool sample = true);
  Prediction predict(std::span<const Real> obs, std::span<const Real> action, int member, bool sample = true);

  // Mean of the normalized validation MSE over `data` for one member.
  Real validation_loss(int member, std::span<const env::Transition* const> rows);

  // Synthetic rollouts of up to `horizon` steps from each start observation.
  // Actions come from the stochastic actor; every row draws its elite
  // uniformly at every step.
  RolloutResult rollout(agent::SacAgent& actor, std::span<const std::vector<Real>> starts, int horizon);

  // Learned output variance in raw target units for one member.
  std::vector<Real> output_variance(int member) const;

  backbone::Backbone& network(int member) { return members_.at(static_cast<std::size_t>(member)).net; }
  Tensor& raw_logvar(int member) { return members_.at(static_cast<std::size_t>(member)).raw_logvar; }
  const Normalizer& input_normalizer() const { return in_norm_; }
  const Normalizer& target_normalizer() const { return out_norm_; }
  numcore::Rng& rng() { return rng_; }

  void save(backbone::Checkpoint& ck, const std::string& prefix) const;
  void load(const backbone::Checkpoint& ck, const std::string& prefix);

private:
  struct Member {
    Member(const backbone::BackboneConfig& cfg, std::uint64_t seed, Real lr);
    backbone::Backbone net;
    Tensor raw_logvar;  // [kTargetLen]
    numcore::Adam opt;
    numcore::Rng rng;
    std::vector<Tensor> params() const;
  };

  Tensor logvar(const Member& m) const;
  // Normalized inputs for the given rows: [b, kInputLen].
  Tensor inputs(std::span<const env::Transition* const> rows) const;
  Tensor targets(std::span<const env::Transition* const> rows) const;
  Real train_member(int k, std::span<const env::Transition> data, TrainReport& report);
  void refit_logvar(Member& m, std::span<const env::Transition* const> rows);

  EnsembleConfig config_;
  std::vector<Member> members_;
  Normalizer in_norm_;
  Normalizer out_norm_;
  std::vector<Real> val_losses_;
  std::vector<int> elites_;
  numcore::Rng rng_;
};

}  // namespace m3::worldmodel
