#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m3/backbone/backbone.hpp"
#include "m3/backbone/checkpoint.hpp"
#include "m3/env/env.hpp"
#include "m3/numcore/optim.hpp"

namespace m3::agent {

using numcore::Real;
using numcore::Tensor;

struct SacConfig {
  Real discount = 0.99;
  Real tau = 0.005;
  Real actor_lr = 3e-4;
  Real critic_lr = 3e-4;
  Real alpha_lr = 3e-4;
  std::int64_t batch_size = 256;
  Real log_std_min = -20;
  Real log_std_max = 2;
  Real grad_clip = 1.0;
  Real initial_alpha = 0.2;
  // When set, the temperature stays at this value and is not learned.
  std::optional<Real> fixed_alpha;
  backbone::BackboneConfig network;

  void validate() const;
};

// Tensors of one training batch, rows aligned.
struct Batch {
  Tensor obs;       // [b, kObsLen]
  Tensor action;    // [b, kActLen]
  Tensor reward;    // [b, 1]
  Tensor next_obs;  // [b, kObsLen]
  Tensor done;      // [b, 1], 1 for terminal transitions
  std::int64_t size() const { return obs.defined() ? obs.dim(0) : 0; }
};

Batch make_batch(std::span<const env::Transition* const> rows);

// Valid action slots selected by each observation's one-hot: [b, kActLen]
// with 1 for slots below the circuit's parameter count.
Tensor action_mask(const Tensor& obs);

struct PolicySample {
  Tensor action;    // [b, kActLen], padded slots exactly 0
  Tensor log_prob;  // [b, 1], valid slots only
};

struct UpdateStats {
  Real critic_loss = 0;
  Real actor_loss = 0;
  Real alpha_loss = 0;
  Real alpha = 0;
  Real mean_q = 0;
};

// Soft actor-critic over sequence backbones. The actor reads the packed
// observation as a token sequence; each critic reads observation then action.
class SacAgent {
public:
  SacAgent(SacConfig config, std::uint64_t seed);

  const SacConfig& config() const { return config_; }

  // Single observation, packed action out.
  std::vector<Real> act(std::span<const Real> obs, bool deterministic);
  // Batched form used by model rollouts: obs [b, kObsLen] -> [b, kActLen].
  Tensor act_batch(const Tensor& obs, bool deterministic);

  // Reparameterized squashed-Gaussian sample; differentiable w.r.t. the actor.
  PolicySample sample(const Tensor& obs);
  // Log-density of given actions. Throws std::domain_error when a valid slot
  // has |a| >= 1.
  Tensor log_prob(const Tensor& obs, const Tensor& action);
  Real log_prob(std::span<const Real> obs, std::span<const Real> action);

  // Twin-critic minimum for a batch: [b, 1].
  Tensor q_min(const Tensor& obs, const Tensor& action, bool target);

  // Clipped double-Q soft Bellman target r + gamma (1 - done) (min Q' - alpha log pi).
  Tensor critic_target(const Batch& batch);
  // One critic, actor, temperature and target step.
  UpdateStats update(const Batch& batch);

  Real alpha() const;
  std::int64_t update_count() const { return updates_; }

  backbone::Backbone& actor() { return actor_; }
  backbone::Backbone& critic(int i) { return critics_[i]; }
  backbone::Backbone& target_critic(int i) { return targets_[i]; }
  Tensor& log_alpha() { return log_alpha_; }

  void save(backbone::Checkpoint& ck, const std::string& prefix) const;
  void load(const backbone::Checkpoint& ck, const std::string& prefix);

private:
  Tensor critic_input(const Tensor& obs, const Tensor& action) const;
  // Gaussian head split into mean and clamped log-std.
  std::pair<Tensor, Tensor> head(const Tensor& obs);

  SacConfig config_;
  numcore::Rng rng_;
  backbone::Backbone actor_;
  std::vector<backbone::Backbone> critics_;
  std::vector<backbone::Backbone> targets_;
  Tensor log_alpha_;
  numcore::Adam actor_opt_;
  numcore::Adam critic_opt_;
  numcore::Adam alpha_opt_;
  std::int64_t updates_ = 0;
};

}  // namespace m3::agent
