#include "m3/agent/sac.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "m3/numcore/ops.hpp"

namespace m3::agent {

using namespace numcore;
using env::kActLen;
using env::kObsLen;

namespace {

constexpr Real kHalfLog2Pi = 0.91893853320467274178;

backbone::BackboneConfig with_head(backbone::BackboneConfig c, std::int64_t out) {
  c.head_out = out;
  return c;
}

std::vector<backbone::Backbone> make_critics(const backbone::BackboneConfig& net, std::uint64_t seed) {
  std::vector<backbone::Backbone> out;
  for (std::uint64_t i = 0; i < 2; ++i) out.emplace_back(with_head(net, 1), seed * 7 + 2 + i);
  return out;
}

std::vector<Tensor> joined_parameters(const std::vector<backbone::Backbone>& nets) {
  std::vector<Tensor> out;
  for (const auto& n : nets) {
    auto p = n.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

// Stops gradient bookkeeping for a set of leaves while alive.
class Freeze {
public:
  explicit Freeze(std::vector<Tensor> params) : params_(std::move(params)) {
    for (auto& p : params_) p.set_requires_grad(false);
  }
  ~Freeze() {
    for (auto& p : params_) p.set_requires_grad(true);
  }
  Freeze(const Freeze&) = delete;
  Freeze& operator=(const Freeze&) = delete;

private:
  std::vector<Tensor> params_;
};

Tensor noise(Rng& rng, std::int64_t rows) {
  auto t = Tensor::zeros({rows, kActLen});
  for (auto& v : t.mutable_data()) v = rng.normal();
  return t;
}

// log(1 - tanh(u)^2) in a form that stays finite for large |u|.
Tensor log_squash_jacobian(const Tensor& u) { return (-u - softplus(u * -2.0) + std::numbers::ln2) * 2.0; }

void check_finite(Real v, const char* what, std::int64_t update) {
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << "non-finite " << what << " (" << v << ") at update " << update;
    throw NumericError(os.str());
  }
}

}  // namespace

void SacConfig::validate() const {
  if (!(discount > 0 && discount < 1)) throw std::invalid_argument("discount must lie in (0, 1)");
  if (!(tau > 0 && tau <= 1)) throw std::invalid_argument("tau must lie in (0, 1]");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (!(log_std_min < log_std_max)) throw std::invalid_argument("log-std bounds are inverted");
  if (!(initial_alpha > 0)) throw std::invalid_argument("initial temperature must be positive");
  if (fixed_alpha && !(*fixed_alpha >= 0)) throw std::invalid_argument("fixed temperature must be non-negative");
  network.validate();
}

Batch make_batch(std::span<const env::Transition* const> rows) {
  const auto b = static_cast<std::int64_t>(rows.size());
  if (b == 0) throw std::invalid_argument("empty batch");
  std::vector<Real> obs, act, rew, next, done;
  obs.reserve(static_cast<std::size_t>(b * kObsLen));
  next.reserve(obs.capacity());
  act.reserve(static_cast<std::size_t>(b * kActLen));
  for (const auto* t : rows) {
    if (t->obs.size() != kObsLen || t->next_obs.size() != kObsLen || t->action.size() != kActLen) {
      throw std::invalid_argument("transition is not packed to the fixed lengths");
    }
    obs.insert(obs.end(), t->obs.begin(), t->obs.end());
    next.insert(next.end(), t->next_obs.begin(), t->next_obs.end());
    act.insert(act.end(), t->action.begin(), t->action.end());
    rew.push_back(t->reward);
    done.push_back(t->done ? 1.0 : 0.0);
  }
  return {Tensor::from({b, kObsLen}, std::move(obs)), Tensor::from({b, kActLen}, std::move(act)),
          Tensor::from({b, 1}, std::move(rew)), Tensor::from({b, kObsLen}, std::move(next)),
          Tensor::from({b, 1}, std::move(done))};
}

Tensor action_mask(const Tensor& obs) {
  const auto b = obs.dim(0);
  std::vector<Real> m(static_cast<std::size_t>(b * kActLen), 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    const auto id = env::circuit_from_observation(obs.data().subspan(static_cast<std::size_t>(i * kObsLen), kObsLen));
    if (!id) throw std::invalid_argument("observation row " + std::to_string(i) + " has no valid circuit one-hot");
    const int n = circuits::circuit(*id).n_params();
    for (int j = 0; j < n; ++j) m[static_cast<std::size_t>(i * kActLen + j)] = 1.0;
  }
  return Tensor::from({b, kActLen}, std::move(m));
}

SacAgent::SacAgent(SacConfig config, std::uint64_t seed)
    : config_((config.validate(), std::move(config))),
      rng_(seed),
      actor_(with_head(config_.network, 2 * kActLen), seed * 7 + 1),
      critics_(make_critics(config_.network, seed)),
      targets_(make_critics(config_.network, seed)),
      log_alpha_(Tensor::full({1}, std::log(config_.fixed_alpha ? std::max(*config_.fixed_alpha, 1e-300)
                                                                 : config_.initial_alpha),
                              true)),
      actor_opt_(actor_.parameters(), {.learning_rate = config_.actor_lr}),
      critic_opt_(joined_parameters(critics_), {.learning_rate = config_.critic_lr}),
      alpha_opt_({log_alpha_}, {.learning_rate = config_.alpha_lr}) {}

Real SacAgent::alpha() const {
  if (config_.fixed_alpha) return *config_.fixed_alpha;
  return std::exp(log_alpha_.item());
}

std::pair<Tensor, Tensor> SacAgent::head(const Tensor& obs) {
  const auto out = actor_.forward(obs);
  return {slice_cols(out, 0, kActLen), clamp(slice_cols(out, kActLen, kActLen), config_.log_std_min, config_.log_std_max)};
}

PolicySample SacAgent::sample(const Tensor& obs) {
  const auto mask = action_mask(obs);
  auto [mu, log_std] = head(obs);
  const auto eps = noise(rng_, obs.dim(0));
  const auto u = mu + exp(log_std) * eps;
  const auto per_slot = (square(eps) * -0.5) - log_std - kHalfLog2Pi - log_squash_jacobian(u);
  return {tanh(u) * mask, sum_cols(per_slot * mask)};
}

Tensor SacAgent::log_prob(const Tensor& obs, const Tensor& action) {
  const auto mask = action_mask(obs);
  for (std::int64_t i = 0; i < action.numel(); ++i) {
    if (mask.data()[i] != 0 && !(std::abs(action.data()[i]) < 1)) {
      throw std::domain_error("log_prob undefined for |a| >= 1 (slot " + std::to_string(i % kActLen) + ")");
    }
  }
  const auto a = action * mask;
  const auto u = (log(a + 1.0) - log(-a + 1.0)) * 0.5;
  auto [mu, log_std] = head(obs);
  const auto z = (u - mu) / exp(log_std);
  const auto per_slot = (square(z) * -0.5) - log_std - kHalfLog2Pi - log_squash_jacobian(u);
  return sum_cols(per_slot * mask);
}

Real SacAgent::log_prob(std::span<const Real> obs, std::span<const Real> action) {
  NoGradGuard guard;
  return log_prob(Tensor::from({1, kObsLen}, {obs.begin(), obs.end()}),
                  Tensor::from({1, kActLen}, {action.begin(), action.end()}))
      .item();
}

Tensor SacAgent::act_batch(const Tensor& obs, bool deterministic) {
  NoGradGuard guard;
  if (!deterministic) return sample(obs).action;
  const auto mask = action_mask(obs);
  return tanh(head(obs).first) * mask;
}

std::vector<Real> SacAgent::act(std::span<const Real> obs, bool deterministic) {
  if (obs.size() != kObsLen) throw std::invalid_argument("observation must be packed to " + std::to_string(kObsLen));
  const auto a = act_batch(Tensor::from({1, kObsLen}, {obs.begin(), obs.end()}), deterministic);
  return {a.data().begin(), a.data().end()};
}

Tensor SacAgent::critic_input(const Tensor& obs, const Tensor& action) const { return concat_cols({obs, action}); }

Tensor SacAgent::q_min(const Tensor& obs, const Tensor& action, bool target) {
  auto& nets = target ? targets_ : critics_;
  const auto x = critic_input(obs, action);
  return minimum(nets[0].forward(x), nets[1].forward(x));
}

Tensor SacAgent::critic_target(const Batch& batch) {
  NoGradGuard guard;
  const auto next = sample(batch.next_obs);
  const auto soft_q = q_min(batch.next_obs, next.action, true) - next.log_prob * alpha();
  return batch.reward + (-batch.done + 1.0) * soft_q * config_.discount;
}

UpdateStats SacAgent::update(const Batch& batch) {
  UpdateStats stats;
  const Real alpha_now = alpha();

  const auto y = critic_target(batch);
  const auto x = critic_input(batch.obs, batch.action);
  const auto q1 = critics_[0].forward(x);
  const auto q2 = critics_[1].forward(x);
  const auto critic_loss = mean(square(q1 - y)) + mean(square(q2 - y));
  stats.critic_loss = critic_loss.item();
  check_finite(stats.critic_loss, "critic loss", updates_);
  stats.mean_q = (mean(q1).item() + mean(q2).item()) / 2;
  critic_opt_.zero_grad();
  critic_loss.backward();
  clip_global_norm(critic_opt_.params(), config_.grad_clip);
  critic_opt_.step();

  // Actor: reparameterized objective against frozen critics.
  PolicySample pi;
  {
    Freeze freeze(critic_opt_.params());
    pi = sample(batch.obs);
    const auto actor_loss = mean(pi.log_prob * alpha_now - q_min(batch.obs, pi.action, false));
    stats.actor_loss = actor_loss.item();
    check_finite(stats.actor_loss, "actor loss", updates_);
    actor_opt_.zero_grad();
    actor_loss.backward();
  }
  clip_global_norm(actor_opt_.params(), config_.grad_clip);
  actor_opt_.step();

  // Temperature: per-sample entropy target is minus the valid action count.
  if (!config_.fixed_alpha) {
    std::vector<Real> shifted(static_cast<std::size_t>(batch.size()));
    const auto mask = action_mask(batch.obs);
    for (std::int64_t i = 0; i < batch.size(); ++i) {
      Real valid = 0;
      for (int j = 0; j < kActLen; ++j) valid += mask.data()[i * kActLen + j];
      shifted[i] = pi.log_prob.data()[i] - valid;
    }
    const auto target = Tensor::from({batch.size(), 1}, std::move(shifted));
    const auto alpha_loss = -mean(log_alpha_ * target);
    stats.alpha_loss = alpha_loss.item();
    check_finite(stats.alpha_loss, "temperature loss", updates_);
    alpha_opt_.zero_grad();
    alpha_loss.backward();
    alpha_opt_.step();
  }
  stats.alpha = alpha();

  for (int i = 0; i < 2; ++i) targets_[i].soft_update_from(critics_[i], config_.tau);
  ++updates_;
  return stats;
}

void SacAgent::save(backbone::Checkpoint& ck, const std::string& prefix) const {
  ck.add_module(prefix + "actor.", actor_.named_parameters());
  for (int i = 0; i < 2; ++i) {
    ck.add_module(prefix + "critic" + std::to_string(i) + ".", critics_[i].named_parameters());
    ck.add_module(prefix + "target" + std::to_string(i) + ".", targets_[i].named_parameters());
  }
  ck.add(prefix + "log_alpha", {1}, log_alpha_.data());
  ck.add_optimizer(prefix + "actor_opt", actor_opt_);
  ck.add_optimizer(prefix + "critic_opt", critic_opt_);
  ck.add_optimizer(prefix + "alpha_opt", alpha_opt_);
  ck.meta["agent"] = {{"updates", updates_}, {"prefix", prefix}};
}

void SacAgent::load(const backbone::Checkpoint& ck, const std::string& prefix) {
  ck.load_module(prefix + "actor.", actor_.named_parameters());
  for (int i = 0; i < 2; ++i) {
    ck.load_module(prefix + "critic" + std::to_string(i) + ".", critics_[i].named_parameters());
    ck.load_module(prefix + "target" + std::to_string(i) + ".", targets_[i].named_parameters());
  }
  log_alpha_.mutable_data()[0] = ck.get(prefix + "log_alpha").values.at(0);
  ck.load_optimizer(prefix + "actor_opt", actor_opt_);
  ck.load_optimizer(prefix + "critic_opt", critic_opt_);
  ck.load_optimizer(prefix + "alpha_opt", alpha_opt_);
  if (ck.meta.contains("agent")) updates_ = ck.meta["agent"].value("updates", std::int64_t{0});
}

}  // namespace m3::agent
