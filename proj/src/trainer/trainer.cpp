#include "m3/trainer/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "m3/backbone/checkpoint.hpp"

namespace m3::trainer {

namespace {

using env::Transition;

// splitmix64 finalizer; gives every component its own stream from one seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

enum Salt : std::uint64_t { kEnvSalt = 1, kAgentSalt, kModelSalt, kLoopSalt, kEvalSalt };

schedule::Schedule make_schedule(const RunConfig& c) {
  if (c.mode == Mode::MbrlFixed) return schedule::Schedule::fixed(c.fixed_alpha, c.fixed_rollouts, c.fixed_updates);
  return schedule::Schedule(c.schedule);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

std::shared_ptr<circuits::Simulator> require_sim(std::shared_ptr<circuits::Simulator> sim) {
  if (!sim) throw std::invalid_argument("trainer needs a simulator");
  return sim;
}

std::string format_real(Real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string_view mode_name(Mode mode) {
  switch (mode) {
    case Mode::M3: return "m3";
    case Mode::MfrlMamba: return "mfrl_mamba";
    case Mode::MbrlFixed: return "mbrl_fixed";
  }
  return "?";
}

std::optional<Mode> parse_mode(std::string_view name) {
  for (Mode m : kAllModes) {
    if (mode_name(m) == name) return m;
  }
  return std::nullopt;
}

void RunConfig::validate() const {
  require(t_max > 0 && t_model > 0 && t_ro > 0 && n_initial > 0, "step counts must be positive");
  require(eval_every > 0 && eval_episodes > 0, "evaluation settings must be positive");
  require(rollout_starts > 0 && real_capacity > 0, "buffer settings must be positive");
  require(t_ep == env::kEpisodeLen, "episode length is fixed at " + std::to_string(env::kEpisodeLen));
  require(real_capacity >= static_cast<std::size_t>(n_initial), "real buffer must hold the exploration data");
  require(n_initial >= sac.batch_size, "exploration must collect at least one agent batch");
  require(fixed_alpha >= 0 && fixed_alpha <= 1, "fixed alpha must lie in [0, 1]");
  require(fixed_rollouts >= 1 && fixed_updates >= 0, "fixed rollout and update counts out of range");
  schedule.validate();
  sac.validate();
  if (mode != Mode::MfrlMamba) {
    model.validate();
    require(n_initial + t_model >= 10 * model.batch_size,
            "the first model training needs at least 10 model batches of real data");
  }
}

BatchSplit batch_split(Real alpha, std::int64_t batch) {
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("alpha must lie in [0, 1]");
  // nearbyint honours the default rounding mode, round-half-to-even.
  const auto real = static_cast<std::int64_t>(std::nearbyint(alpha * static_cast<Real>(batch)));
  return {real, batch - real};
}

std::vector<std::vector<EvalEpisode>> make_eval_set(std::uint64_t seed, std::int64_t episodes) {
  numcore::Rng rng(seed);
  std::vector<std::vector<EvalEpisode>> set;
  for (auto id : circuits::kAllCircuits) {
    const auto& def = circuits::circuit(id);
    auto& list = set.emplace_back();
    for (std::int64_t e = 0; e < episodes; ++e) {
      EvalEpisode ep;
      ep.targets = circuits::sample_target(def, rng).values;
      ep.params.resize(static_cast<std::size_t>(def.n_params()));
      for (auto& p : ep.params) p = rng.uniform(0, 1);
      list.push_back(std::move(ep));
    }
  }
  return set;
}

std::uint64_t eval_set_seed(std::uint64_t run_seed) { return derive_seed(run_seed, kEvalSalt); }

std::vector<EvalRow> evaluate(agent::SacAgent& actor, const std::shared_ptr<circuits::Simulator>& sim,
                              const std::vector<std::vector<EvalEpisode>>& set, std::int64_t* steps) {
  return evaluate([&](const numcore::Tensor& obs) { return actor.act_batch(obs, true); }, sim, set, steps);
}

std::vector<EvalRow> evaluate(const BatchPolicy& policy, const std::shared_ptr<circuits::Simulator>& sim,
                              const std::vector<std::vector<EvalEpisode>>& set, std::int64_t* steps) {
  if (set.size() != circuits::kAllCircuits.size()) throw std::invalid_argument("evaluation set needs every circuit");

  struct Episode {
    std::size_t circuit;
    env::CircuitEnv env;
    std::vector<Real> obs;
    Real reward = 0;
    int length = 0;
    bool success = false;
  };
  std::vector<Episode> eps;
  for (std::size_t c = 0; c < set.size(); ++c) {
    for (const auto& spec : set[c]) {
      Episode e{c, env::CircuitEnv(sim, 0), {}};
      e.obs = e.env.reset_to(circuits::kAllCircuits[c], spec.targets, spec.params);
      eps.push_back(std::move(e));
    }
  }

  std::vector<std::size_t> active(eps.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  while (!active.empty()) {
    std::vector<Real> packed;
    packed.reserve(active.size() * env::kObsLen);
    for (auto i : active) packed.insert(packed.end(), eps[i].obs.begin(), eps[i].obs.end());
    const auto actions = policy(numcore::Tensor::from({static_cast<std::int64_t>(active.size()), env::kObsLen}, packed));
    std::vector<std::size_t> still;
    for (std::size_t k = 0; k < active.size(); ++k) {
      auto& e = eps[active[k]];
      const auto res = e.env.step(actions.data().subspan(k * env::kActLen, env::kActLen));
      if (steps) ++*steps;
      e.reward += res.reward;
      ++e.length;
      e.obs = res.obs;
      if (res.done()) {
        e.success = res.terminal;
      } else {
        still.push_back(active[k]);
      }
    }
    active = std::move(still);
  }

  std::vector<EvalRow> rows;
  for (std::size_t c = 0; c < set.size(); ++c) {
    EvalRow row;
    row.circuit = circuits::kAllCircuits[c];
    int n = 0;
    for (const auto& e : eps) {
      if (e.circuit != c) continue;
      row.mean_ep_reward += e.reward;
      row.mean_ep_len += e.length;
      row.success_rate += e.success ? 1 : 0;
      ++n;
    }
    if (n > 0) {
      row.mean_ep_reward /= n;
      row.mean_ep_len /= n;
      row.success_rate /= n;
    }
    rows.push_back(row);
  }
  return rows;
}

bool solved(const std::vector<EvalRow>& rows) {
  if (rows.empty()) return false;
  for (const auto& r : rows) {
    if (r.mean_ep_reward < 0 || r.mean_ep_len > 25) return false;
  }
  return true;
}

void write_metrics_header(std::ostream& out) { out << kMetricsHeader << '\n'; }

void write_metrics_row(std::ostream& out, const MetricsRow& row) {
  out << row.t << ',' << circuits::circuit_name(row.eval.circuit) << ',' << format_real(row.eval.mean_ep_reward)
      << ',' << format_real(row.eval.mean_ep_len) << ',' << format_real(row.eval.success_rate) << ','
      << format_real(row.alpha) << ',' << row.t_a << ',' << row.r << ',' << format_real(row.model_val_loss) << ','
      << format_real(row.actor_loss) << ',' << format_real(row.critic_loss) << ',' << format_real(row.temperature)
      << '\n';
}

Trainer::Trainer(RunConfig config, std::shared_ptr<circuits::Simulator> sim)
    : config_((config.validate(), std::move(config))),
      sim_(require_sim(std::move(sim))),
      schedule_(make_schedule(config_)),
      env_(sim_, derive_seed(config_.seed, kEnvSalt)),
      agent_(config_.sac, derive_seed(config_.seed, kAgentSalt)),
      real_(config_.real_capacity),
      rng_(derive_seed(config_.seed, kLoopSalt)),
      eval_set_(make_eval_set(eval_set_seed(config_.seed), config_.eval_episodes)),
      model_val_loss_(std::nan("")) {
  if (config_.mode != Mode::MfrlMamba) {
    model_ = std::make_unique<worldmodel::Ensemble>(config_.model, derive_seed(config_.seed, kModelSalt));
    sync_ = std::make_unique<ReplayBuffer>(static_cast<std::size_t>(config_.rollout_starts));
  }
}

Real Trainer::alpha(std::int64_t t) const { return config_.mode == Mode::MfrlMamba ? 1.0 : schedule_.alpha(t); }
std::int64_t Trainer::t_a(std::int64_t t) const { return schedule_.t_a(t); }
std::int64_t Trainer::r(std::int64_t t) const { return config_.mode == Mode::MfrlMamba ? 0 : schedule_.r(t); }

void Trainer::log(const std::string& line) {
  if (log_) *log_ << line << '\n' << std::flush;
}

void Trainer::env_step(const std::vector<Real>& action) {
  if (episode_over_) {
    obs_ = env_.reset();
    episode_over_ = false;
  }
  auto res = env_.step(action);
  ++stats_.real_steps;
  Transition tr;
  tr.obs = std::move(obs_);
  tr.action = action;
  tr.reward = res.reward;
  tr.next_obs = res.obs;
  tr.done = res.terminal;
  real_.push(std::move(tr));
  obs_ = std::move(res.obs);
  episode_over_ = res.done();
}

void Trainer::explore() {
  if (explored_ || t_ != 0) throw std::logic_error("exploration runs once, before training");
  for (std::int64_t i = 0; i < config_.n_initial; ++i) {
    if (episode_over_) {
      obs_ = env_.reset();
      episode_over_ = false;
    }
    // Uniform over the valid slots; padding stays zero like policy actions.
    std::vector<Real> action(env::kActLen, 0.0);
    for (int j = 0; j < env_.current().n_params(); ++j) action[static_cast<std::size_t>(j)] = rng_.uniform(-1, 1);
    env_step(action);
  }
  explored_ = true;
}

void Trainer::retrain_model() {
  const auto report = model_->train(real_.rows());
  model_val_loss_ = report.mean_elite_loss;
  ++stats_.model_trainings;
  log("t=" + std::to_string(t_) + " model retrained, elite val loss " + format_real(model_val_loss_));
}

void Trainer::fill_sync(bool rebuild) {
  if (!model_ || !model_->trained()) return;
  const auto horizon = static_cast<int>(r(t_));
  if (rebuild) {
    sync_->clear(static_cast<std::size_t>(config_.rollout_starts * horizon));
    ++stats_.sync_rebuilds;
  }
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(config_.rollout_starts), real_.size());
  std::vector<const Transition*> picks;
  real_.sample(n, rng_, picks);
  std::vector<std::vector<Real>> starts;
  starts.reserve(n);
  for (const auto* p : picks) starts.push_back(p->obs);
  auto result = model_->rollout(agent_, starts, horizon);
  stats_.synthetic_rows += static_cast<std::int64_t>(result.transitions.size());
  for (auto& tr : result.transitions) sync_->push(std::move(tr));
  warned_fallback_ = false;
}

void Trainer::update_agent() {
  const auto b = config_.sac.batch_size;
  BatchSplit split = config_.mode == Mode::MfrlMamba ? BatchSplit{b, 0} : batch_split(alpha(t_), b);
  if (split.synthetic > 0) {
    if (!sync_ || sync_->empty()) {
      ++stats_.fallback_batches;
      if (!warned_fallback_) {
        log("warning: t=" + std::to_string(t_) + " synthetic buffer is empty, using all-real batches");
        warned_fallback_ = true;
      }
      split = {b, 0};
    } else if (static_cast<std::size_t>(split.synthetic) > sync_->size()) {
      // Fewer synthetic rows than requested: the rest come from real data.
      split.synthetic = static_cast<std::int64_t>(sync_->size());
      split.real = b - split.synthetic;
    }
  }
  std::vector<const Transition*> rows;
  rows.reserve(static_cast<std::size_t>(b));
  real_.sample(static_cast<std::size_t>(split.real), rng_, rows);
  if (split.synthetic > 0) sync_->sample(static_cast<std::size_t>(split.synthetic), rng_, rows);
  const auto s = agent_.update(agent::make_batch(rows));
  ++stats_.agent_updates;
  ++since_eval_;
  sum_actor_ += s.actor_loss;
  sum_critic_ += s.critic_loss;
  last_temperature_ = s.alpha;
}

void Trainer::step() {
  if (!explored_) throw std::logic_error("explore() must run before training steps");
  if (t_ >= config_.t_max) throw std::logic_error("run already reached T_max");
  ++t_;
  bool retrained = false;
  if (model_ && t_ % config_.t_model == 0) {
    retrain_model();
    retrained = true;
  }
  // A retrain alone adds its rollout to the current buffer; a rollout tick
  // rebuilds it from scratch.
  if (model_ && t_ % config_.t_ro == 0) {
    fill_sync(true);
  } else if (retrained) {
    fill_sync(false);
  }

  if (episode_over_) {
    obs_ = env_.reset();
    episode_over_ = false;
  }
  env_step(agent_.act(obs_, false));

  const auto updates = t_a(t_);
  for (std::int64_t i = 0; i < updates; ++i) update_agent();
}

std::vector<EvalRow> Trainer::evaluate_now() {
  const auto rows = evaluate(agent_, sim_, eval_set_, &stats_.eval_steps);
  const Real nan = std::nan("");
  for (const auto& e : rows) {
    MetricsRow m;
    m.t = t_;
    m.eval = e;
    m.alpha = alpha(t_);
    m.t_a = t_a(t_);
    m.r = r(t_);
    m.model_val_loss = model_val_loss_;
    m.actor_loss = since_eval_ > 0 ? sum_actor_ / static_cast<Real>(since_eval_) : nan;
    m.critic_loss = since_eval_ > 0 ? sum_critic_ / static_cast<Real>(since_eval_) : nan;
    m.temperature = since_eval_ > 0 ? last_temperature_ : agent_.alpha();
    metrics_.push_back(m);
  }
  sum_actor_ = sum_critic_ = 0;
  since_eval_ = 0;
  if (!stats_.solved_at && solved(rows)) stats_.solved_at = t_;

  if (!config_.out_dir.empty()) {
    std::filesystem::create_directories(config_.out_dir);
    std::ofstream out(config_.out_dir / "metrics.csv", std::ios::trunc);
    out << metrics_csv();
    if (!out) throw std::runtime_error("cannot write metrics to " + config_.out_dir.string());
    save_checkpoint(config_.out_dir / "checkpoint.m3ckpt");
  }
  return rows;
}

std::string Trainer::metrics_csv() const {
  std::ostringstream out;
  write_metrics_header(out);
  for (const auto& m : metrics_) write_metrics_row(out, m);
  return out.str();
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  backbone::Checkpoint ck;
  agent_.save(ck, "agent.");
  if (model_ && model_->trained()) model_->save(ck, "model.");
  const auto& n = config_.sac.network;
  ck.meta["run"] = {{"t", t_}, {"mode", mode_name(config_.mode)}, {"seed", config_.seed}};
  ck.meta["agent_network"] = {{"d_model", n.d_model}, {"d_state", n.d_state}, {"conv_width", n.conv_width},
                              {"expand", n.expand},   {"n_layers", n.n_layers}, {"dt_rank", n.dt_rank}};
  backbone::write_checkpoint(path, ck);
}

const RunStats& Trainer::run(std::ostream* log) {
  log_ = log;
  if (!explored_) {
    explore();
    this->log("explored " + std::to_string(config_.n_initial) + " random steps");
  }
  if (t_ == 0) evaluate_now();
  while (t_ < config_.t_max) {
    step();
    if (t_ % config_.eval_every == 0 || t_ == config_.t_max) {
      const auto rows = evaluate_now();
      std::string line = "t=" + std::to_string(t_);
      for (const auto& row : rows) {
        line += ' ' + std::string(circuits::circuit_name(row.circuit)) + " R=" + format_real(row.mean_ep_reward) +
                " L=" + format_real(row.mean_ep_len);
      }
      this->log(line);
    }
  }
  // Every training interaction is an exploration step or one step per t.
  if (env_.step_calls() != config_.n_initial + config_.t_max || stats_.real_steps != env_.step_calls()) {
    throw std::logic_error("real environment step count " + std::to_string(env_.step_calls()) + " != N_I + T_max");
  }
  log_ = nullptr;
  return stats_;
}

}  // namespace m3::trainer
