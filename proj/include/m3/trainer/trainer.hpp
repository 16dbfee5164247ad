#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "m3/agent/sac.hpp"
#include "m3/circuits/circuits.hpp"
#include "m3/env/env.hpp"
#include "m3/schedule/schedule.hpp"
#include "m3/trainer/replay.hpp"
#include "m3/worldmodel/ensemble.hpp"

namespace m3::trainer {

using numcore::Real;

enum class Mode { M3, MfrlMamba, MbrlFixed };

std::string_view mode_name(Mode mode);
std::optional<Mode> parse_mode(std::string_view name);
inline constexpr std::array<Mode, 3> kAllModes{Mode::M3, Mode::MfrlMamba, Mode::MbrlFixed};

struct RunConfig {
  Mode mode = Mode::M3;
  std::int64_t t_max = 20000;
  std::int64_t t_model = 300;
  std::int64_t t_ro = 30;
  std::int64_t n_initial = 3600;
  std::int64_t t_ep = env::kEpisodeLen;
  std::int64_t eval_every = 500;
  std::int64_t eval_episodes = 10;
  std::uint64_t seed = 0;
  // Real start states per synthetic buffer rebuild.
  std::int64_t rollout_starts = 400;
  std::size_t real_capacity = 1'000'000;

  // Used by m3 mode. mbrl_fixed uses fixed_* instead; mfrl_mamba takes
  // only the update-count ramp from here.
  schedule::ScheduleConfig schedule;
  Real fixed_alpha = 0.05;
  std::int64_t fixed_rollouts = 10;
  std::int64_t fixed_updates = 20;

  agent::SacConfig sac;
  worldmodel::EnsembleConfig model;

  // Metrics and checkpoints go here when set.
  std::filesystem::path out_dir;

  void validate() const;
};

// Real and synthetic row counts of one training batch.
struct BatchSplit {
  std::int64_t real = 0;
  std::int64_t synthetic = 0;
};

// real = round(alpha * b) with ties to even, synthetic = b - real.
BatchSplit batch_split(Real alpha, std::int64_t batch);

struct EvalRow {
  circuits::CircuitId circuit{};
  Real mean_ep_reward = 0;
  Real mean_ep_len = 0;
  Real success_rate = 0;
};

// One fixed evaluation episode: targets and initial normalized parameters.
struct EvalEpisode {
  std::vector<Real> targets;
  std::vector<Real> params;
};

// Per-circuit episode lists drawn once from `seed`, in kAllCircuits order.
std::vector<std::vector<EvalEpisode>> make_eval_set(std::uint64_t seed, std::int64_t episodes);
// Seed of the evaluation set a run with `run_seed` uses.
std::uint64_t eval_set_seed(std::uint64_t run_seed);

// Packed observations [b, kObsLen] to packed actions [b, kActLen].
using BatchPolicy = std::function<numcore::Tensor(const numcore::Tensor&)>;

// Runs every listed episode, all episodes of all circuits batched through the
// policy in lockstep. Returns one row per circuit in kAllCircuits order and
// adds the simulated steps to `steps`.
std::vector<EvalRow> evaluate(const BatchPolicy& policy, const std::shared_ptr<circuits::Simulator>& sim,
                              const std::vector<std::vector<EvalEpisode>>& set, std::int64_t* steps = nullptr);
// Same with the agent's deterministic actions.
std::vector<EvalRow> evaluate(agent::SacAgent& actor, const std::shared_ptr<circuits::Simulator>& sim,
                              const std::vector<std::vector<EvalEpisode>>& set, std::int64_t* steps = nullptr);

// All circuits meet the success bar: mean reward >= 0 and mean length <= 25.
bool solved(const std::vector<EvalRow>& rows);

struct MetricsRow {
  std::int64_t t = 0;
  EvalRow eval;
  Real alpha = 0;
  std::int64_t t_a = 0;
  std::int64_t r = 0;
  Real model_val_loss = 0;  // NaN until the ensemble is first trained
  Real actor_loss = 0;      // means over updates since the previous row group
  Real critic_loss = 0;
  Real temperature = 0;
};

inline constexpr std::string_view kMetricsHeader =
    "t,circuit,mean_ep_reward,mean_ep_len,success_rate,alpha,t_a,r,model_val_loss,actor_loss,critic_loss,"
    "temperature";

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const MetricsRow& row);

struct RunStats {
  std::int64_t real_steps = 0;     // training environment steps
  std::int64_t eval_steps = 0;     // evaluation environment steps
  std::int64_t agent_updates = 0;
  std::int64_t model_trainings = 0;
  std::int64_t sync_rebuilds = 0;
  std::int64_t synthetic_rows = 0; // transitions produced by rollouts
  std::int64_t fallback_batches = 0;
  std::optional<std::int64_t> solved_at;  // first evaluated t meeting solved()
};

// Exploration, model training, synthetic rollouts and mixed-batch agent
// updates, driven by the environment step counter t.
class Trainer {
public:
  Trainer(RunConfig config, std::shared_ptr<circuits::Simulator> sim);

  const RunConfig& config() const { return config_; }

  // N_I uniform random steps into the real buffer. Only valid once, first.
  void explore();
  // One iteration of the main loop at t = this->t() + 1.
  void step();
  // explore() if needed, then steps up to T_max with evaluations every
  // eval_every steps (and at 0 and T_max). Progress lines go to `log`.
  const RunStats& run(std::ostream* log = nullptr);

  // Evaluates the current policy, appends the metrics rows and writes a
  // checkpoint when an output directory is set.
  std::vector<EvalRow> evaluate_now();

  std::int64_t t() const { return t_; }
  Real alpha(std::int64_t t) const;
  std::int64_t t_a(std::int64_t t) const;
  std::int64_t r(std::int64_t t) const;

  const RunStats& stats() const { return stats_; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  std::string metrics_csv() const;

  const ReplayBuffer& real_buffer() const { return real_; }
  // Null in mfrl_mamba mode.
  const ReplayBuffer* sync_buffer() const { return sync_.get(); }
  worldmodel::Ensemble* model() { return model_.get(); }
  agent::SacAgent& agent() { return agent_; }
  env::CircuitEnv& env() { return env_; }
  const std::vector<std::vector<EvalEpisode>>& eval_set() const { return eval_set_; }

  // Agent, ensemble and run position under one checkpoint.
  void save_checkpoint(const std::filesystem::path& path) const;

private:
  void env_step(const std::vector<Real>& action);
  void retrain_model();
  void fill_sync(bool rebuild);
  void update_agent();
  void log(const std::string& line);

  RunConfig config_;
  std::shared_ptr<circuits::Simulator> sim_;
  schedule::Schedule schedule_;
  env::CircuitEnv env_;
  agent::SacAgent agent_;
  std::unique_ptr<worldmodel::Ensemble> model_;
  ReplayBuffer real_;
  std::unique_ptr<ReplayBuffer> sync_;
  numcore::Rng rng_;  // action noise for exploration, batch and start sampling
  std::vector<std::vector<EvalEpisode>> eval_set_;

  std::vector<Real> obs_;
  bool episode_over_ = true;
  bool explored_ = false;
  std::int64_t t_ = 0;
  Real model_val_loss_;
  Real sum_actor_ = 0;
  Real sum_critic_ = 0;
  Real last_temperature_ = 0;
  std::int64_t since_eval_ = 0;
  bool warned_fallback_ = false;

  RunStats stats_;
  std::vector<MetricsRow> metrics_;
  std::ostream* log_ = nullptr;
};

}  // namespace m3::trainer
