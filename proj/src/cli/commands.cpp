#include "m3/cli/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>

#include "m3/backbone/checkpoint.hpp"
#include "m3/circuits/adapter.hpp"
#include "m3/circuits/surrogate.hpp"
#include "m3/cli/config.hpp"
#include "m3/cli/plot.hpp"
#include "m3/trainer/trainer.hpp"

namespace m3::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Options shared by the commands that build a run configuration.
struct RunOptions {
  std::string config;
  std::vector<std::string> sets;
  std::string mode;
  std::uint64_t seed = 0;
  std::int64_t t_max = 0;
  std::string out;
  std::string adapter;
  bool fixed_schedule = false;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* t_max_opt = nullptr;

  void attach(CLI::App* cmd, bool training) {
    cmd->add_option("--config", config, "Flat JSON configuration, or a manifest.json to rerun")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override one key as key=value (repeatable)");
    cmd->add_option("--mode", mode, "Training mode")->check(CLI::IsMember({"m3", "mfrl_mamba", "mbrl_fixed"}));
    cmd->add_flag("--fixed-schedule", fixed_schedule, "Fixed schedule constants (same as --mode mbrl_fixed)");
    if (!training) return;
    seed_opt = cmd->add_option("--seed", seed, "Run seed");
    t_max_opt = cmd->add_option("--t-max", t_max, "Environment steps after exploration");
    cmd->add_option("--out", out, "Output directory (default runs/<mode>_seed<seed>)");
    cmd->add_option("--adapter", adapter, "External simulator endpoint: unix:<path> or a shell command");
  }

  // Defaults, then the file, then --set, then the dedicated flags.
  CliConfig resolve() const {
    CliConfig c;
    if (!config.empty()) {
      std::ifstream in(config);
      const json j = json::parse(in, nullptr, false, true);
      if (j.is_discarded()) throw ConfigError(config + " is not valid JSON");
      // A manifest carries the flat configuration under "config".
      c = from_json(j.contains("config_hash") && j.contains("config") ? j["config"] : j);
    }
    for (const auto& s : sets) apply_override(c, s);
    if (!mode.empty()) set_key(c, "mode", mode);
    if (fixed_schedule) {
      if (!mode.empty() && mode != "mbrl_fixed") throw ConfigError("--fixed-schedule conflicts with --mode " + mode);
      c.run.mode = trainer::Mode::MbrlFixed;
    }
    if (seed_opt && seed_opt->count()) c.run.seed = seed;
    if (t_max_opt && t_max_opt->count()) c.run.t_max = t_max;
    if (!out.empty()) c.run.out_dir = out;
    if (!adapter.empty()) c.adapter = adapter;
    return c;
  }
};

std::shared_ptr<circuits::Simulator> make_simulator(const std::string& adapter, std::uint64_t surrogate_seed) {
  if (!adapter.empty()) return std::make_shared<circuits::ExternalAdapter>(adapter);
  return std::make_shared<circuits::SurrogateSimulator>(surrogate_seed);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

int cmd_train(const RunOptions& opts, bool quiet, std::ostream& out, std::ostream& err) {
  auto cfg = opts.resolve();
  if (cfg.run.out_dir.empty()) {
    cfg.run.out_dir = fs::path("runs") / (std::string(trainer::mode_name(cfg.run.mode)) + "_seed" +
                                          std::to_string(cfg.run.seed));
  }
  cfg.run.validate();
  fs::create_directories(cfg.run.out_dir);
  write_json(cfg.run.out_dir / "manifest.json", make_manifest(cfg, cfg.run.out_dir));

  trainer::Trainer t(cfg.run, make_simulator(cfg.adapter, cfg.surrogate_seed));
  const auto& stats = t.run(quiet ? nullptr : &err);

  json summary{{"real_steps", stats.real_steps},
               {"eval_steps", stats.eval_steps},
               {"agent_updates", stats.agent_updates},
               {"model_trainings", stats.model_trainings},
               {"sync_rebuilds", stats.sync_rebuilds},
               {"fallback_batches", stats.fallback_batches},
               {"solved_at", stats.solved_at ? json(*stats.solved_at) : json(nullptr)}};
  write_json(cfg.run.out_dir / "summary.json", summary);
  out << "run " << cfg.run.out_dir.string() << " (config " << config_hash(cfg).substr(0, 12) << ")\n";
  out << "real environment steps " << stats.real_steps << '\n';
  if (stats.solved_at) {
    out << "all circuits solved at t=" << *stats.solved_at << '\n';
  } else {
    out << "not solved within t=" << cfg.run.t_max << '\n';
  }
  return kExitOk;
}

struct EvalOptions {
  std::string checkpoint;
  std::int64_t episodes = 10;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string adapter;
  std::uint64_t surrogate_seed = circuits::SurrogateModel::kDefaultSeed;
  std::string report;
};

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const auto ck = backbone::read_checkpoint(o.checkpoint);
  if (!ck.meta.contains("agent_network")) throw backbone::CheckpointError(o.checkpoint + " holds no agent");
  agent::SacConfig sac;
  const auto& n = ck.meta["agent_network"];
  sac.network.d_model = n.at("d_model").get<std::int64_t>();
  sac.network.d_state = n.at("d_state").get<std::int64_t>();
  sac.network.conv_width = n.at("conv_width").get<std::int64_t>();
  sac.network.expand = n.at("expand").get<std::int64_t>();
  sac.network.n_layers = n.at("n_layers").get<std::int64_t>();
  sac.network.dt_rank = n.at("dt_rank").get<std::int64_t>();
  agent::SacAgent actor(sac, 0);
  actor.load(ck, "agent.");

  std::uint64_t seed = o.seed;
  if (!(o.seed_opt && o.seed_opt->count()) && ck.meta.contains("run")) seed = ck.meta["run"].value("seed", 0ULL);
  if (o.episodes <= 0) throw ConfigError("--episodes must be positive");
  const auto set = trainer::make_eval_set(trainer::eval_set_seed(seed), o.episodes);
  const auto rows = trainer::evaluate(actor, make_simulator(o.adapter, o.surrogate_seed), set);

  std::ostringstream csv;
  csv << "circuit,successes,episodes,success_rate,mean_ep_len,mean_ep_reward\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %9s %9s %12s\n", "circuit", "success", "mean_len", "mean_reward");
  out << line;
  for (const auto& r : rows) {
    const auto wins = static_cast<long long>(std::llround(r.success_rate * static_cast<double>(o.episodes)));
    const auto name = std::string(circuits::circuit_name(r.circuit));
    const auto frac = std::to_string(wins) + "/" + std::to_string(o.episodes);
    std::snprintf(line, sizeof line, "%-10s %9s %9.2f %12.3f\n", name.c_str(), frac.c_str(), r.mean_ep_len,
                  r.mean_ep_reward);
    out << line;
    csv << name << ',' << wins << ',' << o.episodes << ',' << r.success_rate << ',' << r.mean_ep_len << ','
        << r.mean_ep_reward << '\n';
  }
  if (!o.report.empty()) {
    std::ofstream f(o.report);
    f << csv.str();
    if (!f) throw std::runtime_error("cannot write " + o.report);
  }
  return kExitOk;
}

int cmd_schedule(const RunOptions& opts, std::int64_t stride, std::int64_t last, const std::string& file,
                 std::ostream& out) {
  const auto cfg = opts.resolve();
  const auto& c = cfg.run;
  const auto sched = c.mode == trainer::Mode::MbrlFixed
                         ? schedule::Schedule::fixed(c.fixed_alpha, c.fixed_rollouts, c.fixed_updates)
                         : schedule::Schedule(c.schedule);
  if (last < 0) last = static_cast<std::int64_t>(2 * c.schedule.scale);
  if (file.empty()) {
    sched.write_csv(out, last, stride);
    return kExitOk;
  }
  std::ofstream f(file);
  sched.write_csv(f, last, stride);
  if (!f) throw std::runtime_error("cannot write " + file);
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-circuit sizing with a scheduled model-based agent", "m3"};
  app.require_subcommand(1);

  RunOptions train_opts;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "Explore, train and evaluate; writes manifest, metrics and checkpoints");
  train_opts.attach(train, true);
  train->add_flag("--quiet", quiet, "No progress lines");

  EvalOptions eval_opts;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the fixed per-circuit targets");
  eval->add_option("checkpoint", eval_opts.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", eval_opts.episodes, "Episodes per circuit")->capture_default_str();
  eval_opts.seed_opt = eval->add_option("--seed", eval_opts.seed, "Target-set seed (default: the run's seed)");
  eval->add_option("--adapter", eval_opts.adapter, "External simulator endpoint");
  eval->add_option("--surrogate-seed", eval_opts.surrogate_seed, "Surrogate weight seed")->capture_default_str();
  eval->add_option("--out", eval_opts.report, "Also write the report as CSV");

  RunOptions sched_opts;
  std::int64_t stride = 100, last = -1;
  std::string sched_file;
  auto* sched = app.add_subcommand("schedule", "Print t, alpha, t_a, r as CSV");
  sched_opts.attach(sched, false);
  sched->add_option("--stride", stride, "Step between rows")->capture_default_str()->check(CLI::PositiveNumber);
  sched->add_option("--last", last, "Last step (default 2 * schedule.scale)");
  sched->add_option("--out", sched_file, "Write to a file instead of stdout");

  std::vector<std::string> csvs;
  std::string plot_dir = "plots";
  auto* plot = app.add_subcommand("plot", "SVG learning curves per circuit, mean and std across seeds");
  plot->add_option("csv", csvs, "Metrics CSV files")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_dir, "Output directory")->capture_default_str();

  auto* keys = app.add_subcommand("keys", "List configuration keys with their defaults");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUser;
  }

  try {
    if (*train) return cmd_train(train_opts, quiet, out, err);
    if (*eval) return cmd_eval(eval_opts, out);
    if (*sched) return cmd_schedule(sched_opts, stride, last, sched_file, out);
    if (*plot) {
      for (const auto& p : write_plots({csvs.begin(), csvs.end()}, plot_dir)) out << p.string() << '\n';
      return kExitOk;
    }
    if (*keys) {
      const auto defaults = to_json(CliConfig{});
      for (const auto& [k, v] : defaults.items()) out << k << " = " << v.dump() << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const backbone::CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const circuits::AdapterError& e) {
    err << "error: simulator adapter: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace m3::cli
