#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "m3/backbone/checkpoint.hpp"
#include "m3/cli/commands.hpp"
#include "m3/cli/config.hpp"
#include "m3/cli/plot.hpp"

using namespace m3::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "m3");
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("m3_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Tiny networks and one update per step so a 100-step run takes seconds.
json tiny_config() {
  return json{{"t_max", 100},
              {"eval_every", 50},
              {"eval_episodes", 2},
              {"rollout_starts", 32},
              {"sac.batch_size", 16},
              {"sac.d_model", 8},
              {"sac.d_state", 2},
              {"schedule.updates_initial", 1},
              {"schedule.updates_final", 1},
              {"fixed.updates", 1},
              {"t_model", 60},
              {"model.members", 3},
              {"model.elites", 2},
              {"model.batch_size", 64},
              {"model.max_epochs", 1},
              {"model.max_batches_per_epoch", 4},
              {"model.d_model", 8},
              {"model.d_state", 2}};
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

}  // namespace

TEST_CASE("git blob hashes match git hash-object") {
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("config keys, overrides and errors") {
  const auto keys = config_keys();
  for (const char* k : {"mode", "seed", "t_max", "t_model", "t_ro", "n_initial", "eval_every", "sac.critic_lr",
                        "model.members", "schedule.scale", "fixed.alpha", "sim.adapter"}) {
    CHECK(std::find(keys.begin(), keys.end(), k) != keys.end());
  }
  CliConfig c;
  apply_override(c, "sac.critic_lr=1e-3");
  apply_override(c, "t_max=2e4");
  apply_override(c, "mode=mbrl_fixed");
  apply_override(c, "sim.adapter=unix:/tmp/sim.sock");
  CHECK(c.run.sac.critic_lr == 1e-3);
  CHECK(c.run.t_max == 20000);
  CHECK(c.run.mode == m3::trainer::Mode::MbrlFixed);
  CHECK(c.adapter == "unix:/tmp/sim.sock");

  try {
    set_key(c, "sac.lr", 1e-3);
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("sac.lr") != std::string::npos);
    for (const auto& k : keys) CHECK(msg.find(k) != std::string::npos);
  }
  CHECK_THROWS_AS(set_key(c, "t_max", 1.5), ConfigError);
  CHECK_THROWS_AS(set_key(c, "seed", -1), ConfigError);
  CHECK_THROWS_AS(set_key(c, "mode", "ppo"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "t_max"), ConfigError);
}

TEST_CASE("config hash is stable under key reordering and ignores the output directory") {
  const auto a = from_json(json::parse(R"({"seed": 3, "sac.critic_lr": 0.001, "t_max": 500})"));
  const auto b = from_json(json::parse(R"({"t_max": 500, "seed": 3, "sac.critic_lr": 0.001})"));
  CHECK(config_hash(a) == config_hash(b));
  auto c = a;
  c.run.out_dir = "elsewhere";
  CHECK(config_hash(c) == config_hash(a));
  c.run.seed = 4;
  CHECK(config_hash(c) != config_hash(a));
  // Round trip through the flat form.
  CHECK(to_json(from_json(to_json(a))) == to_json(a));
}

TEST_CASE("schedule command") {
  const auto r = cli({"schedule"});
  REQUIRE(r.code == 0);
  const auto rows = lines(r.out);
  REQUIRE(rows.size() == 302);  // header + t = 0..30000 step 100
  CHECK(rows[0] == "t,alpha,t_a,r");
  CHECK(rows[1] == "0,0.05,15,1");
  CHECK(rows[151] == "15000,0.95,20,7");

  const auto fixed = cli({"schedule", "--fixed-schedule", "--last", "300"});
  REQUIRE(fixed.code == 0);
  for (std::size_t i = 1; i < lines(fixed.out).size(); ++i) {
    CHECK(lines(fixed.out)[i].substr(lines(fixed.out)[i].find(',')) == ",0.05,20,10");
  }
}

TEST_CASE("user errors exit with 1") {
  const auto mode = cli({"train", "--mode", "ppo"});
  CHECK(mode.code == 1);
  for (const char* m : {"m3", "mfrl_mamba", "mbrl_fixed"}) CHECK(mode.err.find(m) != std::string::npos);

  const auto key = cli({"schedule", "--set", "bogus=1"});
  CHECK(key.code == 1);
  CHECK(key.err.find("valid keys") != std::string::npos);

  CHECK(cli({}).code == 1);
  CHECK(cli({"eval", "/nonexistent/file"}).code == 1);
  CHECK(cli({"train", "--mode", "m3", "--fixed-schedule"}).code == 1);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("train, eval and plot end to end") {
  const auto dir = scratch("e2e");
  write(dir / "tiny.json", tiny_config().dump());

  const auto run_dir = dir / "run";
  auto r = cli({"train", "--config", (dir / "tiny.json").string(), "--mode", "mbrl_fixed", "--seed", "2", "--out",
                run_dir.string(), "--quiet"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("real environment steps 3700") != std::string::npos);
  for (const char* f : {"manifest.json", "metrics.csv", "checkpoint.m3ckpt", "summary.json"}) {
    CHECK(fs::exists(run_dir / f));
  }

  std::ifstream mf(run_dir / "manifest.json");
  const auto manifest = json::parse(mf);
  CHECK(manifest["mode"] == "mbrl_fixed");
  CHECK(manifest["seed"] == 2);
  CHECK(manifest["config"]["t_max"] == 100);
  CHECK(manifest["config_hash"] == config_hash(from_json(manifest["config"])));

  // alpha column constant at 0.05 in fixed mode
  const auto rows = read_metrics_csv(run_dir / "metrics.csv");
  REQUIRE(rows.size() == 12);
  for (const auto& row : rows) CHECK(row.alpha == 0.05);

  // The manifest alone reproduces the metrics.
  const auto rerun_dir = dir / "rerun";
  r = cli({"train", "--config", (run_dir / "manifest.json").string(), "--out", rerun_dir.string(), "--quiet"});
  REQUIRE(r.code == 0);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  CHECK(slurp(run_dir / "metrics.csv") == slurp(rerun_dir / "metrics.csv"));

  r = cli({"eval", (run_dir / "checkpoint.m3ckpt").string(), "--out", (dir / "report.csv").string()});
  REQUIRE(r.code == 0);
  CHECK(lines(r.out).size() == 5);
  CHECK(r.out.find("/10") != std::string::npos);  // default episode count
  CHECK(lines(slurp(dir / "report.csv")).size() == 5);

  // Corrupt and incompatible checkpoints.
  auto bytes = slurp(run_dir / "checkpoint.m3ckpt");
  auto corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= 0x5a;
  write(dir / "corrupt.m3ckpt", corrupt);
  r = cli({"eval", (dir / "corrupt.m3ckpt").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("checksum") != std::string::npos);
  auto future = bytes;
  future[8] = 9;  // version field
  write(dir / "future.m3ckpt", future);
  r = cli({"eval", (dir / "future.m3ckpt").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("version 9") != std::string::npos);
  CHECK(r.err.find("version 1") != std::string::npos);

  // Plots: a single run has no band; two runs of a mode get one.
  r = cli({"plot", (run_dir / "metrics.csv").string(), "--out", (dir / "plots1").string()});
  REQUIRE(r.code == 0);
  CHECK(lines(r.out).size() == 8);
  const auto svg1 = slurp(dir / "plots1" / "2SOA_mean_ep_reward.svg");
  CHECK(svg1.find("<polyline") != std::string::npos);
  CHECK(svg1.find("<polygon") == std::string::npos);

  r = cli({"train", "--config", (dir / "tiny.json").string(), "--mode", "mbrl_fixed", "--seed", "3", "--out",
           (dir / "run3").string(), "--quiet"});
  REQUIRE(r.code == 0);
  r = cli({"plot", (run_dir / "metrics.csv").string(), (dir / "run3" / "metrics.csv").string(), "--out",
           (dir / "plots2").string()});
  REQUIRE(r.code == 0);
  const auto svg2 = slurp(dir / "plots2" / "2SOA_mean_ep_len.svg");
  CHECK(svg2.find("<polygon") != std::string::npos);
  CHECK(svg2.find("mbrl_fixed (n=2)") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("plot input errors") {
  const auto dir = scratch("plot_errors");
  write(dir / "empty.csv", "");
  write(dir / "header_only.csv", std::string(m3::trainer::kMetricsHeader) + "\n");
  write(dir / "other.csv", "t,reward\n0,1\n");
  CHECK_THROWS_AS(read_metrics_csv(dir / "empty.csv"), ConfigError);
  CHECK_THROWS_AS(read_metrics_csv(dir / "header_only.csv"), ConfigError);
  CHECK_THROWS_AS(read_metrics_csv(dir / "other.csv"), ConfigError);
  CHECK(cli({"plot", (dir / "other.csv").string(), "--out", (dir / "p").string()}).code == 1);
  fs::remove_all(dir);
}

TEST_CASE("aggregation: mean and sample std over shared steps") {
  using m3::trainer::MetricsRow;
  auto row = [](std::int64_t t, double reward) {
    MetricsRow r;
    r.t = t;
    r.eval.circuit = m3::circuits::CircuitId::Comparator;
    r.eval.mean_ep_reward = reward;
    return r;
  };
  const std::vector<std::vector<MetricsRow>> runs{{row(0, 1), row(100, 2), row(200, 9)}, {row(0, 3), row(100, 6)}};
  const auto s = aggregate(runs, m3::circuits::CircuitId::Comparator, Metric::EpisodeReward, "x");
  REQUIRE(s.t == std::vector<std::int64_t>{0, 100});
  CHECK(s.mean[0] == 2);
  CHECK(s.mean[1] == 4);
  CHECK(s.stddev[0] == doctest::Approx(std::sqrt(2.0)));
  CHECK(s.stddev[1] == doctest::Approx(std::sqrt(8.0)));
}
