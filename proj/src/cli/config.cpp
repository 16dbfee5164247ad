#include "m3/cli/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <type_traits>

#include <openssl/evp.h>

namespace m3::cli {

namespace {

using nlohmann::json;

struct Key {
  std::string name;
  std::function<json(const CliConfig&)> get;
  std::function<void(CliConfig&, const json&)> set;
};

template <class T>
T convert(const std::string& key, const json& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(key + ": expected a string");
    return v.get<std::string>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(key + ": expected a number");
    return v.get<T>();
  } else {
    static_assert(std::is_integral_v<T>);
    if (v.is_number_integer() || v.is_number_unsigned()) {
      if (std::is_unsigned_v<T> && v.is_number_integer() && v.get<std::int64_t>() < 0) {
        throw ConfigError(key + ": expected a non-negative integer");
      }
      return v.get<T>();
    }
    // Accept 2e4 and friends when the value is integral.
    if (v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<std::int64_t>(v.get<double>()))) {
      return static_cast<T>(v.get<double>());
    }
    throw ConfigError(key + ": expected an integer");
  }
}

template <class T, class Access>
Key field(std::string name, Access access) {
  return Key{name,
             [access](const CliConfig& c) { return json(access(const_cast<CliConfig&>(c))); },
             [access, name](CliConfig& c, const json& v) { access(c) = convert<T>(name, v); }};
}

#define M3_FIELD(type, key, expr) field<type>(key, [](CliConfig& c) -> type& { return expr; })

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k{
        Key{"mode", [](const CliConfig& c) { return json(std::string(trainer::mode_name(c.run.mode))); },
            [](CliConfig& c, const json& v) {
              const auto name = convert<std::string>("mode", v);
              const auto mode = trainer::parse_mode(name);
              if (!mode) throw ConfigError("mode: unknown mode '" + name + "' (valid: m3, mfrl_mamba, mbrl_fixed)");
              c.run.mode = *mode;
            }},
        Key{"out", [](const CliConfig& c) { return json(c.run.out_dir.string()); },
            [](CliConfig& c, const json& v) { c.run.out_dir = convert<std::string>("out", v); }},
        M3_FIELD(std::uint64_t, "seed", c.run.seed),
        M3_FIELD(std::int64_t, "t_max", c.run.t_max),
        M3_FIELD(std::int64_t, "t_model", c.run.t_model),
        M3_FIELD(std::int64_t, "t_ro", c.run.t_ro),
        M3_FIELD(std::int64_t, "n_initial", c.run.n_initial),
        M3_FIELD(std::int64_t, "t_ep", c.run.t_ep),
        M3_FIELD(std::int64_t, "eval_every", c.run.eval_every),
        M3_FIELD(std::int64_t, "eval_episodes", c.run.eval_episodes),
        M3_FIELD(std::int64_t, "rollout_starts", c.run.rollout_starts),
        M3_FIELD(std::size_t, "real_capacity", c.run.real_capacity),

        M3_FIELD(double, "schedule.alpha_initial", c.run.schedule.alpha_initial),
        M3_FIELD(double, "schedule.alpha_final", c.run.schedule.alpha_final),
        M3_FIELD(double, "schedule.updates_initial", c.run.schedule.updates_initial),
        M3_FIELD(double, "schedule.updates_final", c.run.schedule.updates_final),
        M3_FIELD(double, "schedule.rollouts_initial", c.run.schedule.rollouts_initial),
        M3_FIELD(double, "schedule.rollouts_final", c.run.schedule.rollouts_final),
        M3_FIELD(double, "schedule.scale", c.run.schedule.scale),
        M3_FIELD(double, "fixed.alpha", c.run.fixed_alpha),
        M3_FIELD(std::int64_t, "fixed.rollouts", c.run.fixed_rollouts),
        M3_FIELD(std::int64_t, "fixed.updates", c.run.fixed_updates),

        M3_FIELD(double, "sac.discount", c.run.sac.discount),
        M3_FIELD(double, "sac.tau", c.run.sac.tau),
        M3_FIELD(double, "sac.actor_lr", c.run.sac.actor_lr),
        M3_FIELD(double, "sac.critic_lr", c.run.sac.critic_lr),
        M3_FIELD(double, "sac.alpha_lr", c.run.sac.alpha_lr),
        M3_FIELD(std::int64_t, "sac.batch_size", c.run.sac.batch_size),
        M3_FIELD(double, "sac.grad_clip", c.run.sac.grad_clip),
        M3_FIELD(double, "sac.initial_alpha", c.run.sac.initial_alpha),
        Key{"sac.fixed_alpha",
            [](const CliConfig& c) { return c.run.sac.fixed_alpha ? json(*c.run.sac.fixed_alpha) : json(nullptr); },
            [](CliConfig& c, const json& v) {
              if (v.is_null()) {
                c.run.sac.fixed_alpha.reset();
              } else {
                c.run.sac.fixed_alpha = convert<double>("sac.fixed_alpha", v);
              }
            }},
        M3_FIELD(std::int64_t, "sac.d_model", c.run.sac.network.d_model),
        M3_FIELD(std::int64_t, "sac.d_state", c.run.sac.network.d_state),
        M3_FIELD(std::int64_t, "sac.conv_width", c.run.sac.network.conv_width),
        M3_FIELD(std::int64_t, "sac.expand", c.run.sac.network.expand),
        M3_FIELD(std::int64_t, "sac.n_layers", c.run.sac.network.n_layers),

        M3_FIELD(int, "model.members", c.run.model.members),
        M3_FIELD(int, "model.elites", c.run.model.elites),
        M3_FIELD(double, "model.val_ratio", c.run.model.val_ratio),
        M3_FIELD(int, "model.patience", c.run.model.patience),
        M3_FIELD(double, "model.learning_rate", c.run.model.learning_rate),
        M3_FIELD(double, "model.min_rel_improvement", c.run.model.min_rel_improvement),
        M3_FIELD(int, "model.max_epochs", c.run.model.max_epochs),
        M3_FIELD(std::int64_t, "model.batch_size", c.run.model.batch_size),
        M3_FIELD(std::int64_t, "model.max_batches_per_epoch", c.run.model.max_batches_per_epoch),
        M3_FIELD(std::int64_t, "model.d_model", c.run.model.network.d_model),
        M3_FIELD(std::int64_t, "model.d_state", c.run.model.network.d_state),
        M3_FIELD(std::int64_t, "model.conv_width", c.run.model.network.conv_width),
        M3_FIELD(std::int64_t, "model.expand", c.run.model.network.expand),
        M3_FIELD(std::int64_t, "model.n_layers", c.run.model.network.n_layers),

        M3_FIELD(std::string, "sim.adapter", c.adapter),
        M3_FIELD(std::uint64_t, "sim.surrogate_seed", c.surrogate_seed),
    };
    std::sort(k.begin(), k.end(), [](const Key& a, const Key& b) { return a.name < b.name; });
    return k;
  }();
  return keys;
}

#undef M3_FIELD

std::string key_list() {
  std::string out;
  for (const auto& k : registry()) out += (out.empty() ? "" : ", ") + k.name;
  return out;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

void set_key(CliConfig& config, const std::string& key, const json& value) {
  for (const auto& k : registry()) {
    if (k.name == key) {
      k.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + key + "'; valid keys: " + key_list());
}

void apply_override(CliConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set_key(config, key, value);
}

json to_json(const CliConfig& config) {
  json out = json::object();
  for (const auto& k : registry()) out[k.name] = k.get(config);
  return out;
}

CliConfig from_json(const json& flat) {
  if (!flat.is_object()) throw ConfigError("configuration must be a flat JSON object");
  CliConfig c;
  for (const auto& [key, value] : flat.items()) set_key(c, key, value);
  return c;
}

CliConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration " + path.string());
  const json flat = json::parse(in, nullptr, false, true);
  if (flat.is_discarded()) throw ConfigError(path.string() + " is not valid JSON");
  return from_json(flat);
}

std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string config_hash(const CliConfig& config) {
  // Where results go does not change them.
  auto flat = to_json(config);
  flat.erase("out");
  return git_blob_sha1(flat.dump());
}

json make_manifest(const CliConfig& config, const std::filesystem::path& out_dir) {
  return json{{"config", to_json(config)},
              {"config_hash", config_hash(config)},
              {"seed", config.run.seed},
              {"mode", std::string(trainer::mode_name(config.run.mode))},
              {"out_dir", out_dir.string()}};
}

}  // namespace m3::cli
