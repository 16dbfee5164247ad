#include "m3/worldmodel/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "m3/numcore/ops.hpp"

namespace m3::worldmodel {

using namespace numcore;
using env::kActLen;
using env::kEmbedLen;
using env::kObsLen;

void EnsembleConfig::validate() const {
  if (members < 1) throw std::invalid_argument("ensemble needs at least one member");
  if (elites < 1 || elites > members) throw std::invalid_argument("elite count must lie in [1, members]");
  if (!(val_ratio > 0 && val_ratio < 1)) throw std::invalid_argument("validation ratio must lie in (0, 1)");
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (!(learning_rate > 0)) throw std::invalid_argument("model learning rate must be positive");
  if (!(min_rel_improvement >= 0)) throw std::invalid_argument("min relative improvement must be >= 0");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("model batch size must be >= 1");
  if (max_batches_per_epoch < 0) throw std::invalid_argument("max_batches_per_epoch must be >= 0");
  if (!(logvar_min < logvar_max)) throw std::invalid_argument("logvar bounds must satisfy min < max");
  network.validate();
}

std::vector<int> select_elites(std::span<const Real> losses, int n) {
  if (n < 0 || n > static_cast<int>(losses.size())) {
    throw std::invalid_argument("cannot pick " + std::to_string(n) + " elites from " + std::to_string(losses.size()));
  }
  std::vector<int> idx(losses.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return losses[a] < losses[b]; });
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

EarlyStopper::EarlyStopper(int patience, Real min_rel)
    : patience_(patience), min_rel_(min_rel), best_(std::numeric_limits<Real>::infinity()) {
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
}

bool EarlyStopper::update(Real loss) {
  ++epochs_;
  const bool improved = std::isinf(best_) ? std::isfinite(loss) : (best_ - loss) >= min_rel_ * std::abs(best_);
  if (improved) {
    best_ = loss;
    stale_ = 0;
  } else {
    ++stale_;
  }
  return improved;
}

Normalizer Normalizer::fit(std::span<const std::vector<Real>> rows, std::size_t width) {
  if (rows.empty()) throw std::invalid_argument("normalizer needs at least one row");
  Normalizer n;
  n.mean.assign(width, 0);
  n.stddev.assign(width, 0);
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < width; ++j) n.mean[j] += r[j];
  }
  for (auto& m : n.mean) m /= static_cast<Real>(rows.size());
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < width; ++j) n.stddev[j] += (r[j] - n.mean[j]) * (r[j] - n.mean[j]);
  }
  for (auto& s : n.stddev) {
    s = std::sqrt(s / static_cast<Real>(rows.size()));
    if (s < 1e-6) s = 1;
  }
  return n;
}

void Normalizer::apply(std::span<Real> row) const {
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean[j]) / stddev[j];
}

void Normalizer::invert(std::span<Real> row) const {
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * stddev[j] + mean[j];
}

std::vector<Real> model_input(std::span<const Real> obs, std::span<const Real> action) {
  if (obs.size() != kObsLen || action.size() != kActLen) {
    throw std::invalid_argument("model input needs a packed observation and action");
  }
  std::vector<Real> x(obs.begin(), obs.end());
  x.insert(x.end(), action.begin(), action.end());
  return x;
}

std::vector<Real> model_target(const env::Transition& t) {
  std::vector<Real> y(kTargetLen);
  for (int j = 0; j < kObsLen; ++j) y[j] = t.next_obs[j] - t.obs[j];
  y[kObsLen] = t.reward;
  return y;
}

void project_observation(std::span<const Real> current, std::span<Real> predicted) {
  const auto id = env::circuit_from_observation(current);
  if (!id) throw std::invalid_argument("projection needs an observation with a valid circuit one-hot");
  const auto& def = circuits::circuit(*id);
  for (int j = 0; j < kEmbedLen; ++j) predicted[j] = current[j];
  for (int i = 0; i < def.n_params(); ++i) {
    auto& v = predicted[env::param_offset() + i];
    v = std::clamp(v, Real{0}, Real{1});
  }
  for (int k = 0; k < def.n_specs(); ++k) predicted[env::target_offset(def, k)] = current[env::target_offset(def, k)];
  for (int j = env::obs_valid_len(def); j < kObsLen; ++j) predicted[j] = 0;
}

Ensemble::Member::Member(const backbone::BackboneConfig& cfg, std::uint64_t seed, Real lr)
    : net(cfg, seed),
      raw_logvar(Tensor::zeros({kTargetLen}, true)),
      opt([&] {
        auto p = net.parameters();
        p.push_back(raw_logvar);
        return p;
      }(),
          {.learning_rate = lr}),
      rng(seed ^ 0x9e3779b97f4a7c15ULL) {}

std::vector<Tensor> Ensemble::Member::params() const {
  auto p = net.parameters();
  p.push_back(raw_logvar);
  return p;
}

Ensemble::Ensemble(EnsembleConfig config, std::uint64_t seed) : config_(std::move(config)), rng_(seed) {
  config_.network.head_out = kTargetLen;
  config_.validate();
  members_.reserve(static_cast<std::size_t>(config_.members));
  for (int k = 0; k < config_.members; ++k) {
    members_.emplace_back(config_.network, seed * 31 + 17 + static_cast<std::uint64_t>(k), config_.learning_rate);
  }
  val_losses_.assign(static_cast<std::size_t>(config_.members), std::numeric_limits<Real>::infinity());
}

Tensor Ensemble::logvar(const Member& m) const {
  // Smooth clamp into [logvar_min, logvar_max].
  const auto hi = Tensor::scalar(config_.logvar_max);
  const auto lo = Tensor::scalar(config_.logvar_min);
  auto lv = hi - softplus(hi - m.raw_logvar);
  return lo + softplus(lv - lo);
}

Tensor Ensemble::inputs(std::span<const env::Transition* const> rows) const {
  std::vector<Real> x;
  x.reserve(rows.size() * kInputLen);
  for (const auto* t : rows) {
    auto r = model_input(t->obs, t->action);
    in_norm_.apply(r);
    x.insert(x.end(), r.begin(), r.end());
  }
  return Tensor::from({static_cast<std::int64_t>(rows.size()), kInputLen}, std::move(x));
}

Tensor Ensemble::targets(std::span<const env::Transition* const> rows) const {
  std::vector<Real> y;
  y.reserve(rows.size() * kTargetLen);
  for (const auto* t : rows) {
    auto r = model_target(*t);
    out_norm_.apply(r);
    y.insert(y.end(), r.begin(), r.end());
  }
  return Tensor::from({static_cast<std::int64_t>(rows.size()), kTargetLen}, std::move(y));
}

Real Ensemble::validation_loss(int member, std::span<const env::Transition* const> rows) {
  if (rows.empty()) throw std::invalid_argument("validation set is empty");
  auto& m = members_.at(static_cast<std::size_t>(member));
  NoGradGuard guard;
  Real total = 0;
  const auto chunk = static_cast<std::size_t>(std::max<std::int64_t>(config_.batch_size, 1));
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const auto part = rows.subspan(start, std::min(chunk, rows.size() - start));
    const auto mu = m.net.forward(inputs(part));
    const auto y = targets(part);
    for (std::size_t i = 0; i < mu.data().size(); ++i) {
      const Real e = mu.data()[i] - y.data()[i];
      total += e * e;
    }
  }
  return total / static_cast<Real>(rows.size() * kTargetLen);
}

void Ensemble::refit_logvar(Member& m, std::span<const env::Transition* const> rows) {
  // With input-independent variance the likelihood optimum for fixed means is
  // the per-output residual variance. Mapped back through the soft clamp.
  std::vector<Real> sq(kTargetLen, 0);
  {
    NoGradGuard guard;
    const auto chunk = static_cast<std::size_t>(config_.batch_size);
    for (std::size_t start = 0; start < rows.size(); start += chunk) {
      const auto part = rows.subspan(start, std::min(chunk, rows.size() - start));
      const auto mu = m.net.forward(inputs(part));
      const auto y = targets(part);
      for (std::size_t i = 0; i < mu.data().size(); ++i) sq[i % kTargetLen] += std::pow(mu.data()[i] - y.data()[i], 2);
    }
  }
  const Real lo = config_.logvar_min, hi = config_.logvar_max, margin = 1e-3;
  auto raw = m.raw_logvar.mutable_data();
  for (int j = 0; j < kTargetLen; ++j) {
    const Real var = sq[j] / static_cast<Real>(rows.size());
    const Real lv = std::clamp(var > 0 ? std::log(var) : lo, lo + margin, hi - margin);
    const Real v = std::log(std::expm1(lv - lo));
    raw[j] = hi - std::log(std::expm1(hi - lo - v));
  }
}

Real Ensemble::train_member(int k, std::span<const env::Transition> data, TrainReport& report) {
  auto& m = members_[static_cast<std::size_t>(k)];
  // Shuffled split drawn from the member's own stream.
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), m.rng.engine());
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(config_.val_ratio * data.size())));
  std::vector<const env::Transition*> val, train;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val : train).push_back(&data[order[i]]);

  auto params = m.params();
  auto snapshot = [&] {
    std::vector<std::vector<Real>> s;
    for (const auto& p : params) s.emplace_back(p.data().begin(), p.data().end());
    return s;
  };

  EarlyStopper stopper(config_.patience, config_.min_rel_improvement);
  // The warm-started weights are the first candidate.
  stopper.update(validation_loss(k, val));
  auto best = snapshot();

  const auto b = static_cast<std::size_t>(config_.batch_size);
  while (!stopper.should_stop() && stopper.epochs() <= config_.max_epochs) {
    std::shuffle(train.begin(), train.end(), m.rng.engine());
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < train.size(); start += b) {
      if (config_.max_batches_per_epoch > 0 && batches >= config_.max_batches_per_epoch) break;
      const auto part = std::span<const env::Transition* const>(train).subspan(start, std::min(b, train.size() - start));
      const auto mu = m.net.forward(inputs(part));
      const auto y = targets(part);
      const auto lv = logvar(m);
      // Gaussian negative log-likelihood up to a constant, per output.
      const auto nll = mean(square(mu - y) * exp(-lv) + lv) * 0.5;
      m.opt.zero_grad();
      nll.backward();
      m.opt.step();
      ++batches;
    }
    if (stopper.update(validation_loss(k, val))) best = snapshot();
  }
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(best[i].begin(), best[i].end(), params[i].mutable_data().begin());
  refit_logvar(m, train);
  report.epochs[static_cast<std::size_t>(k)] = stopper.epochs() - 1;
  return stopper.best();
}

TrainReport Ensemble::train(std::span<const env::Transition> data) {
  const auto needed = static_cast<std::size_t>(10 * config_.batch_size);
  if (data.size() < needed) {
    throw std::invalid_argument("model training needs at least " + std::to_string(needed) + " transitions, got " +
                                std::to_string(data.size()));
  }
  std::vector<std::vector<Real>> xs, ys;
  xs.reserve(data.size());
  ys.reserve(data.size());
  for (const auto& t : data) {
    xs.push_back(model_input(t.obs, t.action));
    ys.push_back(model_target(t));
  }
  in_norm_ = Normalizer::fit(xs, kInputLen);
  out_norm_ = Normalizer::fit(ys, kTargetLen);

  TrainReport report;
  report.epochs.assign(members_.size(), 0);
  for (int k = 0; k < size(); ++k) val_losses_[static_cast<std::size_t>(k)] = train_member(k, data, report);
  elites_ = select_elites(val_losses_, config_.elites);
  report.val_losses = val_losses_;
  report.elites = elites_;
  for (int e : elites_) report.mean_elite_loss += val_losses_[static_cast<std::size_t>(e)];
  report.mean_elite_loss /= static_cast<Real>(elites_.size());
  return report;
}

Tensor Ensemble::predict_batch(const Tensor& obs, const Tensor& action, int member, bool sample) {
  if (!in_norm_.fitted()) throw std::logic_error("ensemble used before training");
  const auto b = obs.dim(0);
  if (obs.shape() != Shape{b, kObsLen} || action.shape() != Shape{b, kActLen}) {
    throw ShapeError("predict: expected obs [b, " + std::to_string(kObsLen) + "] and action [b, " +
                     std::to_string(kActLen) + "], got " + shape_str(obs.shape()) + " and " + shape_str(action.shape()));
  }
  auto& m = members_.at(static_cast<std::size_t>(member));
  NoGradGuard guard;
  std::vector<Real> x;
  x.reserve(static_cast<std::size_t>(b * kInputLen));
  for (std::int64_t i = 0; i < b; ++i) {
    auto r = model_input(obs.data().subspan(i * kObsLen, kObsLen), action.data().subspan(i * kActLen, kActLen));
    in_norm_.apply(r);
    x.insert(x.end(), r.begin(), r.end());
  }
  const auto mu = m.net.forward(Tensor::from({b, kInputLen}, std::move(x)));
  const auto lv = logvar(m);

  std::vector<Real> out(static_cast<std::size_t>(b * kTargetLen));
  for (std::int64_t i = 0; i < b; ++i) {
    std::span<Real> row(out.data() + i * kTargetLen, kTargetLen);
    for (int j = 0; j < kTargetLen; ++j) {
      Real v = mu.data()[i * kTargetLen + j];
      if (sample) v += std::exp(0.5 * lv.data()[j]) * m.rng.normal();
      row[j] = v;
    }
    out_norm_.invert(row);
    const auto cur = obs.data().subspan(i * kObsLen, kObsLen);
    for (int j = 0; j < kObsLen; ++j) row[j] += cur[j];
    project_observation(cur, row.first(kObsLen));
  }
  return Tensor::from({b, kTargetLen}, std::move(out));
}

Prediction Ensemble::predict(std::span<const Real> obs, std::span<const Real> action, int member, bool sample) {
  const auto y = predict_batch(Tensor::from({1, kObsLen}, {obs.begin(), obs.end()}),
                               Tensor::from({1, kActLen}, {action.begin(), action.end()}), member, sample);
  Prediction p;
  p.next_obs.assign(y.data().begin(), y.data().begin() + kObsLen);
  p.reward = y.data()[kObsLen];
  return p;
}

RolloutResult Ensemble::rollout(agent::SacAgent& actor, std::span<const std::vector<Real>> starts, int horizon) {
  if (horizon < 1) throw std::invalid_argument("rollout horizon must be >= 1");
  if (!trained()) throw std::logic_error("rollout needs a trained ensemble");
  RolloutResult result;
  const Real done_at = env::kSuccessReward * (1 - kDoneEpsilon);

  // Per start state: its own list of steps, flattened in start order at the end.
  std::vector<std::vector<env::Transition>> per_start(starts.size());
  std::vector<std::size_t> active(starts.size());
  std::iota(active.begin(), active.end(), 0);
  std::vector<std::vector<Real>> current(starts.begin(), starts.end());

  for (int step = 0; step < horizon && !active.empty(); ++step) {
    const auto n = static_cast<std::int64_t>(active.size());
    std::vector<Real> obs_flat;
    obs_flat.reserve(static_cast<std::size_t>(n * kObsLen));
    for (auto r : active) obs_flat.insert(obs_flat.end(), current[r].begin(), current[r].end());
    const auto obs = Tensor::from({n, kObsLen}, std::move(obs_flat));
    const auto actions = actor.act_batch(obs, false);

    // Uniform elite per row, then one forward per elite on its rows.
    std::vector<int> pick(active.size());
    for (auto& p : pick) p = elites_[rng_.index(elites_.size())];
    std::vector<Real> next(static_cast<std::size_t>(n * kTargetLen));
    for (int e : elites_) {
      std::vector<std::int64_t> rows;
      for (std::int64_t i = 0; i < n; ++i) {
        if (pick[i] == e) rows.push_back(i);
      }
      if (rows.empty()) continue;
      const auto m = static_cast<std::int64_t>(rows.size());
      std::vector<Real> o, a;
      for (auto i : rows) {
        o.insert(o.end(), obs.data().begin() + i * kObsLen, obs.data().begin() + (i + 1) * kObsLen);
        a.insert(a.end(), actions.data().begin() + i * kActLen, actions.data().begin() + (i + 1) * kActLen);
      }
      const auto y = predict_batch(Tensor::from({m, kObsLen}, std::move(o)), Tensor::from({m, kActLen}, std::move(a)), e);
      for (std::int64_t k = 0; k < m; ++k) {
        std::copy_n(y.data().begin() + k * kTargetLen, kTargetLen, next.begin() + rows[k] * kTargetLen);
      }
    }

    std::vector<std::size_t> still;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto r = active[static_cast<std::size_t>(i)];
      env::Transition t;
      t.obs = current[r];
      t.action.assign(actions.data().begin() + i * kActLen, actions.data().begin() + (i + 1) * kActLen);
      t.next_obs.assign(next.begin() + i * kTargetLen, next.begin() + i * kTargetLen + kObsLen);
      t.reward = next[static_cast<std::size_t>(i * kTargetLen + kObsLen)];
      t.done = t.reward >= done_at;
      current[r] = t.next_obs;
      if (t.done) {
        ++result.terminated;
      } else {
        still.push_back(r);
      }
      per_start[r].push_back(std::move(t));
    }
    active = std::move(still);
  }
  for (auto& steps : per_start) {
    for (auto& t : steps) result.transitions.push_back(std::move(t));
  }
  return result;
}

std::vector<Real> Ensemble::output_variance(int member) const {
  const auto lv = logvar(members_.at(static_cast<std::size_t>(member)));
  std::vector<Real> out(kTargetLen);
  for (int j = 0; j < kTargetLen; ++j) {
    const Real s = out_norm_.fitted() ? out_norm_.stddev[j] : 1;
    out[j] = std::exp(lv.data()[j]) * s * s;
  }
  return out;
}

void Ensemble::save(backbone::Checkpoint& ck, const std::string& prefix) const {
  for (int k = 0; k < size(); ++k) {
    const auto& m = members_[static_cast<std::size_t>(k)];
    const auto p = prefix + "member" + std::to_string(k) + ".";
    ck.add_module(p, m.net.named_parameters());
    ck.add(p + "raw_logvar", {kTargetLen}, m.raw_logvar.data());
    ck.add_optimizer(p + "opt", m.opt);
  }
  if (in_norm_.fitted()) {
    ck.add(prefix + "in_mean", {kInputLen}, in_norm_.mean);
    ck.add(prefix + "in_std", {kInputLen}, in_norm_.stddev);
    ck.add(prefix + "out_mean", {kTargetLen}, out_norm_.mean);
    ck.add(prefix + "out_std", {kTargetLen}, out_norm_.stddev);
  }
  ck.meta["ensemble"] = {{"members", size()}, {"elites", elites_}, {"val_losses", nlohmann::json::array()}};
  for (Real v : val_losses_) ck.meta["ensemble"]["val_losses"].push_back(std::isfinite(v) ? v : -1.0);
}

void Ensemble::load(const backbone::Checkpoint& ck, const std::string& prefix) {
  for (int k = 0; k < size(); ++k) {
    auto& m = members_[static_cast<std::size_t>(k)];
    const auto p = prefix + "member" + std::to_string(k) + ".";
    ck.load_module(p, m.net.named_parameters());
    const auto& lv = ck.get(p + "raw_logvar").values;
    std::copy(lv.begin(), lv.end(), m.raw_logvar.mutable_data().begin());
    ck.load_optimizer(p + "opt", m.opt);
  }
  if (ck.contains(prefix + "in_mean")) {
    in_norm_ = {ck.get(prefix + "in_mean").values, ck.get(prefix + "in_std").values};
    out_norm_ = {ck.get(prefix + "out_mean").values, ck.get(prefix + "out_std").values};
  }
  if (ck.meta.contains("ensemble")) {
    elites_ = ck.meta["ensemble"]["elites"].get<std::vector<int>>();
    val_losses_.clear();
    for (const auto& v : ck.meta["ensemble"]["val_losses"]) {
      const Real x = v.get<Real>();
      val_losses_.push_back(x < 0 ? std::numeric_limits<Real>::infinity() : x);
    }
  }
}

}  // namespace m3::worldmodel
