#include <chrono>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "gradcheck.hpp"
#include "m3/backbone/backbone.hpp"
#include "m3/backbone/checkpoint.hpp"

using namespace m3::backbone;
using namespace m3::numcore;
using m3::testing::max_gradient_error;
using m3::testing::random_tensor;

namespace {

BackboneConfig small_config(std::int64_t head_out = 3) {
  BackboneConfig c;
  c.d_model = 8;
  c.d_state = 4;
  c.n_layers = 2;
  c.head_out = head_out;
  return c;
}

// Step-by-step recurrence: the oracle for the scan-based kernel.
std::vector<Real> sequential_scan(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B,
                                  const Tensor& C, const Tensor& D, std::int64_t l, std::int64_t b) {
  const auto dn = A.dim(0), ds = A.dim(1);
  std::vector<Real> y(static_cast<std::size_t>(l * b * dn));
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t c = 0; c < dn; ++c) {
      std::vector<Real> h(static_cast<std::size_t>(ds), 0.0);
      for (std::int64_t t = 0; t < l; ++t) {
        const auto r = t * b + i;
        const Real dt = delta.data()[r * dn + c];
        const Real xv = x.data()[r * dn + c];
        Real acc = D.data()[c] * xv;
        for (std::int64_t s = 0; s < ds; ++s) {
          h[s] = std::exp(dt * A.data()[c * ds + s]) * h[s] + dt * B.data()[r * ds + s] * xv;
          acc += C.data()[r * ds + s] * h[s];
        }
        y[r * dn + c] = acc;
      }
    }
  }
  return y;
}

Tensor random_input(std::int64_t b, std::int64_t l, Rng& rng) { return random_tensor({b, l}, rng, -1, 1, false); }

}  // namespace

TEST_CASE("embedding shapes follow the packed lengths") {
  Backbone net(BackboneConfig{}, 1);
  Rng rng(1);
  CHECK(net.embed(random_input(3, 23, rng)).shape() == Shape{23 * 3, 64});
  CHECK(net.embed(random_input(2, 30, rng)).shape() == Shape{30 * 2, 64});
}

TEST_CASE("zero token through a zero bias-free embedding is the zero vector") {
  Backbone net(BackboneConfig{}, 1);
  for (auto& v : net.embed_weight.mutable_data()) v = 0;
  for (auto& v : net.embed_bias.mutable_data()) v = 0;
  const auto e = net.embed(Tensor::zeros({1, 1}));
  for (Real v : e.data()) CHECK(v == 0.0);
}

TEST_CASE("non-finite tokens are rejected") {
  Backbone net(small_config(), 1);
  auto x = Tensor::zeros({1, 4});
  x.mutable_data()[2] = std::nan("");
  CHECK_THROWS_AS(net.forward(x), NumericError);
}

TEST_CASE("ssm block: zero input with zero D and zero biases gives zero output") {
  BackboneConfig cfg;
  Rng rng(4);
  MambaBlock block(cfg, rng);
  for (auto& v : block.d_skip.mutable_data()) v = 0;
  for (auto& v : block.conv_bias.mutable_data()) v = 0;
  for (auto& v : block.dt_proj_bias.mutable_data()) v = 0;
  const auto y = block.forward(Tensor::zeros({5 * 2, 64}), 5, 2);
  for (Real v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("scan-based selective scan equals the sequential recurrence") {
  Rng rng(12);
  for (std::int64_t l : {1, 5, 23, 30}) {
    const std::int64_t b = 3, dn = 6, ds = 4;
    auto x = random_tensor({l * b, dn}, rng);
    auto delta = random_tensor({l * b, dn}, rng, 0.001, 0.5);
    auto A = random_tensor({dn, ds}, rng, -4, -0.5);
    auto B = random_tensor({l * b, ds}, rng);
    auto C = random_tensor({l * b, ds}, rng);
    auto D = random_tensor({dn}, rng);
    const auto y = selective_scan(x, delta, A, B, C, D, l, b);
    const auto ref = sequential_scan(x, delta, A, B, C, D, l, b);
    Real worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      worst = std::max(worst, std::abs(y.data()[i] - ref[i]) / std::max(std::abs(ref[i]), 1e-12));
    }
    CAPTURE(l);
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("selective scan gradients match finite differences") {
  Rng rng(13);
  const std::int64_t l = 9, b = 2, dn = 3, ds = 2;
  auto x = random_tensor({l * b, dn}, rng);
  auto delta = random_tensor({l * b, dn}, rng, 0.05, 0.8);
  auto A = random_tensor({dn, ds}, rng, -2, -0.5);
  auto B = random_tensor({l * b, ds}, rng);
  auto C = random_tensor({l * b, ds}, rng);
  auto D = random_tensor({dn}, rng);
  auto w = random_tensor({l * b, dn}, rng, -1, 1, false);
  CHECK(max_gradient_error([&] { return sum(selective_scan(x, delta, A, B, C, D, l, b) * w); },
                           {x, delta, A, B, C, D}) < 1e-4);
}

TEST_CASE("causality: later tokens never affect earlier outputs") {
  Backbone net(small_config(), 21);
  Rng rng(3);
  const std::int64_t b = 2, l = 12;
  auto x = random_input(b, l, rng);
  const auto base = net.encode(x);
  for (std::int64_t t : {0, 4, 11}) {
    auto x2 = Tensor::from({b, l}, std::vector<Real>(x.data().begin(), x.data().end()));
    x2.mutable_data()[1 * l + t] += 0.75;
    const auto out = net.encode(x2);
    const auto d = net.config().d_model;
    bool before_same = true;
    for (std::int64_t r = 0; r < t * b * d; ++r) before_same = before_same && out.data()[r] == base.data()[r];
    bool at_changed = false;
    for (std::int64_t j = 0; j < d; ++j) {
      at_changed = at_changed || out.data()[(t * b + 1) * d + j] != base.data()[(t * b + 1) * d + j];
    }
    CAPTURE(t);
    CHECK(before_same);
    CHECK(at_changed);
  }
}

TEST_CASE("readout of a prefix ignores appended tokens") {
  Backbone net(small_config(1), 5);
  Rng rng(8);
  const std::int64_t b = 3, l = 7;
  auto x = random_input(b, l + 4, rng);
  auto prefix = slice_cols(x, 0, l);
  const auto short_out = net.forward(prefix);
  const auto long_enc = net.encode(x);
  const auto long_out = net.readout(slice_rows(long_enc, 0, l * b), l, b);
  for (std::int64_t i = 0; i < b; ++i) CHECK(long_out.data()[i] == short_out.data()[i]);
}

TEST_CASE("role heads produce the documented widths") {
  Rng rng(2);
  BackboneConfig cfg;
  cfg.d_model = 16;
  cfg.d_state = 4;
  cfg.head_out = 14;
  CHECK(Backbone(cfg, 1).forward(random_input(2, 23, rng)).shape() == Shape{2, 14});
  cfg.head_out = 1;
  CHECK(Backbone(cfg, 1).forward(random_input(2, 30, rng)).shape() == Shape{2, 1});
  cfg.head_out = 24;
  CHECK(Backbone(cfg, 1).forward(random_input(2, 30, rng)).shape() == Shape{2, 24});
}

TEST_CASE("full backbone gradients match finite differences") {
  Backbone net(small_config(2), 77);
  Rng rng(6);
  auto x = random_input(2, 5, rng);
  auto target = random_tensor({2, 2}, rng, -1, 1, false);
  auto loss = [&] { return sum(square(net.forward(x) - target)); };
  CHECK(max_gradient_error(loss, net.parameters()) < 1e-4);
}

TEST_CASE("parameter count with the default dims is stable") {
  BackboneConfig cfg;
  cfg.head_out = 1;
  const auto n1 = Backbone(cfg, 1).parameter_count();
  const auto n2 = Backbone(cfg, 99).parameter_count();
  CHECK(n1 == n2);
  MESSAGE("critic backbone parameters (d_model 64, d_state 16, 2 layers): " << n1);
  // embed 128, per layer 64 + 16384 + 512 + 128 + 4608 + 512 + 128 + 2048 + 128 + 8192, head 65
  CHECK(n1 == 128 + 2 * 32704 + 65);
}

TEST_CASE("runtime grows about linearly with sequence length") {
  BackboneConfig cfg;
  cfg.d_model = 16;
  cfg.d_state = 8;
  Backbone net(cfg, 3);
  Rng rng(1);
  auto time_for = [&](std::int64_t l) {
    auto x = random_input(8, l, rng);
    double best = 1e30;
    for (int rep = 0; rep < 9; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      NoGradGuard g;
      (void)net.forward(x);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
  };
  const double t1 = time_for(48);
  const double t2 = time_for(96);
  MESSAGE("forward l=48: " << t1 << " s, l=96: " << t2 << " s");
  CHECK(t2 <= 2.5 * t1);
}

TEST_CASE("checkpoint container round-trips parameters and optimizer state") {
  Backbone a(small_config(), 1), b(small_config(), 2);
  Adam opt(a.parameters());
  for (auto& p : opt.params()) {
    for (auto& g : p.mutable_grad()) g = 0.1;
  }
  opt.step();
  Checkpoint ck;
  ck.meta["role"] = "critic";
  ck.add_module("critic.", a.named_parameters());
  ck.add_optimizer("critic.opt", opt);
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.meta["role"] == "critic");
  back.load_module("critic.", b.named_parameters());
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t j = 0; j < pa[i].tensor.data().size(); ++j) {
      CHECK(pb[i].tensor.data()[j] == static_cast<double>(static_cast<float>(pa[i].tensor.data()[j])));
    }
  }
  Adam opt2(b.parameters());
  back.load_optimizer("critic.opt", opt2);
  CHECK(opt2.step_count() == 1);

  SUBCASE("a flipped byte fails the checksum") {
    auto corrupt = bytes;
    corrupt[corrupt.size() / 2] ^= 0x40;
    CHECK_THROWS_WITH_AS(decode_checkpoint(corrupt), doctest::Contains("checksum"), CheckpointError);
  }
  SUBCASE("a different format version is named in the error") {
    auto other = bytes;
    other[8] = 9;
    CHECK_THROWS_WITH_AS(decode_checkpoint(other), doctest::Contains("version 9"), CheckpointError);
  }
  SUBCASE("file round trip") {
    const auto path = std::filesystem::temp_directory_path() / "m3_backbone_test.m3ck";
    write_checkpoint(path, ck);
    CHECK(read_checkpoint(path).tensors.size() == ck.tensors.size());
    std::filesystem::remove(path);
  }
}
