#include "m3/backbone/backbone.hpp"

#include "m3/numcore/vecmath.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace m3::backbone {

using namespace numcore;

void BackboneConfig::validate() const {
  if (d_model < 1 || d_state < 1 || conv_width < 1 || expand < 1 || n_layers < 1 || head_out < 1) {
    throw std::invalid_argument("backbone config: all dimensions must be >= 1");
  }
  if (!(dt_min > 0 && dt_max >= dt_min)) throw std::invalid_argument("backbone config: need 0 < dt_min <= dt_max");
}

namespace {

Tensor param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

Tensor fan_in_param(Shape shape, std::int64_t fan_in, Rng& rng) {
  auto t = param(std::move(shape));
  uniform_fill(t, Real{1} / std::sqrt(static_cast<Real>(fan_in)), rng);
  return t;
}

}  // namespace

Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C,
                      const Tensor& D, std::int64_t length, std::int64_t batch) {
  const auto rows = length * batch;
  const auto dn = A.dim(0);
  const auto ds = A.dim(1);
  if (x.shape() != Shape{rows, dn} || delta.shape() != x.shape()) {
    throw ShapeError("selective_scan: x " + shape_str(x.shape()) + " / delta " + shape_str(delta.shape()) +
                     " must be " + shape_str({rows, dn}));
  }
  if (B.shape() != Shape{rows, ds} || C.shape() != B.shape() || D.numel() != dn) {
    throw ShapeError("selective_scan: B " + shape_str(B.shape()) + ", C " + shape_str(C.shape()) + ", D " +
                     shape_str(D.shape()) + " inconsistent with A " + shape_str(A.shape()));
  }
  const auto width = batch * dn * ds;

  // Discretized coefficients laid out [t][i][c][s]; states overwrite bx.
  const auto total = static_cast<std::size_t>(length * width);
  auto discretize = [=](Real* da, Real* bx) {
    const auto xv = x.data(), dv = delta.data(), av = A.data(), bv = B.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < dn; ++c) {
        const Real dt = dv[r * dn + c];
        const Real dtx = dt * xv[r * dn + c];
        const auto base = (r * dn + c) * ds;
        for (std::int64_t s = 0; s < ds; ++s) {
          da[base + s] = dt * av[c * ds + s];
          bx[base + s] = dtx * bv[r * ds + s];
        }
      }
    }
    vec::exp_inplace({da, total});
  };
  // Scratch buffers are fully overwritten, so skip the zero fill.
  auto scratch = [total] { return std::unique_ptr<Real[]>(new Real[total]); };

  auto da = scratch(), h = scratch();
  discretize(da.get(), h.get());
  scan_linear_recurrence({da.get(), total}, {h.get(), total}, length, width);

  std::vector<Real> y(static_cast<std::size_t>(rows * dn));
  {
    const auto xv = x.data(), cv = C.data(), dv = D.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < dn; ++c) {
        const Real* hs = h.get() + (r * dn + c) * ds;
        Real acc = dv[c] * xv[r * dn + c];
        for (std::int64_t s = 0; s < ds; ++s) acc += cv[r * ds + s] * hs[s];
        y[r * dn + c] = acc;
      }
    }
  }

  return make_result(
      {rows, dn}, std::move(y), {x, delta, A, B, C, D},
      [=](Node& self) {
        auto da = scratch(), h = scratch();
        discretize(da.get(), h.get());
        // Plain recurrence keeps da intact for the adjoint pass below.
        for (std::int64_t t = 1; t < length; ++t) {
          Real* ht = h.get() + t * width;
          const Real* at = da.get() + t * width;
          const Real* hp = ht - width;
          for (std::int64_t j = 0; j < width; ++j) ht[j] += at[j] * hp[j];
        }
        const auto xv = x.data(), dv = delta.data(), av = A.data(), bv = B.data(), cv = C.data(), Dv = D.data();
        auto grad_of = [](const Tensor& t) -> std::span<Real> {
          return t.requires_grad() ? t.node()->grad_buffer() : std::span<Real>{};
        };
        auto gx = grad_of(x), gdelta = grad_of(delta), gA = grad_of(A), gB = grad_of(B), gC = grad_of(C),
             gD = grad_of(D);
        const auto& gy = self.grad;

        // carry[i][c][s] = exp(delta_{t+1} A) * G_{t+1}
        std::vector<Real> carry(static_cast<std::size_t>(width), Real{0});
        for (std::int64_t t = length - 1; t >= 0; --t) {
          for (std::int64_t i = 0; i < batch; ++i) {
            const auto r = t * batch + i;
            for (std::int64_t c = 0; c < dn; ++c) {
              const auto rc = r * dn + c;
              const Real g = gy[rc];
              const Real xval = xv[rc];
              const Real dt = dv[rc];
              if (!gD.empty()) gD[c] += g * xval;
              Real gx_acc = g * Dv[c];
              Real gdt_acc = 0;
              const auto hb = rc * ds;
              const auto cb = (i * dn + c) * ds;
              for (std::int64_t s = 0; s < ds; ++s) {
                const Real hts = h[hb + s];
                if (!gC.empty()) gC[r * ds + s] += g * hts;
                const Real G = g * cv[r * ds + s] + carry[cb + s];
                // h_t = da_t * h_{t-1} + dt * B * x
                const Real bval = bv[r * ds + s];
                gdt_acc += G * bval * xval;
                if (!gB.empty()) gB[r * ds + s] += G * dt * xval;
                gx_acc += G * dt * bval;
                const Real dat = da[hb + s];
                if (t > 0) {
                  const Real hprev = h[hb - batch * dn * ds + s];
                  const Real gda = G * hprev * dat;
                  gdt_acc += gda * av[c * ds + s];
                  if (!gA.empty()) gA[c * ds + s] += gda * dt;
                }
                carry[cb + s] = G * dat;
              }
              if (!gx.empty()) gx[rc] += gx_acc;
              if (!gdelta.empty()) gdelta[rc] += gdt_acc;
            }
          }
        }
      });
}

MambaBlock::MambaBlock(const BackboneConfig& config, Rng& rng)
    : d_inner_(config.d_inner()), d_state_(config.d_state), dt_rank_(config.resolved_dt_rank()) {
  const auto dm = config.d_model;
  norm_weight = Tensor::full({dm}, Real{1}, true);
  in_proj = fan_in_param({dm, 2 * d_inner_}, dm, rng);
  conv_weight = fan_in_param({d_inner_, config.conv_width}, config.conv_width, rng);
  conv_bias = fan_in_param({d_inner_}, config.conv_width, rng);
  x_proj = fan_in_param({d_inner_, dt_rank_ + 2 * d_state_}, d_inner_, rng);
  dt_proj_weight = fan_in_param({dt_rank_, d_inner_}, dt_rank_, rng);

  // Step-size bias is the inverse softplus of a log-uniform draw in
  // [dt_min, dt_max], so softplus(bias) starts inside that interval.
  dt_proj_bias = param({d_inner_});
  {
    auto b = dt_proj_bias.mutable_data();
    const Real lo = std::log(config.dt_min), hi = std::log(config.dt_max);
    for (auto& v : b) {
      const Real dt = std::exp(rng.uniform(lo, hi));
      v = dt + std::log(-std::expm1(-dt));
    }
  }
  a_log = param({d_inner_, d_state_});
  {
    auto a = a_log.mutable_data();
    for (std::int64_t c = 0; c < d_inner_; ++c) {
      for (std::int64_t s = 0; s < d_state_; ++s) a[c * d_state_ + s] = std::log(static_cast<Real>(s + 1));
    }
  }
  d_skip = Tensor::full({d_inner_}, Real{1}, true);
  out_proj = fan_in_param({d_inner_, dm}, d_inner_, rng);
}

Tensor MambaBlock::forward(const Tensor& u, std::int64_t length, std::int64_t batch) const {
  const auto xn = rms_norm(u, norm_weight);
  const auto xz = matmul(xn, in_proj);
  const auto xb = slice_cols(xz, 0, d_inner_);
  const auto z = slice_cols(xz, d_inner_, d_inner_);
  const auto xc = silu(causal_conv1d(xb, conv_weight, conv_bias, length, batch));
  const auto proj = matmul(xc, x_proj);
  const auto dt = slice_cols(proj, 0, dt_rank_);
  const auto b = slice_cols(proj, dt_rank_, d_state_);
  const auto c = slice_cols(proj, dt_rank_ + d_state_, d_state_);
  const auto delta = softplus(linear(dt, dt_proj_weight, dt_proj_bias));
  const auto a = neg(numcore::exp(a_log));
  const auto y = selective_scan(xc, delta, a, b, c, d_skip, length, batch);
  return u + matmul(y * silu(z), out_proj);
}

void MambaBlock::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + "norm.weight", norm_weight});
  out.push_back({prefix + "in_proj.weight", in_proj});
  out.push_back({prefix + "conv.weight", conv_weight});
  out.push_back({prefix + "conv.bias", conv_bias});
  out.push_back({prefix + "x_proj.weight", x_proj});
  out.push_back({prefix + "dt_proj.weight", dt_proj_weight});
  out.push_back({prefix + "dt_proj.bias", dt_proj_bias});
  out.push_back({prefix + "A_log", a_log});
  out.push_back({prefix + "D", d_skip});
  out.push_back({prefix + "out_proj.weight", out_proj});
}

Backbone::Backbone(BackboneConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  embed_weight = fan_in_param({1, config_.d_model}, 1, rng);
  embed_bias = fan_in_param({config_.d_model}, 1, rng);
  blocks_.reserve(static_cast<std::size_t>(config_.n_layers));
  for (std::int64_t i = 0; i < config_.n_layers; ++i) blocks_.emplace_back(config_, rng);
  head_weight = fan_in_param({config_.d_model, config_.head_out}, config_.d_model, rng);
  head_bias = fan_in_param({config_.head_out}, config_.d_model, rng);
}

Tensor Backbone::embed(const Tensor& x) const {
  if (x.rank() != 2) throw ShapeError("backbone input must be [batch, length], got " + shape_str(x.shape()));
  for (Real v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("backbone input contains a non-finite token");
  }
  const auto b = x.dim(0), l = x.dim(1);
  const auto tokens = reshape(transpose(x), {l * b, 1});
  return linear(tokens, embed_weight, embed_bias);
}

Tensor Backbone::encode(const Tensor& x) const {
  const auto b = x.dim(0), l = x.dim(1);
  auto y = embed(x);
  for (const auto& block : blocks_) y = block.forward(y, l, b);
  return y;
}

Tensor Backbone::readout(const Tensor& y, std::int64_t length, std::int64_t batch) const {
  if (length < 1) throw ShapeError("readout needs at least one position");
  const auto last = slice_rows(y, (length - 1) * batch, batch);
  return linear(silu(last), head_weight, head_bias);
}

Tensor Backbone::forward(const Tensor& x) const {
  auto out = readout(encode(x), x.dim(1), x.dim(0));
  for (Real v : out.data()) {
    if (!std::isfinite(v)) throw NumericError("backbone produced a non-finite output");
  }
  return out;
}

std::vector<NamedParam> Backbone::named_parameters() const {
  std::vector<NamedParam> out;
  out.push_back({"embed.weight", embed_weight});
  out.push_back({"embed.bias", embed_bias});
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("layers." + std::to_string(i) + ".", out);
  out.push_back({"head.weight", head_weight});
  out.push_back({"head.bias", head_bias});
  return out;
}

std::vector<Tensor> Backbone::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

std::int64_t Backbone::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

void Backbone::copy_from(const Backbone& other) {
  auto dst = named_parameters();
  const auto src = other.named_parameters();
  if (dst.size() != src.size()) throw std::invalid_argument("copy_from: backbone layouts differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw ShapeError("copy_from: " + dst[i].name + " has shape " + shape_str(dst[i].tensor.shape()) + " vs " +
                       shape_str(src[i].tensor.shape()));
    }
    auto d = dst[i].tensor.mutable_data();
    const auto s = src[i].tensor.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

void Backbone::soft_update_from(const Backbone& other, Real tau) {
  auto dst = named_parameters();
  const auto src = other.named_parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i].tensor.mutable_data();
    const auto s = src[i].tensor.data();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = (Real{1} - tau) * d[j] + tau * s[j];
  }
}

}  // namespace m3::backbone
