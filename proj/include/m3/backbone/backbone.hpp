#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m3/numcore/ops.hpp"
#include "m3/numcore/random.hpp"

namespace m3::backbone {

using numcore::Real;
using numcore::Tensor;

struct BackboneConfig {
  std::int64_t d_model = 64;
  std::int64_t d_state = 16;
  std::int64_t conv_width = 4;
  std::int64_t expand = 2;
  std::int64_t n_layers = 2;
  std::int64_t head_out = 1;
  // Rank of the step-size projection; 0 selects ceil(d_model / 16).
  std::int64_t dt_rank = 0;
  Real dt_min = 1e-3;
  Real dt_max = 1e-1;

  std::int64_t d_inner() const { return expand * d_model; }
  std::int64_t resolved_dt_rank() const { return dt_rank > 0 ? dt_rank : (d_model + 15) / 16; }
  void validate() const;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Selective state-space scan, fused forward and backward.
//
//   x, delta : [l * b, d_inner]     A : [d_inner, d_state] (negative reals)
//   B, C     : [l * b, d_state]     D : [d_inner]
//
//   h_t = exp(delta_t * A) (.) h_{t-1} + delta_t * B_t * x_t
//   y_t = C_t . h_t + D (.) x_t
//
// The recurrence is evaluated with the chunked associative scan from
// numcore; the backward pass recomputes the states instead of storing them.
Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C,
                      const Tensor& D, std::int64_t length, std::int64_t batch);

// One residual Mamba block on a sequence tensor [l * b, d_model].
class MambaBlock {
public:
  MambaBlock(const BackboneConfig& config, numcore::Rng& rng);

  Tensor forward(const Tensor& u, std::int64_t length, std::int64_t batch) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;

  Tensor norm_weight;
  Tensor in_proj;
  Tensor conv_weight;
  Tensor conv_bias;
  Tensor x_proj;
  Tensor dt_proj_weight;
  Tensor dt_proj_bias;
  Tensor a_log;
  Tensor d_skip;
  Tensor out_proj;

private:
  std::int64_t d_inner_;
  std::int64_t d_state_;
  std::int64_t dt_rank_;
};

// Scalar-token embedding, a stack of Mamba blocks and a readout head on the
// final position. Input rows are packed vectors [b, l]; each entry is one
// token.
class Backbone {
public:
  Backbone(BackboneConfig config, std::uint64_t seed);
  // Parameters are shared handles; copying would alias them. Use copy_from.
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;
  Backbone(Backbone&&) = default;
  Backbone& operator=(Backbone&&) = default;

  const BackboneConfig& config() const { return config_; }

  // [b, l] -> [l * b, d_model]
  Tensor embed(const Tensor& x) const;
  // embed followed by every block; [b, l] -> [l * b, d_model]
  Tensor encode(const Tensor& x) const;
  // Head applied to the final position only; [l * b, d_model] -> [b, head_out]
  Tensor readout(const Tensor& y, std::int64_t length, std::int64_t batch) const;
  // [b, l] -> [b, head_out]. Throws NumericError on non-finite input.
  Tensor forward(const Tensor& x) const;

  std::vector<NamedParam> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;

  const std::vector<MambaBlock>& blocks() const { return blocks_; }
  std::vector<MambaBlock>& blocks() { return blocks_; }

  Tensor embed_weight;
  Tensor embed_bias;
  Tensor head_weight;
  Tensor head_bias;

  // Copies every parameter value from a backbone with the same config.
  void copy_from(const Backbone& other);
  // this <- (1 - tau) * this + tau * other
  void soft_update_from(const Backbone& other, Real tau);

private:
  BackboneConfig config_;
  std::vector<MambaBlock> blocks_;
};

}  // namespace m3::backbone
