#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dice/common.hpp"

namespace dice {

struct ModelConfig {
  int num_layers = 28;
  int num_experts = 8;
  int num_shared = 2;
  int top_k = 2;
  int hidden_dim = 32;
  int expert_dim = 32;
  int num_tokens = 16;  // tokens per sample
  int batch = 4;
  int num_steps = 50;
  double step_size = 0.1;

  /// Throws ConfigError naming the first offending field.
  void validate() const;

  /// Activation rows of one sampling run (batch * num_tokens).
  std::size_t rows() const noexcept {
    return static_cast<std::size_t>(batch) * static_cast<std::size_t>(num_tokens);
  }

  /// 28 layers, 8 routed + 2 shared experts.
  static ModelConfig xl_toy();
  /// 40 layers, 16 routed + 2 shared experts.
  static ModelConfig g_toy();
  /// Case-insensitive lookup of "XL-toy" / "G-toy".
  static ModelConfig preset(const std::string& name);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ExpertWeights {
  Matrix w1;  // hidden x expert_dim
  Matrix w2;  // expert_dim x hidden
};

struct LayerWeights {
  Matrix mix;   // hidden x hidden
  Matrix gate;  // hidden x num_experts
  std::vector<ExpertWeights> experts;
  std::vector<ExpertWeights> shared;
};

/// Deterministic MoE denoiser. Weights are a pure function of (config, seed).
struct ToyModel {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<LayerWeights> layers;

  /// Hash over every weight in initialization order.
  std::uint64_t fingerprint() const;
};

/// Token activations tagged with the step that produced them.
struct ActivationBlock {
  Matrix values;  // rows x hidden
  int generated_step = 0;
  int layer = 0;
};

/// Per-token top-k assignment. Slot 0 holds the highest raw score.
struct RouteDecision {
  int top_k = 0;
  int num_experts = 0;
  std::vector<int> expert_ids;  // rows * top_k
  std::vector<double> gates;    // rows * top_k, renormalized over the selection
  std::vector<double> scores;   // rows * num_experts, full softmax

  std::size_t num_tokens() const noexcept {
    return top_k == 0 ? 0 : expert_ids.size() / static_cast<std::size_t>(top_k);
  }
  int expert(std::size_t token, int slot) const { return expert_ids[token * top_k + slot]; }
  double gate(std::size_t token, int slot) const { return gates[token * top_k + slot]; }

  friend bool operator==(const RouteDecision&, const RouteDecision&) = default;
};

/// Weights drawn from one splitmix64 stream in layer-major order; within a layer:
/// mix, gate, then (w1, w2) of each routed expert, then (w1, w2) of each shared
/// expert; row-major within a matrix. Entries are uniform in [-a, a) with
/// a = sqrt(1 / fan_in).
ToyModel init_model(const ModelConfig& config, std::uint64_t seed);

/// Initial sample x0 (generated_step 0), uniform in [-1, 1).
ActivationBlock initial_sample(const ModelConfig& config, std::uint64_t seed);

/// Softmax router with low-index tie-break and top-k renormalization.
RouteDecision gate(const ToyModel& model, int layer, const Matrix& x);

/// Routing from raw logits; exposed so the router can be probed directly.
RouteDecision route_from_logits(const Matrix& logits, int top_k);

/// tokens * W1 -> gelu -> * W2.
Matrix expert_forward(const ToyModel& model, int layer, int expert_id, const Matrix& tokens);

/// Expert FFN applied to a single token row, written into `out`.
void expert_row(const ExpertWeights& w, std::span<const double> token, std::span<double> out);

/// Sum of all shared-expert outputs (zero matrix when num_shared == 0).
Matrix shared_forward(const ToyModel& model, int layer, const Matrix& x);

/// y = gelu(x * W_mix) + x. Provenance is copied from x.
ActivationBlock local_block(const ToyModel& model, int layer, const ActivationBlock& x);

/// Per-slot routed outputs: slot s, row t = expert(route.expert(t, s)) applied to x row t.
/// When `active` is non-empty only pairs with active[t * k + s] != 0 are evaluated;
/// the remaining rows are left at zero.
std::vector<Matrix> routed_outputs(const ToyModel& model, int layer, const Matrix& x,
                                   const RouteDecision& route,
                                   std::span<const std::uint8_t> active = {});

/// out = shared_out + sum_s scale_route.gates[s] * expert_outs[s], left to right.
/// `route` only fixes the expected shape; scaling always uses `scale_route`.
Matrix combine_outputs(const RouteDecision& route, std::span<const Matrix> expert_outs,
                       const Matrix& shared_out, const RouteDecision& scale_route);

/// Per-row RMS normalization of the final hidden state; the denoiser velocity.
Matrix output_head(const Matrix& hidden);

/// x_{s+1} = x_s - eta * y_s, tagged with step s + 1.
ActivationBlock denoise_update(const ActivationBlock& x, const Matrix& y, double eta, int step);

/// Full synchronous forward of one step: returns the layer-stack output.
/// Optionally records each layer's MoE input and route.
Matrix forward_step(const ToyModel& model, const Matrix& x, std::vector<Matrix>* moe_inputs = nullptr,
                    std::vector<RouteDecision>* routes = nullptr);

struct StepSimilarity {
  std::vector<double> cosine;     // per layer, mean over adjacent step pairs
  std::vector<double> agreement;  // per layer, fraction of tokens with unchanged top-1 expert
  double mean_cosine = 0.0;
  double mean_agreement = 0.0;
};

/// Cosine of two flattened matrices (0 when either is all-zero).
double cosine_similarity(const Matrix& a, const Matrix& b);

/// inputs[step][layer], top1[step][layer][token].
StepSimilarity step_similarity(const std::vector<std::vector<Matrix>>& inputs,
                               const std::vector<std::vector<std::vector<int>>>& top1 = {});

}  // namespace dice
