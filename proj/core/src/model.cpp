#include "dice/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

namespace dice {

namespace {

void require_positive(int value, const char* field) {
  if (value < 1) {
    throw ConfigError(std::string("model.") + field + ": must be a positive integer, got " +
                      std::to_string(value));
  }
}

Matrix draw_matrix(SplitMix64& rng, std::size_t rows, std::size_t cols, std::size_t fan_in) {
  const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = rng.next_symmetric(a);
  return m;
}

ExpertWeights draw_expert(SplitMix64& rng, std::size_t hidden, std::size_t expert_dim) {
  ExpertWeights w;
  w.w1 = draw_matrix(rng, hidden, expert_dim, hidden);
  w.w2 = draw_matrix(rng, expert_dim, hidden, expert_dim);
  return w;
}

void check_layer(const ToyModel& model, int layer) {
  if (layer < 0 || layer >= model.config.num_layers) {
    throw ContractError("layer index " + std::to_string(layer) + " out of range [0, " +
                        std::to_string(model.config.num_layers) + ")");
  }
}

void check_width(const ToyModel& model, const Matrix& x, const char* op) {
  if (x.cols() != static_cast<std::size_t>(model.config.hidden_dim)) {
    throw ContractError(std::string(op) + ": expected " + std::to_string(model.config.hidden_dim) +
                        " columns, got " + std::to_string(x.cols()));
  }
}

}  // namespace

void ModelConfig::validate() const {
  require_positive(num_layers, "num_layers");
  require_positive(num_experts, "num_experts");
  require_positive(top_k, "top_k");
  require_positive(hidden_dim, "hidden_dim");
  require_positive(expert_dim, "expert_dim");
  require_positive(num_tokens, "num_tokens");
  require_positive(batch, "batch");
  require_positive(num_steps, "num_steps");
  if (num_shared < 0) {
    throw ConfigError("model.num_shared: must be non-negative, got " + std::to_string(num_shared));
  }
  if (top_k > num_experts) {
    throw ConfigError("model.top_k: " + std::to_string(top_k) + " exceeds num_experts " +
                      std::to_string(num_experts));
  }
  if (!std::isfinite(step_size)) throw ConfigError("model.step_size: must be finite");
}

ModelConfig ModelConfig::xl_toy() { return ModelConfig{}; }

ModelConfig ModelConfig::g_toy() {
  ModelConfig c;
  c.num_layers = 40;
  c.num_experts = 16;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  std::string lower;
  std::transform(name.begin(), name.end(), std::back_inserter(lower),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  if (lower == "xl-toy") return xl_toy();
  if (lower == "g-toy") return g_toy();
  throw ConfigError("model.preset: unknown preset '" + name + "' (expected XL-toy or G-toy)");
}

std::uint64_t ToyModel::fingerprint() const {
  std::uint64_t h = dice::fingerprint({});
  for (const auto& lw : layers) {
    h = dice::fingerprint(lw.mix.flat(), h);
    h = dice::fingerprint(lw.gate.flat(), h);
    for (const auto& e : lw.experts) {
      h = dice::fingerprint(e.w1.flat(), h);
      h = dice::fingerprint(e.w2.flat(), h);
    }
    for (const auto& e : lw.shared) {
      h = dice::fingerprint(e.w1.flat(), h);
      h = dice::fingerprint(e.w2.flat(), h);
    }
  }
  return h;
}

ToyModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto hidden = static_cast<std::size_t>(config.hidden_dim);
  const auto expert_dim = static_cast<std::size_t>(config.expert_dim);
  ToyModel model;
  model.config = config;
  model.seed = seed;
  model.layers.resize(static_cast<std::size_t>(config.num_layers));
  SplitMix64 rng(seed);
  for (auto& lw : model.layers) {
    lw.mix = draw_matrix(rng, hidden, hidden, hidden);
    lw.gate = draw_matrix(rng, hidden, static_cast<std::size_t>(config.num_experts), hidden);
    for (int e = 0; e < config.num_experts; ++e) lw.experts.push_back(draw_expert(rng, hidden, expert_dim));
    for (int e = 0; e < config.num_shared; ++e) lw.shared.push_back(draw_expert(rng, hidden, expert_dim));
  }
  return model;
}

ActivationBlock initial_sample(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SplitMix64 rng(seed ^ 0x5851F42D4C957F2DULL);
  ActivationBlock x{Matrix(config.rows(), static_cast<std::size_t>(config.hidden_dim)), 0, 0};
  for (double& v : x.values.flat()) v = rng.next_symmetric(1.0);
  return x;
}

RouteDecision route_from_logits(const Matrix& logits, int top_k) {
  const auto num_experts = static_cast<int>(logits.cols());
  if (top_k < 1 || top_k > num_experts) {
    throw ContractError("route_from_logits: top_k " + std::to_string(top_k) + " not in [1, " +
                        std::to_string(num_experts) + "]");
  }
  if (!logits.all_finite()) throw NumericalError("router received non-finite activations");

  RouteDecision r;
  r.top_k = top_k;
  r.num_experts = num_experts;
  r.expert_ids.resize(logits.rows() * top_k);
  r.gates.resize(logits.rows() * top_k);
  r.scores.resize(logits.rows() * num_experts);

  std::vector<int> order(static_cast<std::size_t>(num_experts));
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    auto row = logits.row(t);
    std::span<double> scores(r.scores.data() + t * num_experts, static_cast<std::size_t>(num_experts));
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (int e = 0; e < num_experts; ++e) {
      scores[e] = std::exp(row[e] - peak);
      total += scores[e];
    }
    for (double& s : scores) s /= total;

    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + top_k, order.end(), [&](int a, int b) {
      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    });
    double selected = 0.0;
    for (int s = 0; s < top_k; ++s) selected += scores[order[s]];
    for (int s = 0; s < top_k; ++s) {
      r.expert_ids[t * top_k + s] = order[s];
      r.gates[t * top_k + s] = scores[order[s]] / selected;
    }
  }
  return r;
}

RouteDecision gate(const ToyModel& model, int layer, const Matrix& x) {
  check_layer(model, layer);
  check_width(model, x, "gate");
  if (!x.all_finite()) throw NumericalError("gate: non-finite activations", -1, layer);
  return route_from_logits(matmul(x, model.layers[layer].gate), model.config.top_k);
}

void expert_row(const ExpertWeights& w, std::span<const double> token, std::span<double> out) {
  const std::size_t inner = w.w1.cols();
  std::vector<double> hidden(inner, 0.0);
  for (std::size_t p = 0; p < token.size(); ++p) {
    const double s = token[p];
    auto src = w.w1.row(p);
    for (std::size_t j = 0; j < inner; ++j) hidden[j] += s * src[j];
  }
  for (double& v : hidden) v = gelu(v);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t p = 0; p < inner; ++p) {
    const double s = hidden[p];
    auto src = w.w2.row(p);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += s * src[j];
  }
}

Matrix expert_forward(const ToyModel& model, int layer, int expert_id, const Matrix& tokens) {
  check_layer(model, layer);
  check_width(model, tokens, "expert_forward");
  if (expert_id < 0 || expert_id >= model.config.num_experts) {
    throw ContractError("expert_forward: expert id " + std::to_string(expert_id) + " out of range");
  }
  const auto& w = model.layers[layer].experts[expert_id];
  Matrix out(tokens.rows(), tokens.cols());
  for (std::size_t t = 0; t < tokens.rows(); ++t) expert_row(w, tokens.row(t), out.row(t));
  return out;
}

Matrix shared_forward(const ToyModel& model, int layer, const Matrix& x) {
  check_layer(model, layer);
  check_width(model, x, "shared_forward");
  Matrix out(x.rows(), x.cols());
  std::vector<double> buf(x.cols());
  for (const auto& w : model.layers[layer].shared) {
    for (std::size_t t = 0; t < x.rows(); ++t) {
      expert_row(w, x.row(t), buf);
      auto dst = out.row(t);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += buf[j];
    }
  }
  return out;
}

ActivationBlock local_block(const ToyModel& model, int layer, const ActivationBlock& x) {
  check_layer(model, layer);
  check_width(model, x.values, "local_block");
  ActivationBlock y{matmul(x.values, model.layers[layer].mix), x.generated_step, x.layer};
  auto out = y.values.flat();
  auto in = x.values.flat();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu(out[i]) + in[i];
  return y;
}

std::vector<Matrix> routed_outputs(const ToyModel& model, int layer, const Matrix& x,
                                   const RouteDecision& route, std::span<const std::uint8_t> active) {
  check_layer(model, layer);
  check_width(model, x, "routed_outputs");
  const int k = route.top_k;
  if (route.num_tokens() != x.rows()) {
    throw ContractError("routed_outputs: route covers " + std::to_string(route.num_tokens()) +
                        " tokens, activations have " + std::to_string(x.rows()));
  }
  if (!active.empty() && active.size() != x.rows() * k) {
    throw ContractError("routed_outputs: active mask has wrong size");
  }
  std::vector<Matrix> outs(static_cast<std::size_t>(k), Matrix(x.rows(), x.cols()));
  const auto& experts = model.layers[layer].experts;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (int s = 0; s < k; ++s) {
      if (!active.empty() && active[t * k + s] == 0) continue;
      expert_row(experts[route.expert(t, s)], x.row(t), outs[s].row(t));
    }
  }
  return outs;
}

Matrix combine_outputs(const RouteDecision& route, std::span<const Matrix> expert_outs,
                       const Matrix& shared_out, const RouteDecision& scale_route) {
  const auto k = static_cast<std::size_t>(route.top_k);
  if (expert_outs.size() != k || scale_route.top_k != route.top_k) {
    throw ContractError("combine_outputs: expected " + std::to_string(k) + " expert slots, got " +
                        std::to_string(expert_outs.size()));
  }
  if (scale_route.num_tokens() != shared_out.rows()) {
    throw ContractError("combine_outputs: scale route token count does not match outputs");
  }
  for (const auto& m : expert_outs) {
    if (m.rows() != shared_out.rows() || m.cols() != shared_out.cols()) {
      throw ContractError("combine_outputs: expert output shape mismatch");
    }
  }
  Matrix out = shared_out;
  for (std::size_t t = 0; t < out.rows(); ++t) {
    auto dst = out.row(t);
    for (std::size_t s = 0; s < k; ++s) {
      const double g = scale_route.gate(t, static_cast<int>(s));
      auto src = expert_outs[s].row(t);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g * src[j];
    }
  }
  return out;
}

Matrix output_head(const Matrix& hidden) {
  Matrix y = hidden;
  for (std::size_t t = 0; t < y.rows(); ++t) {
    auto r = y.row(t);
    double sq = 0.0;
    for (double v : r) sq += v * v;
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(r.size()) + 1e-12);
    for (double& v : r) v *= inv;
  }
  return y;
}

ActivationBlock denoise_update(const ActivationBlock& x, const Matrix& y, double eta, int step) {
  if (x.values.rows() != y.rows() || x.values.cols() != y.cols()) {
    throw ContractError("denoise_update: shape mismatch between sample and velocity");
  }
  ActivationBlock next{x.values, step + 1, x.layer};
  auto dst = next.values.flat();
  auto v = y.flat();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= eta * v[i];
  return next;
}

Matrix forward_step(const ToyModel& model, const Matrix& x, std::vector<Matrix>* moe_inputs,
                    std::vector<RouteDecision>* routes) {
  ActivationBlock h{x, 0, 0};
  for (int l = 0; l < model.config.num_layers; ++l) {
    h = local_block(model, l, h);
    RouteDecision r = gate(model, l, h.values);
    auto outs = routed_outputs(model, l, h.values, r);
    Matrix moe = combine_outputs(r, outs, shared_forward(model, l, h.values), r);
    if (moe_inputs) moe_inputs->push_back(h.values);
    auto dst = h.values.flat();
    auto add = moe.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += add[i];
    if (routes) routes->push_back(std::move(r));
  }
  return h.values;
}

double cosine_similarity(const Matrix& a, const Matrix& b) {
  if (a.size() != b.size()) throw ContractError("cosine_similarity: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  auto fa = a.flat();
  auto fb = b.flat();
  for (std::size_t i = 0; i < fa.size(); ++i) {
    dot += fa[i] * fb[i];
    na += fa[i] * fa[i];
    nb += fb[i] * fb[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

StepSimilarity step_similarity(const std::vector<std::vector<Matrix>>& inputs,
                               const std::vector<std::vector<std::vector<int>>>& top1) {
  StepSimilarity out;
  if (inputs.size() < 2) return out;
  const std::size_t layers = inputs.front().size();
  out.cosine.assign(layers, 0.0);
  out.agreement.assign(layers, 0.0);
  const double pairs = static_cast<double>(inputs.size() - 1);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t s = 0; s + 1 < inputs.size(); ++s) {
      out.cosine[l] += cosine_similarity(inputs[s][l], inputs[s + 1][l]);
      if (!top1.empty()) {
        const auto& a = top1[s][l];
        const auto& b = top1[s + 1][l];
        std::size_t same = 0;
        for (std::size_t t = 0; t < a.size(); ++t) same += a[t] == b[t] ? 1 : 0;
        out.agreement[l] += a.empty() ? 1.0 : static_cast<double>(same) / static_cast<double>(a.size());
      }
    }
    out.cosine[l] /= pairs;
    out.agreement[l] /= pairs;
  }
  out.mean_cosine = std::accumulate(out.cosine.begin(), out.cosine.end(), 0.0) / static_cast<double>(layers);
  out.mean_agreement =
      std::accumulate(out.agreement.begin(), out.agreement.end(), 0.0) / static_cast<double>(layers);
  return out;
}

}  // namespace dice
