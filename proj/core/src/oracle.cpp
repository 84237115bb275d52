#include "dice/oracle.hpp"

#include <algorithm>
#include <cmath>

namespace dice {

namespace {

struct PairBook {
  int last_refresh = -1;
  std::vector<std::uint8_t> reduced;
  std::vector<int> ids;
};

}  // namespace

int max_staleness(Strategy strategy) noexcept {
  switch (strategy) {
    case Strategy::Synchronous:
      return 0;
    case Strategy::Interweaved:
      return 1;
    case Strategy::Displaced:
      return 2;
  }
  return 0;
}

OracleTrace oracle_run(const ToyModel& model, const ActivationBlock& x0, Strategy strategy, const PolicyConfig& policy,
                       OracleOptions options) {
  const ModelConfig& c = model.config;
  if (c.num_layers > OracleLimits::max_layers || c.num_experts > OracleLimits::max_experts ||
      c.rows() > OracleLimits::max_rows || c.num_steps > OracleLimits::max_steps) {
    throw ContractError("oracle_run: instance too large for the brute-force oracle");
  }
  policy.validate(c.num_layers);

  const int L = c.num_layers;
  const int S = c.num_steps;
  const int k = c.top_k;
  const std::size_t rows = c.rows();
  const bool cond = policy.cond != CondStrategy::Off;

  std::vector<std::uint8_t> always(static_cast<std::size_t>(L), 0);
  for (int l : select_sync_layers(policy.sync, L, policy.explicit_layers)) always[l] = 1;

  OracleTrace trace;
  trace.moe_inputs.assign(S, std::vector<Matrix>(L));
  trace.routes.assign(S, std::vector<RouteDecision>(L));
  trace.routed.assign(S, std::vector<Matrix>(L));
  trace.provenance.assign(S, std::vector<int>(L, 0));

  // source[g][l][t * k + slot]: generation whose expert result a payload generated at g carries.
  std::vector<std::vector<std::vector<int>>> source(S, std::vector<std::vector<int>>(L));
  std::vector<std::vector<PairBook>> book(L, std::vector<PairBook>(rows));
  std::vector<int> last_sync(L, -1);

  auto refresh = [&](PairBook& b, int l, std::size_t t, int s, const RouteDecision& r) {
    b.last_refresh = s;
    b.reduced = reduced_slots_for_token(k, policy.cond, policy.cond_seed, l, t, s);
    b.ids.assign(k, 0);
    for (int j = 0; j < k; ++j) b.ids[j] = r.expert(t, j);
  };

  Matrix x = x0.values;
  for (int s = 0; s < S; ++s) {
    const bool sync_step = is_sync_step(s, policy.warmup, policy.period);
    Matrix h = x;
    for (int l = 0; l < L; ++l) {
      h = local_block(model, l, ActivationBlock{h, s, l}).values;
      trace.moe_inputs[s][l] = h;
      trace.routes[s][l] = gate(model, l, h);
      const RouteDecision& route = trace.routes[s][l];
      // A layer without any earlier synchronous execution has nothing buffered (cold start).
      const bool layer_sync = sync_step || always[l] || strategy == Strategy::Synchronous || last_sync[l] < 0;

      auto& src = source[s][l];
      src.assign(rows * k, s);
      if (cond) {
        for (std::size_t t = 0; t < rows; ++t) {
          PairBook& b = book[l][t];
          bool fresh = layer_sync || b.last_refresh < 0 || s - b.last_refresh >= policy.refresh_interval;
          if (!fresh && policy.strict) {
            for (int j = 0; j < k; ++j) fresh = fresh || (b.reduced[j] && b.ids[j] != route.expert(t, j));
          }
          if (fresh) {
            refresh(b, l, t, s, route);
            continue;
          }
          for (int j = 0; j < k; ++j) {
            if (b.reduced[j]) src[t * k + j] = b.last_refresh;
          }
        }
      }

      int g = s;
      if (!layer_sync) {
        g = strategy == Strategy::Interweaved ? s - 1 : std::max(last_sync[l], s - 2);
        g = std::max(0, g - options.staleness_offset);
      }
      trace.provenance[s][l] = g;
      trace.staleness.push_back(StalenessRecord{l, s, g});

      std::vector<Matrix> slots(static_cast<std::size_t>(k), Matrix(rows, h.cols()));
      RouteDecision scale = trace.routes[g][l];
      const auto& payload_src = source[g][l];
      for (std::size_t t = 0; t < rows; ++t) {
        for (int j = 0; j < k; ++j) {
          const int from = payload_src[t * k + j];
          const RouteDecision& r = trace.routes[from][l];
          const int expert = r.expert(t, j);
          Matrix token(1, h.cols());
          std::copy(trace.moe_inputs[from][l].row(t).begin(), trace.moe_inputs[from][l].row(t).end(),
                    token.row(0).begin());
          Matrix y = expert_forward(model, l, expert, token);
          std::copy(y.row(0).begin(), y.row(0).end(), slots[j].row(t).begin());
          scale.expert_ids[t * k + j] = expert;
          scale.gates[t * k + j] = r.gate(t, j);
        }
      }
      const Matrix shared = shared_forward(model, l, h);
      Matrix zero(rows, h.cols());
      trace.routed[s][l] = combine_outputs(route, slots, zero, scale);
      Matrix moe = combine_outputs(route, slots, shared, scale);
      for (std::size_t i = 0; i < h.size(); ++i) h.flat()[i] += moe.flat()[i];
      if (layer_sync) last_sync[l] = s;
    }
    x = denoise_update(ActivationBlock{x, s, 0}, output_head(h), c.step_size, s).values;
    if (!x.all_finite()) throw NumericalError("oracle: sample became non-finite", s, -1);
  }
  trace.final_sample = std::move(x);
  return trace;
}

namespace {

void scan(const Matrix& a, const Matrix& b, int step, int layer, TraceDiff& diff) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    diff.max_abs_diff = INFINITY;
    if (!diff.first_divergence) diff.first_divergence = TraceCoordinate{step, layer, 0, 0};
    return;
  }
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t col = 0; col < a.cols(); ++col) {
      const double x = a(r, col);
      const double y = b(r, col);
      if (x == y) continue;
      const double d = std::fabs(x - y);
      diff.max_abs_diff = std::isnan(d) ? INFINITY : std::max(diff.max_abs_diff, d);
      if (!diff.first_divergence) diff.first_divergence = TraceCoordinate{step, layer, r, col};
    }
  }
}

}  // namespace

TraceDiff compare_traces(const OracleTrace& a, const OracleTrace& b, bool include_inputs) {
  TraceDiff diff;
  if (include_inputs) {
    const std::size_t steps = std::min(a.moe_inputs.size(), b.moe_inputs.size());
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t layers = std::min(a.moe_inputs[s].size(), b.moe_inputs[s].size());
      for (std::size_t l = 0; l < layers; ++l) {
        scan(a.moe_inputs[s][l], b.moe_inputs[s][l], static_cast<int>(s), static_cast<int>(l), diff);
      }
    }
  }
  scan(a.final_sample, b.final_sample, -1, -1, diff);
  return diff;
}

OracleTrace trace_from_run(const RunResult& run) {
  OracleTrace t;
  t.moe_inputs = run.moe_inputs;
  t.staleness = run.staleness;
  t.final_sample = run.final_sample.values;
  return t;
}

}  // namespace dice
