#include "dice/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

namespace dice {

namespace {

class Reader {
 public:
  explicit Reader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const toml::node* node, const std::string& field, const std::string& msg) const {
    std::string where = source_;
    if (node && node->source().begin.line > 0) where += ":" + std::to_string(node->source().begin.line);
    throw ConfigError(where + ": " + field + ": " + msg);
  }

  void reject_unknown(const toml::table& t, const std::string& prefix, std::initializer_list<const char*> known) const {
    std::set<std::string> ok(known.begin(), known.end());
    for (auto&& [key, node] : t) {
      if (!ok.count(std::string(key.str()))) {
        fail(&node, prefix + std::string(key.str()), "unknown key");
      }
    }
  }

  long long integer(const toml::node& n, const std::string& field) const {
    if (auto v = n.as_integer()) return v->get();
    fail(&n, field, "expected an integer");
  }

  int positive(const toml::node& n, const std::string& field) const {
    const long long v = integer(n, field);
    if (v < 1 || v > 1'000'000'000) fail(&n, field, "expected a positive integer, got " + std::to_string(v));
    return static_cast<int>(v);
  }

  int non_negative(const toml::node& n, const std::string& field) const {
    const long long v = integer(n, field);
    if (v < 0 || v > 1'000'000'000) fail(&n, field, "expected a non-negative integer, got " + std::to_string(v));
    return static_cast<int>(v);
  }

  double real(const toml::node& n, const std::string& field) const {
    if (auto v = n.as_floating_point()) return v->get();
    if (auto v = n.as_integer()) return static_cast<double>(v->get());
    fail(&n, field, "expected a number");
  }

  std::string string(const toml::node& n, const std::string& field) const {
    if (auto v = n.as_string()) return v->get();
    fail(&n, field, "expected a string");
  }

  bool boolean(const toml::node& n, const std::string& field) const {
    if (auto v = n.as_boolean()) return v->get();
    fail(&n, field, "expected a boolean");
  }

  const toml::array& array(const toml::node& n, const std::string& field) const {
    if (auto v = n.as_array()) return *v;
    fail(&n, field, "expected an array");
  }

  const toml::table& table(const toml::node& n, const std::string& field) const {
    if (auto v = n.as_table()) return *v;
    fail(&n, field, "expected a table");
  }

  std::optional<int> period(const toml::node& n, const std::string& field) const {
    if (auto s = n.as_string()) {
      const std::string v = s->get();
      if (v == "inf" || v == "none" || v == "never") return std::nullopt;
      fail(&n, field, "expected a positive integer, 0, or \"inf\"");
    }
    if (auto f = n.as_floating_point()) {
      if (std::isinf(f->get()) && f->get() > 0) return std::nullopt;
      fail(&n, field, "expected a positive integer, 0, or \"inf\"");
    }
    const long long v = integer(n, field);
    if (v < 0) fail(&n, field, "expected a positive integer, 0, or \"inf\"");
    if (v == 0) return std::nullopt;
    return static_cast<int>(v);
  }

  template <typename T>
  T parsed(const toml::node& n, const std::string& field, T (*parse)(const std::string&)) const {
    try {
      return parse(string(n, field));
    } catch (const ConfigError& e) {
      fail(&n, field, e.what());
    }
  }

 private:
  std::string source_;
};

void apply_override(toml::table& root, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set " + text + ": expected KEY=VALUE");
  }
  std::string key = text.substr(0, eq);
  const std::string value = text.substr(eq + 1);
  key.erase(std::remove_if(key.begin(), key.end(), [](unsigned char c) { return std::isspace(c); }), key.end());

  std::vector<std::string> path;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw ConfigError("--set " + text + ": empty key segment");
    path.push_back(part);
  }

  toml::table* t = &root;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    toml::node* child = t->get(path[i]);
    if (!child) {
      t->insert(path[i], toml::table{});
      child = t->get(path[i]);
    }
    t = child->as_table();
    if (!t) throw ConfigError("--set " + text + ": '" + path[i] + "' is not a table");
  }

  toml::table parsed;
  try {
    parsed = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    parsed = toml::table{};
    parsed.insert("v", value);
  }
  parsed.get("v")->visit([&](auto&& node) { t->insert_or_assign(path.back(), node); });
}

std::string period_text(std::optional<int> p) { return p ? std::to_string(*p) : std::string("inf"); }

}  // namespace

PolicyConfig default_policy() {
  PolicyConfig p;
  p.warmup = 6;
  p.period = 10;
  return p;
}

ExperimentConfig parse_experiment(const std::string& toml_text, const std::vector<std::string>& overrides,
                                  const std::string& source, std::optional<std::uint64_t> seed_fallback) {
  toml::table root;
  try {
    root = toml::parse(toml_text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.source().begin.line) + ": " + std::string(e.description()));
  }
  for (const auto& o : overrides) apply_override(root, o);

  const Reader rd(source);
  rd.reject_unknown(root, "", {"schema_version", "seed", "model", "cluster", "run", "policy", "output", "sweep"});

  if (auto n = root.get("schema_version")) {
    if (rd.integer(*n, "schema_version") != kConfigSchemaVersion) {
      rd.fail(n, "schema_version", "unsupported version (expected " + std::to_string(kConfigSchemaVersion) + ")");
    }
  }

  ExperimentConfig cfg;
  if (auto n = root.get("seed")) {
    const long long v = rd.integer(*n, "seed");
    if (v < 0) rd.fail(n, "seed", "expected a non-negative integer");
    cfg.seed = static_cast<std::uint64_t>(v);
  } else if (seed_fallback) {
    cfg.seed = *seed_fallback;
  }

  if (auto n = root.get("model")) {
    const auto& t = rd.table(*n, "model");
    rd.reject_unknown(t, "model.",
                      {"preset", "num_layers", "num_experts", "num_shared", "top_k", "hidden_dim", "expert_dim",
                       "num_tokens", "batch", "num_steps", "step_size"});
    if (auto p = t.get("preset")) {
      cfg.preset = rd.string(*p, "model.preset");
      try {
        cfg.model = ModelConfig::preset(cfg.preset);
      } catch (const ConfigError& e) {
        rd.fail(p, "model.preset", e.what());
      }
    }
    auto& m = cfg.model;
    if (auto v = t.get("num_layers")) m.num_layers = rd.positive(*v, "model.num_layers");
    if (auto v = t.get("num_experts")) m.num_experts = rd.positive(*v, "model.num_experts");
    if (auto v = t.get("num_shared")) m.num_shared = rd.non_negative(*v, "model.num_shared");
    if (auto v = t.get("top_k")) m.top_k = rd.positive(*v, "model.top_k");
    if (auto v = t.get("hidden_dim")) m.hidden_dim = rd.positive(*v, "model.hidden_dim");
    if (auto v = t.get("expert_dim")) m.expert_dim = rd.positive(*v, "model.expert_dim");
    if (auto v = t.get("num_tokens")) m.num_tokens = rd.positive(*v, "model.num_tokens");
    if (auto v = t.get("batch")) m.batch = rd.positive(*v, "model.batch");
    if (auto v = t.get("num_steps")) m.num_steps = rd.positive(*v, "model.num_steps");
    if (auto v = t.get("step_size")) m.step_size = rd.real(*v, "model.step_size");
  }

  if (auto n = root.get("cluster")) {
    const auto& t = rd.table(*n, "cluster");
    rd.reject_unknown(t, "cluster.",
                      {"num_devices", "alpha", "beta", "bytes_per_element", "compute_rate", "compute_overhead"});
    auto& c = cfg.cluster;
    if (auto v = t.get("num_devices")) c.num_devices = rd.positive(*v, "cluster.num_devices");
    if (auto v = t.get("alpha")) c.alpha = rd.real(*v, "cluster.alpha");
    if (auto v = t.get("beta")) c.beta = rd.real(*v, "cluster.beta");
    if (auto v = t.get("bytes_per_element")) c.bytes_per_element = rd.positive(*v, "cluster.bytes_per_element");
    if (auto v = t.get("compute_rate")) c.compute_rate = rd.real(*v, "cluster.compute_rate");
    if (auto v = t.get("compute_overhead")) c.compute_overhead = rd.real(*v, "cluster.compute_overhead");
  }

  if (auto n = root.get("run")) {
    const auto& t = rd.table(*n, "run");
    rd.reject_unknown(t, "run.", {"strategy"});
    if (auto v = t.get("strategy")) cfg.strategy = rd.parsed(*v, "run.strategy", parse_strategy);
  }

  if (auto n = root.get("policy")) {
    const auto& t = rd.table(*n, "policy");
    rd.reject_unknown(t, "policy.",
                      {"sync", "layers", "refresh_interval", "conditional", "cond_seed", "warmup", "period", "strict"});
    auto& p = cfg.policy;
    if (auto v = t.get("sync")) p.sync = rd.parsed(*v, "policy.sync", parse_sync_strategy);
    if (auto v = t.get("layers")) {
      for (const auto& e : rd.array(*v, "policy.layers")) p.explicit_layers.push_back(rd.non_negative(e, "policy.layers"));
      if (!t.get("sync")) p.sync = SyncStrategy::Explicit;
    }
    if (auto v = t.get("refresh_interval")) p.refresh_interval = rd.positive(*v, "policy.refresh_interval");
    if (auto v = t.get("conditional")) p.cond = rd.parsed(*v, "policy.conditional", parse_cond_strategy);
    if (auto v = t.get("cond_seed")) p.cond_seed = static_cast<std::uint64_t>(rd.non_negative(*v, "policy.cond_seed"));
    if (auto v = t.get("warmup")) p.warmup = rd.non_negative(*v, "policy.warmup");
    if (auto v = t.get("period")) p.period = rd.period(*v, "policy.period");
    if (auto v = t.get("strict")) p.strict = rd.boolean(*v, "policy.strict");
  }

  if (auto n = root.get("output")) {
    const auto& t = rd.table(*n, "output");
    rd.reject_unknown(t, "output.", {"dir", "format", "timeline"});
    if (auto v = t.get("dir")) cfg.out_dir = rd.string(*v, "output.dir");
    if (auto v = t.get("format")) cfg.format = rd.parsed(*v, "output.format", parse_report_format);
    if (auto v = t.get("timeline")) cfg.timeline = rd.boolean(*v, "output.timeline");
  }

  if (auto n = root.get("sweep")) {
    const auto& t = rd.table(*n, "sweep");
    rd.reject_unknown(t, "sweep.", {"strategy", "batch", "num_tokens", "refresh_interval", "warmup", "period"});
    auto& s = cfg.sweep;
    if (auto v = t.get("strategy")) {
      for (const auto& e : rd.array(*v, "sweep.strategy")) s.strategy.push_back(rd.parsed(e, "sweep.strategy", parse_strategy));
    }
    if (auto v = t.get("batch")) {
      for (const auto& e : rd.array(*v, "sweep.batch")) s.batch.push_back(rd.positive(e, "sweep.batch"));
    }
    if (auto v = t.get("num_tokens")) {
      for (const auto& e : rd.array(*v, "sweep.num_tokens")) s.num_tokens.push_back(rd.positive(e, "sweep.num_tokens"));
    }
    if (auto v = t.get("refresh_interval")) {
      for (const auto& e : rd.array(*v, "sweep.refresh_interval")) {
        s.refresh_interval.push_back(rd.positive(e, "sweep.refresh_interval"));
      }
    }
    if (auto v = t.get("warmup")) {
      for (const auto& e : rd.array(*v, "sweep.warmup")) s.warmup.push_back(rd.non_negative(e, "sweep.warmup"));
    }
    if (auto v = t.get("period")) {
      for (const auto& e : rd.array(*v, "sweep.period")) s.period.push_back(rd.period(e, "sweep.period"));
    }
  }

  cfg.model.validate();
  cfg.cluster.validate(cfg.model);
  cfg.policy.validate(cfg.model.num_layers);
  for (const auto& point : expand_sweep(cfg)) {
    point.config.model.validate();
    point.config.cluster.validate(point.config.model);
    point.config.policy.validate(point.config.model.num_layers);
  }
  return cfg;
}

ExperimentConfig load_experiment(const std::string& path, const std::vector<std::string>& overrides,
                                 std::optional<std::uint64_t> seed_fallback) {
  if (path.empty()) return parse_experiment("", overrides, "<defaults>", seed_fallback);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment(buf.str(), overrides, path, seed_fallback);
}

std::vector<SweepPoint> expand_sweep(const ExperimentConfig& config) {
  const SweepAxes& ax = config.sweep;
  // An empty axis contributes one "unchanged" value.
  auto count = [](std::size_t n) { return n == 0 ? std::size_t{1} : n; };
  std::vector<SweepPoint> points;
  for (std::size_t a = 0; a < count(ax.strategy.size()); ++a)
    for (std::size_t b = 0; b < count(ax.batch.size()); ++b)
      for (std::size_t c = 0; c < count(ax.num_tokens.size()); ++c)
        for (std::size_t d = 0; d < count(ax.refresh_interval.size()); ++d)
          for (std::size_t e = 0; e < count(ax.warmup.size()); ++e)
            for (std::size_t f = 0; f < count(ax.period.size()); ++f) {
              SweepPoint p{config, {}};
              p.config.sweep = {};
              std::string label;
              auto tag = [&label](const std::string& kv) { label += (label.empty() ? "" : ";") + kv; };
              if (!ax.strategy.empty()) {
                p.config.strategy = ax.strategy[a];
                tag(std::string("strategy=") + to_string(ax.strategy[a]));
              }
              if (!ax.batch.empty()) {
                p.config.model.batch = ax.batch[b];
                tag("batch=" + std::to_string(ax.batch[b]));
              }
              if (!ax.num_tokens.empty()) {
                p.config.model.num_tokens = ax.num_tokens[c];
                tag("num_tokens=" + std::to_string(ax.num_tokens[c]));
              }
              if (!ax.refresh_interval.empty()) {
                p.config.policy.refresh_interval = ax.refresh_interval[d];
                tag("refresh_interval=" + std::to_string(ax.refresh_interval[d]));
              }
              if (!ax.warmup.empty()) {
                p.config.policy.warmup = ax.warmup[e];
                tag("warmup=" + std::to_string(ax.warmup[e]));
              }
              if (!ax.period.empty()) {
                p.config.policy.period = ax.period[f];
                tag("period=" + period_text(ax.period[f]));
              }
              p.label = label.empty() ? to_string(p.config.strategy) : label;
              points.push_back(std::move(p));
            }
  return points;
}

PointResult run_point(const ExperimentConfig& config, const std::string& label) {
  const ToyModel model = init_model(config.model, config.seed);
  const ActivationBlock x0 = initial_sample(config.model, config.seed);
  RunOptions opts;
  opts.record_timeline = config.timeline;
  PointResult out;
  out.baseline = run_sampling(model, x0, Strategy::Synchronous, PolicyConfig{}, config.cluster, opts);
  out.run = run_sampling(model, x0, config.strategy, config.policy, config.cluster, opts);
  out.report = build_report(out.run, out.baseline, config.seed, label);
  return out;
}

PolicyConfig dice_preset_policy(const PolicyConfig& base) {
  PolicyConfig p;
  p.sync = SyncStrategy::Deep;
  p.cond = CondStrategy::LowScore;
  p.refresh_interval = 5;
  p.cond_seed = base.cond_seed;
  p.warmup = base.warmup;
  p.period = base.period;
  return p;
}

std::vector<MetricsReport> run_compare(const ExperimentConfig& config) {
  const ToyModel model = init_model(config.model, config.seed);
  const ActivationBlock x0 = initial_sample(config.model, config.seed);
  RunOptions opts;
  opts.record_timeline = false;

  PolicyConfig schedule_only;
  schedule_only.warmup = config.policy.warmup;
  schedule_only.period = config.policy.period;

  const RunResult sync = run_sampling(model, x0, Strategy::Synchronous, PolicyConfig{}, config.cluster, opts);
  std::vector<MetricsReport> rows;
  rows.push_back(build_report(sync, sync, config.seed, "synchronous"));
  rows.push_back(build_report(run_sampling(model, x0, Strategy::Displaced, schedule_only, config.cluster, opts), sync,
                              config.seed, "displaced"));
  rows.push_back(build_report(run_sampling(model, x0, Strategy::Interweaved, schedule_only, config.cluster, opts),
                              sync, config.seed, "interweaved"));
  rows.push_back(build_report(
      run_sampling(model, x0, Strategy::Interweaved, dice_preset_policy(config.policy), config.cluster, opts), sync,
      config.seed, "dice"));
  return rows;
}

std::vector<MetricsReport> run_sweep(const ExperimentConfig& config, int jobs) {
  const auto points = expand_sweep(config);
  std::vector<MetricsReport> reports(points.size());
  std::vector<std::exception_ptr> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        reports[i] = run_point(points[i].config, points[i].label).report;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::clamp(jobs, 1, 256));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, points.size()); ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return reports;
}

std::string ValidationCase::describe() const {
  std::ostringstream os;
  os << "strategy=" << to_string(strategy) << " L=" << model.num_layers << " E=" << model.num_experts
     << " k=" << model.top_k << " rows=" << model.rows() << " S=" << model.num_steps << " sync=" << to_string(policy.sync)
     << " cond=" << to_string(policy.cond) << " R=" << policy.refresh_interval << " W=" << policy.warmup
     << " P=" << period_text(policy.period) << " strict=" << (policy.strict ? 1 : 0) << " seed=" << seed;
  return os.str();
}

std::vector<ValidationCase> validation_grid(int size, std::uint64_t seed) {
  static constexpr Strategy kStrategies[] = {Strategy::Synchronous, Strategy::Displaced, Strategy::Interweaved};
  static constexpr SyncStrategy kSync[] = {SyncStrategy::None, SyncStrategy::Deep, SyncStrategy::Shallow,
                                           SyncStrategy::Staggered};
  static constexpr CondStrategy kCond[] = {CondStrategy::Off, CondStrategy::LowScore, CondStrategy::HighScore,
                                           CondStrategy::Random};
  static constexpr int kRefresh[] = {1, 2, 5};
  static constexpr int kWarmup[] = {0, 1, 6};
  static constexpr int kPeriod[] = {3, 10, 0};
  static constexpr int kExperts[] = {1, 2, 4, 8};

  std::vector<ValidationCase> cases;
  SplitMix64 rng(seed);
  auto pick = [&rng](int n) { return static_cast<int>(rng.next() % static_cast<std::uint64_t>(n)); };
  for (int i = 0; i < size; ++i) {
    ValidationCase vc;
    const bool enumerated = i < 48;
    vc.strategy = kStrategies[enumerated ? i % 3 : pick(3)];
    vc.policy.sync = kSync[enumerated ? (i / 3) % 4 : pick(4)];
    vc.policy.cond = kCond[enumerated ? (i / 12) % 4 : pick(4)];
    vc.policy.refresh_interval = kRefresh[pick(3)];
    vc.policy.warmup = kWarmup[pick(3)];
    const int period = kPeriod[pick(3)];
    if (period > 0) vc.policy.period = period;
    vc.policy.strict = pick(4) == 0;
    vc.policy.cond_seed = rng.next();

    ModelConfig& m = vc.model;
    m.num_layers = 1 + pick(4);
    m.num_experts = kExperts[pick(4)];
    m.num_shared = pick(3);
    m.top_k = 1 + pick(std::min(m.num_experts, 3));
    m.hidden_dim = 4 + 4 * pick(2);
    m.expert_dim = 4 + 4 * pick(2);
    m.num_tokens = 2 + pick(7);
    m.batch = 1 + pick(2);
    m.num_steps = 2 + pick(15);
    m.step_size = 0.05 * (1 + pick(4));
    vc.seed = rng.next();
    cases.push_back(vc);
  }
  return cases;
}

ValidationSummary run_validation(int size, std::uint64_t seed, OracleOptions oracle_options) {
  ValidationSummary summary;
  for (const auto& vc : validation_grid(size, seed)) {
    ++summary.cases;
    const ToyModel model = init_model(vc.model, vc.seed);
    const ActivationBlock x0 = initial_sample(vc.model, vc.seed);
    ClusterConfig cluster;
    cluster.num_devices = 1;
    RunOptions opts;
    opts.record_timeline = false;
    opts.record_moe_inputs = true;
    const RunResult run = run_sampling(model, x0, vc.strategy, vc.policy, cluster, opts);
    const OracleTrace expected = oracle_run(model, x0, vc.strategy, vc.policy, oracle_options);
    const TraceDiff diff = compare_traces(expected, trace_from_run(run));
    const bool staleness_match = expected.staleness == run.staleness;
    if (diff.identical() && staleness_match) continue;
    ++summary.mismatches;
    if (summary.first_failure.empty()) {
      std::ostringstream os;
      os << vc.describe();
      if (diff.first_divergence) {
        const auto& c = *diff.first_divergence;
        os << " first divergence at step=" << c.step << " layer=" << c.layer << " row=" << c.row << " col=" << c.col
           << " max_abs_diff=" << diff.max_abs_diff;
      } else {
        os << " staleness records differ";
      }
      summary.first_failure = os.str();
    }
  }
  return summary;
}

}  // namespace dice
