// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (capped at 1 for ctest).

#include <algorithm>
#include <array>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include "dice/experiment.hpp"

namespace fs = std::filesystem;
using dice::PolicyConfig;
using dice::RunResult;
using dice::Strategy;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

PolicyConfig wp(int warmup, std::optional<int> period) {
  PolicyConfig p;
  p.warmup = warmup;
  p.period = period;
  return p;
}

dice::RunOptions quiet() {
  dice::RunOptions o;
  o.record_timeline = false;
  return o;
}

struct Toy {
  explicit Toy(dice::ModelConfig cfg = {}, std::uint64_t seed = 1)
      : config(cfg), model(dice::init_model(cfg, seed)), x0(dice::initial_sample(cfg, seed)) {}
  RunResult run(Strategy s, const PolicyConfig& p, const dice::ClusterConfig& c = {},
                dice::RunOptions o = quiet()) const {
    return dice::run_sampling(model, x0, s, p, c, o);
  }
  dice::ModelConfig config;
  dice::ToyModel model;
  dice::ActivationBlock x0;
};

Outcome staleness_laws() {
  const auto t0 = std::chrono::steady_clock::now();
  const Toy toy;
  const auto policy = wp(6, 10);
  int bad = 0;
  std::ostringstream note;
  for (auto s : {Strategy::Synchronous, Strategy::Displaced, Strategy::Interweaved}) {
    const auto r = toy.run(s, policy);
    std::map<int, int> hist;
    for (const auto& rec : r.staleness) {
      const int st = rec.used_step;
      int expected = 0;
      if (s != Strategy::Synchronous && !dice::is_sync_step(st, 6, 10)) {
        expected = s == Strategy::Interweaved ? 1 : (dice::is_sync_step(st - 1, 6, 10) ? 1 : 2);
      }
      if (rec.staleness() != expected) ++bad;
      ++hist[rec.staleness()];
    }
    note << dice::to_string(s) << "{";
    for (const auto& [k, v] : hist) note << k << ":" << v << (k == hist.rbegin()->first ? "" : ",");
    note << "} ";
  }
  const double secs = seconds_since(t0);
  note << "mismatches=" << bad << " runtime=" << fmt("%.2f", secs) << "s";
  return {bad == 0 && secs < 10.0, note.str()};
}

Outcome buffer_halving() {
  const Toy toy;
  const auto d = toy.run(Strategy::Displaced, wp(6, 10)).peak_buffer_bytes;
  const auto i = toy.run(Strategy::Interweaved, wp(6, 10)).peak_buffer_bytes;
  return {d > 0 && 2 * i == d, "displaced=" + std::to_string(d) + " interweaved=" + std::to_string(i)};
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto summary = dice::run_validation(256, 20260101);
  const double secs = seconds_since(t0);
  std::string detail = "cases=" + std::to_string(summary.cases) + " mismatches=" + std::to_string(summary.mismatches) +
                       " runtime=" + fmt("%.2f", secs) + "s";
  if (!summary.first_failure.empty()) detail += " first: " + summary.first_failure;
  return {summary.cases >= 256 && summary.mismatches == 0 && secs < 120.0, detail};
}

Outcome degeneracy() {
  dice::ModelConfig cfg;
  cfg.num_steps = 12;
  const Toy toy(cfg);
  const auto sync = toy.run(Strategy::Synchronous, {});
  bool a = true, b = true, c = true;
  for (auto s : {Strategy::Displaced, Strategy::Interweaved}) {
    for (int w : {12, 20}) a = a && dice::bit_equal(toy.run(s, wp(w, 10)).final_sample.values, sync.final_sample.values);
  }
  for (auto s : {Strategy::Synchronous, Strategy::Displaced, Strategy::Interweaved}) {
    for (auto cond : {dice::CondStrategy::LowScore, dice::CondStrategy::HighScore, dice::CondStrategy::Random}) {
      PolicyConfig on = wp(1, 5);
      on.cond = cond;
      on.refresh_interval = 1;
      b = b && dice::bit_equal(toy.run(s, on).final_sample.values, toy.run(s, wp(1, 5)).final_sample.values);
    }
  }
  dice::ClusterConfig free_comm;
  free_comm.alpha = 0.0;
  free_comm.beta = 0.0;
  std::ostringstream spans;
  double ref = -1.0;
  for (auto s : {Strategy::Synchronous, Strategy::Displaced, Strategy::Interweaved}) {
    const double m = toy.run(s, wp(1, 5), free_comm).timeline.makespan();
    if (ref < 0) ref = m;
    c = c && m == ref;
    spans << fmt("%.17g", m) << " ";
  }
  return {a && b && c, std::string("(a) warmup>=S ") + (a ? "ok" : "FAIL") + "; (b) R=1 " + (b ? "ok" : "FAIL") +
                           "; (c) zero-cost makespans " + spans.str() + (c ? "ok" : "FAIL")};
}

Outcome latency_law() {
  dice::ModelConfig cfg;
  cfg.batch = 16;
  const Toy toy(cfg);
  const auto policy = wp(6, 10);
  const double sync = toy.run(Strategy::Synchronous, {}).timeline.makespan();
  const double disp = toy.run(Strategy::Displaced, policy).timeline.makespan();
  const double inter = toy.run(Strategy::Interweaved, policy).timeline.makespan();
  PolicyConfig low = policy;
  low.cond = dice::CondStrategy::LowScore;
  low.refresh_interval = 5;
  const double low_span = toy.run(Strategy::Interweaved, low).timeline.makespan();
  const double gap = std::abs(inter - disp) / disp;
  const double speedup = sync / low_span;
  const bool ok = inter <= sync && gap <= 0.02 && speedup >= 1.15;
  return {ok, "batch=16 sync=" + fmt("%.4f", sync) + "s displaced=" + fmt("%.4f", disp) +
                  "s interweaved=" + fmt("%.4f", inter) + "s gap=" + fmt("%.2f", 100 * gap) +
                  "% interweaved+low_score(R=5) speedup=" + fmt("%.3f", speedup)};
}

Outcome comm_fraction() {
  const double targets[] = {0.617, 0.698, 0.733};
  const int batches[] = {4, 8, 16};
  bool ok = true;
  std::ostringstream note;
  for (int i = 0; i < 3; ++i) {
    dice::ModelConfig cfg;
    cfg.batch = batches[i];
    const Toy toy(cfg);
    const auto r = toy.run(Strategy::Synchronous, {}, {}, dice::RunOptions{});
    const double share = r.timeline.stall_seconds(0) / r.timeline.makespan();
    ok = ok && std::abs(share - targets[i]) <= 0.05;
    note << "batch=" << batches[i] << " share=" << fmt("%.1f", 100 * share) << "% (target "
         << fmt("%.1f", 100 * targets[i]) << "%) ";
  }
  return {ok, note.str()};
}

Outcome volume_law() {
  dice::ModelConfig cfg;
  cfg.num_steps = 51;  // one sync step, then 50 asynchronous steps
  const Toy toy(cfg);
  const PolicyConfig base = wp(1, std::nullopt);
  const auto full = toy.run(Strategy::Interweaved, base);
  const double per_step = static_cast<double>(cfg.rows() * cfg.top_k * cfg.num_layers);
  bool ok = full.dispatch_pairs == static_cast<std::uint64_t>(per_step * 51);
  std::ostringstream note;
  for (auto [R, target] : {std::pair{5, 0.60}, std::pair{2, 0.75}}) {
    PolicyConfig p = base;
    p.cond = dice::CondStrategy::LowScore;
    p.refresh_interval = R;
    const auto r = toy.run(Strategy::Interweaved, p);
    const double fraction = (static_cast<double>(r.dispatch_pairs) - per_step) / (50.0 * per_step);
    const double bytes = static_cast<double>(r.dispatch_bytes) / static_cast<double>(full.dispatch_bytes);
    ok = ok && std::abs(fraction - target) <= 0.01;
    note << "R=" << R << " pairs=" << fmt("%.2f", 100 * fraction) << "% (target " << fmt("%.0f", 100 * target)
         << "%) bytes=" << fmt("%.1f", 100 * bytes) << "% ";
  }
  return {ok, note.str()};
}

Outcome divergence_ordering() {
  constexpr int kSeeds = 24;
  enum Col { Disp, Inter, Deep, Stag, Shal, Low, Rand, High, NCols };
  std::vector<std::array<double, NCols>> table(kSeeds);
  auto work = [&](int seed) {
    const Toy toy(dice::ModelConfig{}, static_cast<std::uint64_t>(seed + 1));
    const auto sync = toy.run(Strategy::Synchronous, {});
    auto div = [&](Strategy s, const PolicyConfig& p) {
      return dice::relative_l2(toy.run(s, p).final_sample.values, sync.final_sample.values);
    };
    const auto base = wp(6, 10);
    auto& row = table[seed];
    row[Disp] = div(Strategy::Displaced, base);
    row[Inter] = div(Strategy::Interweaved, base);
    const dice::SyncStrategy syncs[] = {dice::SyncStrategy::Deep, dice::SyncStrategy::Staggered,
                                        dice::SyncStrategy::Shallow};
    for (int i = 0; i < 3; ++i) {
      PolicyConfig p = base;
      p.sync = syncs[i];
      row[Deep + i] = div(Strategy::Interweaved, p);
    }
    const dice::CondStrategy conds[] = {dice::CondStrategy::LowScore, dice::CondStrategy::Random,
                                        dice::CondStrategy::HighScore};
    for (int i = 0; i < 3; ++i) {
      PolicyConfig p = base;
      p.cond = conds[i];
      p.refresh_interval = 5;
      p.cond_seed = static_cast<std::uint64_t>(seed);
      row[Low + i] = div(Strategy::Interweaved, p);
    }
  };
  const unsigned hw = std::max(1u, std::min(8u, std::thread::hardware_concurrency()));
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < hw; ++t) {
    pool.emplace_back([&, t] {
      for (int s = static_cast<int>(t); s < kSeeds; s += static_cast<int>(hw)) work(s);
    });
  }
  for (auto& th : pool) th.join();

  std::array<double, NCols> median{};
  for (int c = 0; c < NCols; ++c) {
    std::vector<double> v;
    for (const auto& row : table) v.push_back(row[c]);
    std::sort(v.begin(), v.end());
    median[c] = 0.5 * (v[kSeeds / 2 - 1] + v[kSeeds / 2]);
  }
  const bool required = median[Inter] < median[Disp];
  const bool sync_order = median[Deep] <= median[Stag] && median[Stag] <= median[Shal];
  const bool cond_order = median[Low] <= median[Rand] && median[Rand] <= median[High];
  std::ostringstream note;
  note << "seeds=" << kSeeds << " median interweaved=" << fmt("%.4f", median[Inter])
       << " displaced=" << fmt("%.4f", median[Disp]) << (required ? " ok" : " FAIL") << "; deep/staggered/shallow="
       << fmt("%.4f", median[Deep]) << "/" << fmt("%.4f", median[Stag]) << "/" << fmt("%.4f", median[Shal])
       << (sync_order ? " ok" : " flagged") << "; low/random/high=" << fmt("%.4f", median[Low]) << "/"
       << fmt("%.4f", median[Rand]) << "/" << fmt("%.4f", median[High]) << (cond_order ? " ok" : " flagged");
  return {required, note.str()};
}

Outcome step_similarity() {
  const Toy toy;
  dice::RunOptions o = quiet();
  o.record_moe_inputs = true;
  const auto r = toy.run(Strategy::Synchronous, {}, {}, o);
  const auto sim = dice::step_similarity(r.moe_inputs, r.top1);
  return {sim.mean_cosine >= 0.9 && sim.mean_agreement >= 0.8,
          "eta=" + fmt("%g", toy.config.step_size) + " mean_cosine=" + fmt("%.4f", sim.mean_cosine) +
              " top1_agreement=" + fmt("%.4f", sim.mean_agreement)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const std::string& cli) {
  if (cli.empty()) return {false, "dice_sim path not given"};
  const fs::path root = fs::temp_directory_path() / ("dicesim-acceptance-" + std::to_string(::getpid()));
  fs::create_directories(root);
  const fs::path cfg = root / "sweep.toml";
  std::ofstream(cfg) << "[model]\nnum_steps = 20\n[sweep]\nstrategy = [\"displaced\", \"interweaved\"]\n"
                        "batch = [4, 8]\n";
  struct Invocation {
    std::string sub;
    std::string args;
    std::string file;
  };
  const std::vector<Invocation> plan = {
      {"compare", "--format csv", "compare.csv"},         {"compare", "--format json", "compare.json"},
      {"sweep", "--jobs 1 --format csv", "sweep.csv"},    {"sweep", "--jobs 8 --format csv", "sweep.csv"},
      {"sweep", "--jobs 3 --format json", "sweep.json"},  {"sweep", "--jobs 1 --format json", "sweep.json"},
  };
  std::map<std::string, std::string> first;
  int idx = 0, mismatches = 0, failures = 0;
  for (int repeat = 0; repeat < 2; ++repeat) {
    for (const auto& inv : plan) {
      const fs::path out = root / ("o" + std::to_string(idx++));
      const std::string cmd = "\"" + cli + "\" " + inv.sub + " --config \"" + cfg.string() + "\" --out \"" +
                              out.string() + "\" " + inv.args + " >/dev/null 2>&1";
      if (std::system(cmd.c_str()) != 0) {
        ++failures;
        continue;
      }
      const std::string bytes = slurp(out / inv.file);
      auto [it, inserted] = first.emplace(inv.sub + ":" + inv.file, bytes);
      if (!inserted && it->second != bytes) ++mismatches;
    }
  }
  fs::remove_all(root);
  return {failures == 0 && mismatches == 0 && !first.empty(),
          "invocations=" + std::to_string(idx) + " failures=" + std::to_string(failures) +
              " mismatched_files=" + std::to_string(mismatches) + " (jobs 1/3/8, csv and json)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 staleness laws", staleness_laws},
      {"2 buffer halving", buffer_halving},
      {"3 oracle equivalence", oracle_equivalence},
      {"4 synchronous degeneracy", degeneracy},
      {"5 overlap/latency law", latency_law},
      {"6 communication fraction", comm_fraction},
      {"7 conditional volume law", volume_law},
      {"8 divergence ordering", divergence_ordering},
      {"9 step similarity", step_similarity},
      {"10 determinism", [&] { return determinism(cli); }},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
