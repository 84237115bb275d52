#include "dice/metrics.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dice {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Shortest text that round-trips the double.
std::string num(double v) {
  char buf[40];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::string histogram_text(const std::map<int, std::uint64_t>& h) {
  std::string out;
  for (const auto& [staleness, count] : h) {
    if (!out.empty()) out += ';';
    out += std::to_string(staleness) + ':' + std::to_string(count);
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

double relative_l2(const Matrix& x, const Matrix& ref) {
  if (x.rows() != ref.rows() || x.cols() != ref.cols()) throw ContractError("relative_l2: shape mismatch");
  if (bit_equal(x, ref)) return 0.0;
  double num_sq = 0.0, den_sq = 0.0;
  auto a = x.flat();
  auto b = ref.flat();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    num_sq += d * d;
    den_sq += b[i] * b[i];
  }
  if (den_sq == 0.0) return INFINITY;
  return std::sqrt(num_sq) / std::sqrt(den_sq);
}

MetricsReport build_report(const RunResult& run, const RunResult& baseline, std::uint64_t seed,
                           const std::string& label) {
  if (run.model_fingerprint != baseline.model_fingerprint || run.x0_fingerprint != baseline.x0_fingerprint ||
      !(run.model_config == baseline.model_config)) {
    throw ContractError("build_report: run and baseline do not share model, seed and x0");
  }
  if (baseline.strategy != Strategy::Synchronous) {
    throw ContractError("build_report: baseline must be a synchronous run");
  }
  MetricsReport r;
  r.label = label.empty() ? to_string(run.strategy) : label;
  r.strategy = to_string(run.strategy);
  r.sync = to_string(run.policy.sync);
  r.cond = to_string(run.policy.cond);
  r.refresh_interval = run.policy.refresh_interval;
  r.warmup = run.policy.warmup;
  r.period = run.policy.period.value_or(0);
  r.batch = run.model_config.batch;
  r.num_tokens = run.model_config.num_tokens;
  r.seed = seed;
  r.model_hash = hex64(run.model_fingerprint);

  r.divergence = relative_l2(run.final_sample.values, baseline.final_sample.values);
  for (const auto& rec : run.staleness) ++r.staleness_histogram[rec.staleness()];
  r.total_comm_bytes = run.total_comm_bytes;
  r.dispatch_bytes = run.dispatch_bytes;
  r.peak_buffer_bytes = run.peak_buffer_bytes;
  r.makespan_seconds = run.timeline.makespan();
  r.comm_stall_seconds = run.timeline.num_devices() > 0 ? run.timeline.stall_seconds(0) : 0.0;
  r.comm_share = r.makespan_seconds > 0.0 ? r.comm_stall_seconds / r.makespan_seconds : 0.0;
  const double base = baseline.timeline.makespan();
  r.speedup_vs_sync = r.makespan_seconds > 0.0 ? base / r.makespan_seconds : (base == 0.0 ? 1.0 : 0.0);
  return r;
}

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "label",           "strategy",         "sync",         "cond",           "refresh_interval",
      "warmup",          "period",           "batch",        "num_tokens",     "seed",
      "model_hash",      "divergence",       "staleness_histogram", "total_comm_bytes", "dispatch_bytes",
      "peak_buffer_bytes", "makespan_seconds", "comm_stall_seconds", "comm_share", "speedup_vs_sync",
      "timeline_path"};
  return cols;
}

ReportFormat parse_report_format(const std::string& name) {
  std::string n;
  for (unsigned char c : name) n.push_back(static_cast<char>(std::tolower(c)));
  if (n == "csv") return ReportFormat::Csv;
  if (n == "json") return ReportFormat::Json;
  throw ConfigError("unknown report format '" + name + "' (csv|json)");
}

std::string reports_to_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : reports) {
    out << csv_field(r.label) << ',' << r.strategy << ',' << r.sync << ',' << r.cond << ',' << r.refresh_interval
        << ',' << r.warmup << ',' << r.period << ',' << r.batch << ',' << r.num_tokens << ',' << r.seed << ','
        << r.model_hash << ',' << num(r.divergence) << ',' << histogram_text(r.staleness_histogram) << ','
        << r.total_comm_bytes << ',' << r.dispatch_bytes << ',' << r.peak_buffer_bytes << ','
        << num(r.makespan_seconds) << ',' << num(r.comm_stall_seconds) << ',' << num(r.comm_share) << ','
        << num(r.speedup_vs_sync) << ',' << csv_field(r.timeline_path) << '\n';
  }
  return out.str();
}

namespace {

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json hist = nlohmann::ordered_json::object();
  for (const auto& [s, n] : r.staleness_histogram) hist[std::to_string(s)] = n;
  return {{"label", r.label},
          {"strategy", r.strategy},
          {"sync", r.sync},
          {"cond", r.cond},
          {"refresh_interval", r.refresh_interval},
          {"warmup", r.warmup},
          {"period", r.period},
          {"batch", r.batch},
          {"num_tokens", r.num_tokens},
          {"seed", r.seed},
          {"model_hash", r.model_hash},
          {"divergence", r.divergence},
          {"staleness_histogram", hist},
          {"total_comm_bytes", r.total_comm_bytes},
          {"dispatch_bytes", r.dispatch_bytes},
          {"peak_buffer_bytes", r.peak_buffer_bytes},
          {"makespan_seconds", r.makespan_seconds},
          {"comm_stall_seconds", r.comm_stall_seconds},
          {"comm_share", r.comm_share},
          {"speedup_vs_sync", r.speedup_vs_sync},
          {"timeline_path", r.timeline_path}};
}

MetricsReport from_json(const nlohmann::json& j) {
  MetricsReport r;
  j.at("label").get_to(r.label);
  j.at("strategy").get_to(r.strategy);
  j.at("sync").get_to(r.sync);
  j.at("cond").get_to(r.cond);
  j.at("refresh_interval").get_to(r.refresh_interval);
  j.at("warmup").get_to(r.warmup);
  j.at("period").get_to(r.period);
  j.at("batch").get_to(r.batch);
  j.at("num_tokens").get_to(r.num_tokens);
  j.at("seed").get_to(r.seed);
  j.at("model_hash").get_to(r.model_hash);
  j.at("divergence").get_to(r.divergence);
  for (const auto& [key, value] : j.at("staleness_histogram").items()) {
    r.staleness_histogram[std::stoi(key)] = value.get<std::uint64_t>();
  }
  j.at("total_comm_bytes").get_to(r.total_comm_bytes);
  j.at("dispatch_bytes").get_to(r.dispatch_bytes);
  j.at("peak_buffer_bytes").get_to(r.peak_buffer_bytes);
  j.at("makespan_seconds").get_to(r.makespan_seconds);
  j.at("comm_stall_seconds").get_to(r.comm_stall_seconds);
  j.at("comm_share").get_to(r.comm_share);
  j.at("speedup_vs_sync").get_to(r.speedup_vs_sync);
  j.at("timeline_path").get_to(r.timeline_path);
  return r;
}

}  // namespace

std::string reports_to_json(const std::vector<MetricsReport>& reports) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["reports"] = nlohmann::ordered_json::array();
  for (const auto& r : reports) doc["reports"].push_back(to_json(r));
  return doc.dump(2) + "\n";
}

std::vector<MetricsReport> reports_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("report JSON: ") + e.what());
  }
  if (doc.value("schema_version", 0) != kReportSchemaVersion) {
    throw ConfigError("report JSON: unsupported schema_version");
  }
  std::vector<MetricsReport> out;
  try {
    for (const auto& j : doc.at("reports")) out.push_back(from_json(j));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("report JSON: ") + e.what());
  }
  return out;
}

void emit(const std::vector<MetricsReport>& reports, ReportFormat format, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open report file for writing: " + path);
  out << (format == ReportFormat::Csv ? reports_to_csv(reports) : reports_to_json(reports));
  out.flush();
  if (!out) throw IoError("failed writing report file: " + path);
}

}  // namespace dice
