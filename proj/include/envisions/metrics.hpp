#pragma once

// Per-iteration analysis views: exploratory ability and stability of the
// solved-task sets, the positive/negative log-probability margin on a frozen
// probe set, and the number of correct unique trajectories in the pool.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "envisions/policy.hpp"
#include "envisions/trajectory.hpp"

namespace envisions {

using TaskSet = std::set<std::string>;

/// Fraction of tasks unsolved before that are solved now:
/// |now \ before| / max(1, |universe \ before|).
inline double exploratory_ability(const TaskSet& solved_now, const TaskSet& solved_before, const TaskSet& universe) {
  std::size_t fresh = 0;
  for (const auto& t : solved_now) fresh += solved_before.count(t) ? 0 : 1;
  std::size_t open = 0;
  for (const auto& t : universe) open += solved_before.count(t) ? 0 : 1;
  return static_cast<double>(fresh) / static_cast<double>(std::max<std::size_t>(1, open));
}

/// Fraction of the previous iteration's solved tasks still solved:
/// |now ∩ prev| / max(1, |prev|).
inline double stability(const TaskSet& solved_now, const TaskSet& solved_prev) {
  std::size_t kept = 0;
  for (const auto& t : solved_prev) kept += solved_now.count(t) ? 1 : 0;
  return static_cast<double>(kept) / static_cast<double>(std::max<std::size_t>(1, solved_prev.size()));
}

struct ProbePair {
  Tokens x;
  Tokens positive;
  Tokens negative;
};

/// Mean of score(x -> a+) - score(x -> a-) in nats per token; nullopt for an
/// empty probe set.
inline std::optional<double> delta_logp(const PolicyModel& model, std::span<const ProbePair> pairs) {
  if (pairs.empty()) return std::nullopt;
  double total = 0.0;
  for (const auto& p : pairs) total += score(model, p.x, p.positive) - score(model, p.x, p.negative);
  return total / static_cast<double>(pairs.size());
}

/// Number of distinct (task, answer) entries with b = 1.
inline std::size_t diversity(const CandidatePool& pool) {
  std::size_t n = 0;
  for (const auto& [_, entries] : pool.tasks()) {
    std::set<Tokens> seen;
    for (const auto& t : entries) {
      if (t.b == 1 && seen.insert(t.a).second) ++n;
    }
  }
  return n;
}

struct AnalysisRecord {
  std::size_t iteration = 0;
  double held_in_rate = 0.0;
  double held_out_rate = 0.0;
  std::optional<double> exploratory_ability;
  std::optional<double> stability;
  std::optional<double> delta_logp;
  std::size_t diversity = 0;

  friend bool operator==(const AnalysisRecord&, const AnalysisRecord&) = default;
};

struct AnalysisSeries {
  std::vector<AnalysisRecord> records;
  friend bool operator==(const AnalysisSeries&, const AnalysisSeries&) = default;
};

inline constexpr const char* kAnalysisColumns[] = {
    "iteration", "held_in_rate", "held_out_rate", "exploratory_ability", "stability", "delta_logp", "diversity"};

inline std::string csv_header() {
  std::string out;
  for (const char* c : kAnalysisColumns) out += (out.empty() ? "" : ",") + std::string(c);
  return out;
}

/// Shortest decimal that round-trips; empty for a missing value.
inline std::string format_number(std::optional<double> v) {
  if (!v) return "";
  char buf[32];
  for (int precision = 6; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, *v);
    if (std::strtod(buf, nullptr) == *v) break;
  }
  return buf;
}

inline std::vector<std::string> csv_cells(const AnalysisRecord& r) {
  return {std::to_string(r.iteration), format_number(r.held_in_rate), format_number(r.held_out_rate),
          format_number(r.exploratory_ability), format_number(r.stability), format_number(r.delta_logp),
          std::to_string(r.diversity)};
}

inline std::string to_csv(const AnalysisSeries& series) {
  std::string out = csv_header() + "\n";
  for (const auto& r : series.records) {
    const auto cells = csv_cells(r);
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
    out += "\n";
  }
  return out;
}

inline nlohmann::json optional_json(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json to_json(const AnalysisSeries& series) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : series.records) {
    rows.push_back({{"iteration", r.iteration},
                    {"held_in_rate", r.held_in_rate},
                    {"held_out_rate", r.held_out_rate},
                    {"exploratory_ability", optional_json(r.exploratory_ability)},
                    {"stability", optional_json(r.stability)},
                    {"delta_logp", optional_json(r.delta_logp)},
                    {"diversity", r.diversity}});
  }
  return rows;
}

inline AnalysisSeries series_from_json(const nlohmann::json& rows) {
  auto opt = [](const nlohmann::json& v) -> std::optional<double> {
    return v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
  };
  AnalysisSeries series;
  for (const auto& row : rows) {
    AnalysisRecord r;
    r.iteration = row.at("iteration").get<std::size_t>();
    r.held_in_rate = row.at("held_in_rate").get<double>();
    r.held_out_rate = row.at("held_out_rate").get<double>();
    r.exploratory_ability = opt(row.at("exploratory_ability"));
    r.stability = opt(row.at("stability"));
    r.delta_logp = opt(row.at("delta_logp"));
    r.diversity = row.at("diversity").get<std::size_t>();
    series.records.push_back(r);
  }
  return series;
}

enum class ExportFormat { csv, json };

/// `analysis_<method>_<seed>`; `method` may carry ablation suffixes.
inline std::string analysis_basename(const std::string& method, std::uint64_t seed) {
  return "analysis_" + method + "_" + std::to_string(seed);
}

inline void export_series(const AnalysisSeries& series, const std::filesystem::path& path, ExportFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (format == ExportFormat::csv ? to_csv(series) : to_json(series).dump(2) + "\n");
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Parses an exported analysis CSV back into rows of cells (header excluded).
inline std::vector<std::vector<std::string>> read_analysis_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != csv_header()) {
    throw std::runtime_error(path.string() + ": unexpected analysis header");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream fields(line);
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != std::size(kAnalysisColumns)) {
      throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace envisions
