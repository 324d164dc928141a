#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "envisions/environments.hpp"
#include "envisions/tensor.hpp"
#include "envisions/task.hpp"

namespace envisions {

enum class Source { explore, refine };

inline std::string_view to_string(Source s) { return s == Source::explore ? "explore" : "refine"; }

inline Source parse_source(std::string_view name) {
  if (name == "explore") return Source::explore;
  if (name == "refine") return Source::refine;
  throw std::invalid_argument("unknown trajectory source '" + std::string(name) + "'");
}

/// One executed and self-rewarded solution T = (x, y, a, b, r).
struct Trajectory {
  std::string task_id;
  Tokens x;
  std::string y;
  Tokens a;
  int b = 0;
  double r = 0.0;  // nats per token, <= 0
  Source source = Source::explore;
  std::size_t iteration = 0;
  ExecStatus status = ExecStatus::ParseError;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Keeps the explored trajectory when it alone is correct, or when both agree
/// on correctness and it has the strictly higher self-reward; otherwise keeps
/// the refined one.
inline const Trajectory& filter_pair(const Trajectory& explored, const Trajectory& refined) {
  if (explored.task_id != refined.task_id) {
    throw ContractError("filter_pair on different tasks: " + explored.task_id + " vs " + refined.task_id);
  }
  if (explored.b == 1 && refined.b == 0) return explored;
  if (explored.b == refined.b && explored.r > refined.r) return explored;
  return refined;
}

/// Ranking order for S+ and S-: higher reward first, then later iteration,
/// then lexicographically smaller answer.
inline bool ranks_before(const Trajectory& lhs, const Trajectory& rhs) {
  if (lhs.r != rhs.r) return lhs.r > rhs.r;
  if (lhs.iteration != rhs.iteration) return lhs.iteration > rhs.iteration;
  return lhs.a < rhs.a;
}

struct RankedSets {
  std::vector<Trajectory> positives;  // S+
  std::vector<Trajectory> negatives;  // S-
};

/// Long-term memory of filtered trajectories, deduplicated per task by the
/// answer sequence and bounded by a per-task cap.
class CandidatePool {
 public:
  static constexpr std::size_t kDefaultCap = 64;

  explicit CandidatePool(std::size_t cap = kDefaultCap) : cap_(cap) {
    if (cap_ == 0) throw ContractError("pool cap must be positive");
  }

  /// Inserts one trajectory. A duplicate answer replaces the stored entry
  /// only if its reward is higher. Returns true if the pool changed.
  bool insert(const Trajectory& t) {
    auto& entries = tasks_[t.task_id];
    auto same = std::find_if(entries.begin(), entries.end(), [&](const Trajectory& e) { return e.a == t.a; });
    if (same != entries.end()) {
      if (t.r <= same->r) return false;
      *same = t;
      watermark_ = std::max(watermark_, t.iteration);
      return true;
    }
    entries.push_back(t);
    watermark_ = std::max(watermark_, t.iteration);
    if (entries.size() > cap_) evict(entries);
    return true;
  }

  /// Inserts all; returns how many entries changed the pool.
  std::size_t update(std::span<const Trajectory> filtered) {
    std::size_t changed = 0;
    for (const auto& t : filtered) changed += insert(t) ? 1 : 0;
    return changed;
  }

  /// Stable partition into S+ / S- with both sorted by ranks_before.
  RankedSets ranked(const std::string& task_id) const {
    RankedSets sets;
    auto it = tasks_.find(task_id);
    if (it == tasks_.end()) return sets;
    for (const auto& t : it->second) (t.b == 1 ? sets.positives : sets.negatives).push_back(t);
    std::stable_sort(sets.positives.begin(), sets.positives.end(), ranks_before);
    std::stable_sort(sets.negatives.begin(), sets.negatives.end(), ranks_before);
    return sets;
  }

  const std::map<std::string, std::vector<Trajectory>>& tasks() const { return tasks_; }

  std::vector<Trajectory>& entries(const std::string& task_id) { return tasks_[task_id]; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [_, entries] : tasks_) n += entries.size();
    return n;
  }

  std::size_t size(const std::string& task_id) const {
    auto it = tasks_.find(task_id);
    return it == tasks_.end() ? 0 : it->second.size();
  }

  std::size_t cap() const { return cap_; }
  std::size_t watermark() const { return watermark_; }

  friend bool operator==(const CandidatePool& a, const CandidatePool& b) {
    return a.cap_ == b.cap_ && a.tasks_ == b.tasks_;
  }

 private:
  // Drops the lowest-ranked negative if any, else the lowest-ranked positive.
  static void evict(std::vector<Trajectory>& entries) {
    auto worst = entries.end();
    for (int want_b : {0, 1}) {
      for (auto it = entries.begin(); it != entries.end(); ++it) {
        if (it->b != want_b) continue;
        if (worst == entries.end() || ranks_before(*worst, *it)) worst = it;
      }
      if (worst != entries.end()) break;
    }
    entries.erase(worst);
  }

  std::size_t cap_;
  std::size_t watermark_ = 0;
  std::map<std::string, std::vector<Trajectory>> tasks_;
};

// ---------------------------------------------------------------------------
// JSON Lines: {task_id, x, y, a, b, r, source, iteration, status}

inline nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json j;
  j["task_id"] = t.task_id;
  j["x"] = join_tokens(t.x);
  j["y"] = t.y;
  j["a"] = join_tokens(t.a);
  j["b"] = t.b;
  j["r"] = t.r;
  j["source"] = to_string(t.source);
  j["iteration"] = t.iteration;
  j["status"] = to_string(t.status);
  return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.task_id = j.at("task_id").get<std::string>();
  t.x = split_tokens(j.at("x").get<std::string>());
  t.y = j.at("y").get<std::string>();
  t.a = split_tokens(j.at("a").get<std::string>());
  t.b = j.at("b").get<int>();
  t.r = j.at("r").get<double>();
  t.source = parse_source(j.at("source").get<std::string>());
  t.iteration = j.at("iteration").get<std::size_t>();
  t.status = parse_exec_status(j.at("status").get<std::string>());
  if (t.b != 0 && t.b != 1) throw std::invalid_argument("b must be 0 or 1");
  if (t.b == 1 && t.status != ExecStatus::Ok) throw std::invalid_argument("b=1 with non-Ok status");
  return t;
}

inline void persist(const CandidatePool& pool, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& [_, entries] : pool.tasks()) {
    for (const auto& t : entries) out << to_json(t).dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Replays every line through insert(), so repeated lines collapse.
inline CandidatePool load_pool(const std::filesystem::path& path, std::size_t cap = CandidatePool::kDefaultCap) {
  CandidatePool pool(cap);
  for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) { pool.insert(trajectory_from_json(j)); });
  return pool;
}

}  // namespace envisions
