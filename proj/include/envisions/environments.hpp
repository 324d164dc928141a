#pragma once

#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "envisions/expr.hpp"
#include "envisions/grid.hpp"
#include "envisions/logic.hpp"
#include "envisions/rng.hpp"
#include "envisions/task.hpp"

namespace envisions {

/// Pure function of (env, task, a). Every failure is encoded in the status.
inline ExecutionResult execute(EnvKind env, const TaskInstance& task, const Tokens& a) {
  switch (env) {
    case EnvKind::ExprMath: return expr::run_expr(a, task);
    case EnvKind::LogicRules: return logic::run_logic(a, task);
    case EnvKind::GridAgent: return grid::run_grid(a, task);
  }
  return grade(ExecStatus::RuntimeError, std::nullopt, task.y, "unknown environment");
}

/// Grammar tokens plus the words used in task inputs, in a fixed order.
inline Tokens env_tokens(EnvKind env) {
  switch (env) {
    case EnvKind::ExprMath:
      return {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "c", "d", "e",
              "+", "-", "*", "/", "%", "(", ")", "=", ";", "plus", "minus", "times", "over",
              "mod", "open", "close"};
    case EnvKind::LogicRules:
      return {"a", "b", "c", "d", "e", "p", "q", "r", "s", "t", "u", "v", "w", "X", "Y", "Z",
              "fact", "rule", "query", "(", ")", ".", ":-", ",", "?", "is", "if", "then", "and"};
    case EnvKind::GridAgent:
      return {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "grid", "start", "goal", "wall",
              "U", "D", "L", "R"};
  }
  return {};
}

inline Vocab vocab_for(EnvKind env) { return Vocab(env_tokens(env)); }

/// Range constants for the generated distributions. Held-out draws are
/// strictly larger / deeper than held-in ones.
namespace dataset_limits {
inline constexpr std::int64_t kExprHeldInMin = 1, kExprHeldInMax = 9;
inline constexpr std::int64_t kExprHeldOutMin = 10, kExprHeldOutMax = 99;
inline constexpr int kLogicHeldInMinDepth = 1, kLogicHeldInMaxDepth = 2;
inline constexpr int kLogicHeldOutMinDepth = 3, kLogicHeldOutMaxDepth = 4;
inline constexpr int kGridHeldInMin = 3, kGridHeldInMax = 5;
inline constexpr int kGridHeldOutMin = 6, kGridHeldOutMax = 8;
}  // namespace dataset_limits

struct Dataset {
  std::vector<TaskInstance> tasks;
  std::map<std::string, Tokens> witnesses;

  std::vector<TaskInstance> split(Split s) const {
    std::vector<TaskInstance> out;
    std::copy_if(tasks.begin(), tasks.end(), std::back_inserter(out),
                 [s](const TaskInstance& t) { return t.split == s; });
    return out;
  }

  void append(const Dataset& other) {
    tasks.insert(tasks.end(), other.tasks.begin(), other.tasks.end());
    witnesses.insert(other.witnesses.begin(), other.witnesses.end());
  }
};

namespace detail {

struct ExprNode {
  char op = 0;  // 0 for a leaf
  std::string name;
  std::unique_ptr<ExprNode> lhs, rhs;
};

inline int precedence(char op) { return op == '+' || op == '-' ? 1 : 2; }

inline void render_expr(const ExprNode& n, Tokens& symbols, Tokens& words) {
  static const std::map<char, std::string> kWord = {
      {'+', "plus"}, {'-', "minus"}, {'*', "times"}, {'/', "over"}, {'%', "mod"}};
  if (!n.op) {
    symbols.push_back(n.name);
    words.push_back(n.name);
    return;
  }
  auto child = [&](const ExprNode& c, bool right) {
    const bool parens =
        c.op && (precedence(c.op) < precedence(n.op) ||
                 (right && precedence(c.op) == precedence(n.op) && n.op != '+' && n.op != '*'));
    if (parens) {
      symbols.push_back("(");
      words.push_back("open");
    }
    render_expr(c, symbols, words);
    if (parens) {
      symbols.push_back(")");
      words.push_back("close");
    }
  };
  child(*n.lhs, false);
  symbols.emplace_back(1, n.op);
  words.push_back(kWord.at(n.op));
  child(*n.rhs, true);
}

inline void digits_into(std::int64_t value, Tokens& out) {
  for (char c : std::to_string(value)) out.emplace_back(1, c);
}

inline std::pair<TaskInstance, Tokens> expr_task(Rng& rng, Split split) {
  using namespace dataset_limits;
  const bool held_in = split == Split::held_in;
  const std::int64_t lo = held_in ? kExprHeldInMin : kExprHeldOutMin;
  const std::int64_t hi = held_in ? kExprHeldInMax : kExprHeldOutMax;
  const std::size_t operands = rng.coin(0.4) ? 2 : 3;

  std::vector<std::string> names = {"a", "b", "c", "d", "e"};
  rng.shuffle(names);
  names.resize(operands);
  std::vector<std::string> bound = names;
  std::sort(bound.begin(), bound.end());

  TaskInstance task;
  expr::Bindings bindings;
  for (const auto& name : bound) {
    const std::int64_t v = rng.between(lo, hi);
    bindings[name] = v;
    task.x.push_back(name);
    task.x.push_back("=");
    digits_into(v, task.x);
    task.x.push_back(";");
  }

  static const char kOps[] = {'+', '-', '*'};
  auto leaf = [](const std::string& name) {
    auto n = std::make_unique<ExprNode>();
    n->name = name;
    return n;
  };
  auto join = [&](std::unique_ptr<ExprNode> l, std::unique_ptr<ExprNode> r) {
    auto n = std::make_unique<ExprNode>();
    n->op = kOps[rng.below(3)];
    n->lhs = std::move(l);
    n->rhs = std::move(r);
    return n;
  };
  std::unique_ptr<ExprNode> root;
  if (operands == 2) {
    root = join(leaf(names[0]), leaf(names[1]));
  } else if (rng.coin()) {
    auto inner = join(leaf(names[0]), leaf(names[1]));
    root = join(std::move(inner), leaf(names[2]));
  } else {
    auto inner = join(leaf(names[1]), leaf(names[2]));
    root = join(leaf(names[0]), std::move(inner));
  }
  Tokens witness, words;
  render_expr(*root, witness, words);
  task.x.insert(task.x.end(), words.begin(), words.end());
  auto ast = expr::parse_expr(expr::source_of(witness));
  task.y = std::to_string(expr::evaluate(*ast, bindings));
  return {std::move(task), std::move(witness)};
}

inline void logic_atom(const std::string& pred, const std::string& arg, Tokens& out) {
  out.insert(out.end(), {pred, "(", arg, ")"});
}

inline std::pair<TaskInstance, Tokens> logic_task(Rng& rng, Split split) {
  using namespace dataset_limits;
  const bool held_in = split == Split::held_in;
  const int depth = static_cast<int>(held_in ? rng.between(kLogicHeldInMinDepth, kLogicHeldInMaxDepth)
                                             : rng.between(kLogicHeldOutMinDepth, kLogicHeldOutMaxDepth));
  std::vector<std::string> consts = {"a", "b", "c", "d", "e"};
  std::vector<std::string> preds = {"p", "q", "r", "s", "t", "u", "v", "w"};
  rng.shuffle(consts);
  rng.shuffle(preds);
  consts.resize(static_cast<std::size_t>(rng.between(2, 3)));
  // chain preds[0] -> ... -> preds[depth]; preds.back() is an optional side condition
  const std::string side = preds.back();

  Tokens words, program;
  std::vector<std::pair<std::string, std::string>> facts;
  for (const auto& c : consts) {
    if (rng.coin(0.6)) facts.emplace_back(preds[0], c);
    if (rng.coin(0.5)) facts.emplace_back(side, c);
  }
  if (facts.empty()) facts.emplace_back(preds[0], consts[0]);
  for (const auto& [p, c] : facts) {
    words.insert(words.end(), {c, "is", p, "."});
    program.push_back("fact");
    logic_atom(p, c, program);
    program.push_back(".");
  }
  const int side_at = static_cast<int>(rng.between(0, depth));  // == depth means no side condition
  for (int i = 0; i < depth; ++i) {
    const auto& from = preds[static_cast<std::size_t>(i)];
    const auto& to = preds[static_cast<std::size_t>(i) + 1];
    words.insert(words.end(), {"if", from});
    program.push_back("rule");
    logic_atom(to, "X", program);
    program.push_back(":-");
    logic_atom(from, "X", program);
    if (i == side_at) {
      words.insert(words.end(), {"and", side});
      program.push_back(",");
      logic_atom(side, "X", program);
    }
    words.insert(words.end(), {"then", to, "."});
    program.push_back(".");
  }
  const std::string& target = consts[rng.below(consts.size())];
  const std::string& goal = preds[static_cast<std::size_t>(depth)];
  words.insert(words.end(), {"is", target, goal, "?"});
  program.push_back("query");
  logic_atom(goal, target, program);
  program.push_back("?");

  TaskInstance task;
  task.x = std::move(words);
  const auto parsed = logic::parse_program(program);
  task.y = logic::holds(logic::closure(parsed), parsed.query) ? "true" : "false";
  return {std::move(task), std::move(program)};
}

inline std::optional<Tokens> shortest_path(const grid::Layout& g) {
  static const char* kMoves[] = {"U", "D", "L", "R"};
  std::map<grid::Cell, std::pair<grid::Cell, std::string>> parent;
  std::deque<grid::Cell> frontier{g.start};
  parent[g.start] = {g.start, ""};
  while (!frontier.empty()) {
    const grid::Cell at = frontier.front();
    frontier.pop_front();
    if (at == g.goal) {
      Tokens path;
      for (grid::Cell c = at; c != g.start; c = parent[c].first) path.push_back(parent[c].second);
      std::reverse(path.begin(), path.end());
      return path;
    }
    for (const char* m : kMoves) {
      const grid::Cell next = *grid::step(g, at, m);
      if (!parent.count(next)) {
        parent[next] = {at, m};
        frontier.push_back(next);
      }
    }
  }
  return std::nullopt;
}

inline std::pair<TaskInstance, Tokens> grid_task(Rng& rng, Split split) {
  using namespace dataset_limits;
  const bool held_in = split == Split::held_in;
  const int lo = held_in ? kGridHeldInMin : kGridHeldOutMin;
  const int hi = held_in ? kGridHeldInMax : kGridHeldOutMax;
  while (true) {
    grid::Layout g;
    g.width = static_cast<int>(rng.between(lo, hi));
    g.height = static_cast<int>(rng.between(lo, hi));
    auto cell = [&]() {
      return grid::Cell{static_cast<int>(rng.below(static_cast<std::size_t>(g.height))),
                        static_cast<int>(rng.below(static_cast<std::size_t>(g.width)))};
    };
    g.start = cell();
    do {
      g.goal = cell();
    } while (g.goal == g.start);
    for (int r = 0; r < g.height; ++r) {
      for (int c = 0; c < g.width; ++c) {
        const grid::Cell w{r, c};
        if (w != g.start && w != g.goal && rng.coin(0.2)) g.walls.insert(w);
      }
    }
    auto path = shortest_path(g);
    if (!path) continue;
    TaskInstance task;
    task.x = {"grid", std::to_string(g.width), std::to_string(g.height),
              "start", std::to_string(g.start.first), std::to_string(g.start.second),
              "goal", std::to_string(g.goal.first), std::to_string(g.goal.second)};
    for (const auto& [r, c] : g.walls) task.x.insert(task.x.end(), {"wall", std::to_string(r), std::to_string(c)});
    task.y = grid::cell_string(g.goal);
    return {std::move(task), std::move(*path)};
  }
}

inline std::string_view id_prefix(EnvKind env) {
  switch (env) {
    case EnvKind::ExprMath: return "expr";
    case EnvKind::LogicRules: return "logic";
    case EnvKind::GridAgent: return "grid";
  }
  return "task";
}

}  // namespace detail

/// Deterministic under (env, n, seed, split). Every task carries a witness
/// solution that executes with b = 1.
inline Dataset generate_dataset(EnvKind env, std::size_t n, std::uint64_t seed, Split split) {
  if (n == 0) throw std::invalid_argument("dataset size must be positive");
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(env), static_cast<std::uint64_t>(split)));
  Dataset out;
  for (std::size_t i = 0; i < n; ++i) {
    auto [task, witness] = env == EnvKind::ExprMath     ? detail::expr_task(rng, split)
                           : env == EnvKind::LogicRules ? detail::logic_task(rng, split)
                                                        : detail::grid_task(rng, split);
    char suffix[24];
    std::snprintf(suffix, sizeof suffix, "%05zu", i);
    task.id = std::string(detail::id_prefix(env)) + "-" + std::string(to_string(split)) + "-" + suffix;
    task.split = split;
    task.env = env;
    out.witnesses[task.id] = std::move(witness);
    out.tasks.push_back(std::move(task));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines persistence

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline nlohmann::json task_to_json(const TaskInstance& t) {
  return {{"id", t.id}, {"x", join_tokens(t.x)}, {"y", t.y}, {"split", to_string(t.split)},
          {"env", to_string(t.env)}};
}

inline TaskInstance task_from_json(const nlohmann::json& j) {
  TaskInstance t;
  t.id = j.at("id").get<std::string>();
  t.x = split_tokens(j.at("x").get<std::string>());
  t.y = j.at("y").get<std::string>();
  t.split = parse_split(j.at("split").get<std::string>());
  t.env = parse_env_kind(j.at("env").get<std::string>());
  if (t.id.empty()) throw std::invalid_argument("empty id");
  if (t.y.empty()) throw std::invalid_argument("empty y");
  return t;
}

/// Calls `fn(json, line_number)` for each non-blank line; wraps failures in a
/// FormatError naming the file and line.
template <class Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(nlohmann::json::parse(line), number);
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ": line " + std::to_string(number) + ": " + e.what());
    }
  }
}

inline void write_tasks(const std::vector<TaskInstance>& tasks, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline void write_witnesses(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : data.tasks) {
    auto it = data.witnesses.find(t.id);
    if (it == data.witnesses.end()) continue;
    out << nlohmann::json{{"id", t.id}, {"a", join_tokens(it->second)}}.dump() << '\n';
  }
}

inline std::vector<TaskInstance> read_tasks(const std::filesystem::path& path) {
  std::vector<TaskInstance> tasks;
  std::set<std::string> seen;
  for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    TaskInstance t = task_from_json(j);
    if (!seen.insert(t.id).second) throw std::invalid_argument("duplicate id " + t.id);
    tasks.push_back(std::move(t));
  });
  return tasks;
}

inline constexpr const char* kDatasetFile = "dataset.jsonl";
inline constexpr const char* kWitnessFile = "witnesses.jsonl";

/// Writes `<dir>/dataset.jsonl` and the `<dir>/witnesses.jsonl` sidecar.
inline void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_tasks(data.tasks, dir / kDatasetFile);
  write_witnesses(data, dir / kWitnessFile);
}

/// Reads a dataset directory (or a bare dataset file) and its sidecar if present.
inline Dataset read_dataset(const std::filesystem::path& location) {
  const bool is_dir = std::filesystem::is_directory(location);
  const auto file = is_dir ? location / kDatasetFile : location;
  Dataset data;
  data.tasks = read_tasks(file);
  const auto sidecar = file.parent_path() / kWitnessFile;
  if (std::filesystem::exists(sidecar)) {
    for_each_jsonl(sidecar, [&](const nlohmann::json& j, std::size_t) {
      data.witnesses[j.at("id").get<std::string>()] = split_tokens(j.at("a").get<std::string>());
    });
  }
  return data;
}

}  // namespace envisions
