#pragma once

// Grid navigation. Input layout:
//   grid <W> <H> start <r> <c> goal <r> <c> (wall <r> <c>)*
// Cells are (row, col); R increases col, D increases row. Moves into walls or
// off the board leave the agent in place.

#include <optional>
#include <set>
#include <string>
#include <utility>

#include "envisions/task.hpp"

namespace envisions::grid {

inline constexpr std::size_t kDefaultActionBudget = 256;

using Cell = std::pair<int, int>;

struct Layout {
  int width = 0;
  int height = 0;
  Cell start{0, 0};
  Cell goal{0, 0};
  std::set<Cell> walls;

  bool open(Cell c) const {
    return c.first >= 0 && c.first < height && c.second >= 0 && c.second < width && !walls.count(c);
  }
};

inline std::string cell_string(Cell c) { return std::to_string(c.first) + "," + std::to_string(c.second); }

/// Throws RuntimeError if x is not a well-formed layout.
inline Layout parse_layout(const Tokens& x) {
  Layout g;
  std::size_t i = 0;
  auto number = [&]() {
    if (i >= x.size()) throw RuntimeError("truncated grid description");
    try {
      std::size_t used = 0;
      const int v = std::stoi(x[i], &used);
      if (used != x[i].size()) throw RuntimeError("bad number '" + x[i] + "'");
      ++i;
      return v;
    } catch (const std::logic_error&) {
      throw RuntimeError("bad number '" + x[i] + "'");
    }
  };
  bool sized = false, started = false, targeted = false;
  while (i < x.size()) {
    const std::string& key = x[i++];
    if (key == "grid") {
      g.width = number();
      g.height = number();
      sized = true;
    } else if (key == "start") {
      g.start.first = number();
      g.start.second = number();
      started = true;
    } else if (key == "goal") {
      g.goal.first = number();
      g.goal.second = number();
      targeted = true;
    } else if (key == "wall") {
      const int r = number();
      g.walls.insert({r, number()});
    } else {
      throw RuntimeError("unexpected grid token '" + key + "'");
    }
  }
  if (!sized || !started || !targeted) throw RuntimeError("incomplete grid description");
  return g;
}

inline std::optional<Cell> step(const Layout& g, Cell at, const std::string& action) {
  Cell next = at;
  if (action == "U") {
    --next.first;
  } else if (action == "D") {
    ++next.first;
  } else if (action == "L") {
    --next.second;
  } else if (action == "R") {
    ++next.second;
  } else {
    return std::nullopt;
  }
  return g.open(next) ? next : at;
}

inline ExecutionResult run_grid(const Tokens& actions, const TaskInstance& task,
                                std::size_t budget = kDefaultActionBudget) {
  Layout g;
  try {
    g = parse_layout(task.x);
  } catch (const RuntimeError& e) {
    return grade(ExecStatus::RuntimeError, std::nullopt, task.y, e.what());
  }
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (actions[i] != "U" && actions[i] != "D" && actions[i] != "L" && actions[i] != "R") {
      return grade(ExecStatus::ParseError, std::nullopt, task.y,
                   ParseError("unknown action '" + actions[i] + "'", i).what());
    }
  }
  if (actions.size() > budget) {
    return grade(ExecStatus::Timeout, std::nullopt, task.y, "action budget exceeded");
  }
  Cell at = g.start;
  for (const auto& a : actions) at = *step(g, at, a);
  return grade(ExecStatus::Ok, cell_string(at), task.y);
}

}  // namespace envisions::grid
