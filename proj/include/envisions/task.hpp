#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "envisions/vocab.hpp"

namespace envisions {

enum class EnvKind { ExprMath, LogicRules, GridAgent };
enum class Split { held_in, held_out };
enum class ExecStatus { Ok, ParseError, RuntimeError, Timeout };

inline std::string_view to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::ExprMath: return "ExprMath";
    case EnvKind::LogicRules: return "LogicRules";
    case EnvKind::GridAgent: return "GridAgent";
  }
  return "?";
}

inline std::string_view to_string(Split split) { return split == Split::held_in ? "held_in" : "held_out"; }

inline std::string_view to_string(ExecStatus status) {
  switch (status) {
    case ExecStatus::Ok: return "Ok";
    case ExecStatus::ParseError: return "ParseError";
    case ExecStatus::RuntimeError: return "RuntimeError";
    case ExecStatus::Timeout: return "Timeout";
  }
  return "?";
}

inline EnvKind parse_env_kind(std::string_view name) {
  if (name == "ExprMath") return EnvKind::ExprMath;
  if (name == "LogicRules") return EnvKind::LogicRules;
  if (name == "GridAgent") return EnvKind::GridAgent;
  throw std::invalid_argument("unknown env '" + std::string(name) +
                              "' (expected ExprMath, LogicRules or GridAgent)");
}

inline Split parse_split(std::string_view name) {
  if (name == "held_in") return Split::held_in;
  if (name == "held_out") return Split::held_out;
  throw std::invalid_argument("unknown split '" + std::string(name) + "' (expected held_in or held_out)");
}

inline ExecStatus parse_exec_status(std::string_view name) {
  for (ExecStatus s : {ExecStatus::Ok, ExecStatus::ParseError, ExecStatus::RuntimeError, ExecStatus::Timeout}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown execution status '" + std::string(name) + "'");
}

/// One (x, y) pair of a synthetic dataset.
struct TaskInstance {
  std::string id;
  Tokens x;
  std::string y;
  Split split = Split::held_in;
  EnvKind env = EnvKind::ExprMath;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct ExecutionResult {
  ExecStatus status = ExecStatus::ParseError;
  std::optional<std::string> output;
  int b = 0;
  std::string message;
};

/// Thrown by the grammar front-ends; `offset` is a byte offset for
/// character-level grammars and a token index for token-level ones.
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t at)
      : std::runtime_error(what + " at offset " + std::to_string(at)), offset(at) {}
  std::size_t offset;
};

struct RuntimeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BudgetExceeded : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Trims whitespace and normalizes integer spellings ("+011" -> "11", "-0" -> "0").
inline std::string canonicalize(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return "";
  const auto last = text.find_last_not_of(" \t\r\n");
  std::string_view core = text.substr(first, last - first + 1);

  std::string_view digits = core;
  bool negative = false;
  if (!digits.empty() && (digits[0] == '+' || digits[0] == '-')) {
    negative = digits[0] == '-';
    digits.remove_prefix(1);
  }
  if (digits.empty() || digits.find_first_not_of("0123456789") != std::string_view::npos) {
    return std::string(core);
  }
  const auto nonzero = digits.find_first_not_of('0');
  if (nonzero == std::string_view::npos) return "0";
  return (negative ? "-" : "") + std::string(digits.substr(nonzero));
}

/// b = 1 iff Ok and canonical output equals canonical y.
inline ExecutionResult grade(ExecStatus status, std::optional<std::string> output, const std::string& y,
                             std::string message = {}) {
  ExecutionResult result{status, std::move(output), 0, std::move(message)};
  if (status == ExecStatus::Ok && result.output && canonicalize(*result.output) == canonicalize(y)) {
    result.b = 1;
  }
  return result;
}

}  // namespace envisions
