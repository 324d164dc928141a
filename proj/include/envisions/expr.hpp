#pragma once

// Integer arithmetic expressions:
//   expr   := term (('+' | '-') term)*
//   term   := factor (('*' | '/' | '%') factor)*
//   factor := INT | IDENT | '(' expr ')'
// Division is exact; a non-zero remainder is a runtime error.

#include <cctype>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>

#include "envisions/task.hpp"

namespace envisions::expr {

inline constexpr std::size_t kDefaultStepBudget = 10'000;
inline constexpr std::size_t kMaxNesting = 200;

struct Ast {
  enum class Kind { Number, Ident, Binary };
  Kind kind = Kind::Number;
  std::int64_t value = 0;
  std::string name;
  char op = 0;
  std::unique_ptr<Ast> lhs;
  std::unique_ptr<Ast> rhs;
};

using Bindings = std::map<std::string, std::int64_t>;

namespace detail {

class Parser {
 public:
  explicit Parser(std::string_view src) : src_(src) {}

  std::unique_ptr<Ast> parse() {
    skip_space();
    if (pos_ >= src_.size()) throw ParseError("empty expression", pos_);
    auto root = parse_expr(0);
    skip_space();
    if (pos_ < src_.size()) throw ParseError(std::string("unexpected '") + src_[pos_] + "'", pos_);
    return root;
  }

 private:
  std::unique_ptr<Ast> parse_expr(std::size_t depth) {
    auto lhs = parse_term(depth);
    while (true) {
      skip_space();
      if (pos_ >= src_.size() || (src_[pos_] != '+' && src_[pos_] != '-')) return lhs;
      const char op = src_[pos_++];
      auto rhs = parse_term(depth);
      lhs = binary(op, std::move(lhs), std::move(rhs));
    }
  }

  std::unique_ptr<Ast> parse_term(std::size_t depth) {
    auto lhs = parse_factor(depth);
    while (true) {
      skip_space();
      if (pos_ >= src_.size() || (src_[pos_] != '*' && src_[pos_] != '/' && src_[pos_] != '%')) return lhs;
      const char op = src_[pos_++];
      auto rhs = parse_factor(depth);
      lhs = binary(op, std::move(lhs), std::move(rhs));
    }
  }

  std::unique_ptr<Ast> parse_factor(std::size_t depth) {
    skip_space();
    if (pos_ >= src_.size()) throw ParseError("unexpected end of expression", pos_);
    const char c = src_[pos_];
    if (c == '(') {
      if (depth >= kMaxNesting) throw ParseError("parentheses nested too deeply", pos_);
      ++pos_;
      auto inner = parse_expr(depth + 1);
      skip_space();
      if (pos_ >= src_.size() || src_[pos_] != ')') throw ParseError("expected ')'", pos_);
      ++pos_;
      return inner;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      const std::size_t start = pos_;
      std::int64_t value = 0;
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) {
        if (__builtin_mul_overflow(value, 10, &value) ||
            __builtin_add_overflow(value, src_[pos_] - '0', &value)) {
          throw ParseError("integer literal out of range", start);
        }
        ++pos_;
      }
      auto node = std::make_unique<Ast>();
      node->value = value;
      return node;
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      const std::size_t start = pos_;
      while (pos_ < src_.size() && std::isalnum(static_cast<unsigned char>(src_[pos_]))) ++pos_;
      auto node = std::make_unique<Ast>();
      node->kind = Ast::Kind::Ident;
      node->name = std::string(src_.substr(start, pos_ - start));
      return node;
    }
    throw ParseError(std::string("unexpected '") + c + "'", pos_);
  }

  static std::unique_ptr<Ast> binary(char op, std::unique_ptr<Ast> lhs, std::unique_ptr<Ast> rhs) {
    auto node = std::make_unique<Ast>();
    node->kind = Ast::Kind::Binary;
    node->op = op;
    node->lhs = std::move(lhs);
    node->rhs = std::move(rhs);
    return node;
  }

  void skip_space() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }

  std::string_view src_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses `src`; throws ParseError carrying the byte offset of the fault.
inline std::unique_ptr<Ast> parse_expr(std::string_view src) { return detail::Parser(src).parse(); }

/// Evaluates with overflow checks. Throws RuntimeError for unbound names,
/// division by zero, inexact division, or overflow; BudgetExceeded when more
/// than `budget` nodes are visited.
inline std::int64_t evaluate(const Ast& node, const Bindings& bindings,
                             std::size_t budget = kDefaultStepBudget) {
  std::size_t steps = 0;
  auto eval = [&](auto& self, const Ast& n) -> std::int64_t {
    if (++steps > budget) throw BudgetExceeded("evaluation step budget exceeded");
    switch (n.kind) {
      case Ast::Kind::Number: return n.value;
      case Ast::Kind::Ident: {
        auto it = bindings.find(n.name);
        if (it == bindings.end()) throw RuntimeError("unbound identifier '" + n.name + "'");
        return it->second;
      }
      case Ast::Kind::Binary: break;
    }
    const std::int64_t a = self(self, *n.lhs);
    const std::int64_t b = self(self, *n.rhs);
    std::int64_t out = 0;
    switch (n.op) {
      case '+':
        if (__builtin_add_overflow(a, b, &out)) throw RuntimeError("integer overflow");
        return out;
      case '-':
        if (__builtin_sub_overflow(a, b, &out)) throw RuntimeError("integer overflow");
        return out;
      case '*':
        if (__builtin_mul_overflow(a, b, &out)) throw RuntimeError("integer overflow");
        return out;
      case '/':
      case '%':
        if (b == 0) throw RuntimeError("division by zero");
        if (a == INT64_MIN && b == -1) throw RuntimeError("integer overflow");
        if (n.op == '%') return a % b;
        if (a % b != 0) throw RuntimeError("inexact division");
        return a / b;
      default: throw RuntimeError(std::string("unknown operator '") + n.op + "'");
    }
  };
  return eval(eval, node);
}

/// Reads `name = d d ... ;` bindings from an ExprMath input sequence.
inline Bindings bindings_from(const Tokens& x) {
  Bindings out;
  for (std::size_t i = 0; i + 2 < x.size(); ++i) {
    if (x[i + 1] != "=") continue;
    std::int64_t value = 0;
    std::size_t j = i + 2;
    bool any = false;
    for (; j < x.size() && x[j].size() == 1 && std::isdigit(static_cast<unsigned char>(x[j][0])); ++j) {
      value = value * 10 + (x[j][0] - '0');
      any = true;
    }
    if (any) out[x[i]] = value;
  }
  return out;
}

/// Character-level source of a token sequence.
inline std::string source_of(const Tokens& a) {
  std::string src;
  for (const auto& t : a) src += t;
  return src;
}

/// Splits an expression string into the character-level token alphabet.
inline Tokens tokenize(std::string_view src) {
  Tokens out;
  for (char c : src) {
    if (!std::isspace(static_cast<unsigned char>(c))) out.emplace_back(1, c);
  }
  return out;
}

inline ExecutionResult run_expr(const Tokens& a, const TaskInstance& task,
                                std::size_t budget = kDefaultStepBudget) {
  try {
    auto ast = parse_expr(source_of(a));
    const auto value = evaluate(*ast, bindings_from(task.x), budget);
    return grade(ExecStatus::Ok, std::to_string(value), task.y);
  } catch (const ParseError& e) {
    return grade(ExecStatus::ParseError, std::nullopt, task.y, e.what());
  } catch (const RuntimeError& e) {
    return grade(ExecStatus::RuntimeError, std::nullopt, task.y, e.what());
  } catch (const BudgetExceeded& e) {
    return grade(ExecStatus::Timeout, std::nullopt, task.y, e.what());
  }
}

}  // namespace envisions::expr
