#pragma once

// Datalog-style rule programs:
//   stmt := 'fact' atom '.' | 'rule' atom ':-' atom (',' atom)* '.' | 'query' atom '?'
//   atom := pred '(' term (',' term)* ')'
// Terms starting with an uppercase letter are variables. Evaluation is naive
// forward chaining to a fixpoint; head variables that the body does not bind
// range over every constant mentioned in the program.

#include <cctype>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "envisions/task.hpp"

namespace envisions::logic {

inline constexpr std::size_t kDefaultRoundBudget = 1'000;
// Bounds rule instantiations per closure so adversarial heads (many unbound
// variables) cannot blow up.
inline constexpr std::size_t kDerivationBudget = 200'000;

struct Atom {
  std::string pred;
  std::vector<std::string> args;
  friend bool operator==(const Atom&, const Atom&) = default;
};

struct Rule {
  Atom head;
  std::vector<Atom> body;
};

struct Program {
  std::vector<Atom> facts;
  std::vector<Rule> rules;
  Atom query;
};

inline bool is_variable(std::string_view term) {
  return !term.empty() && std::isupper(static_cast<unsigned char>(term[0]));
}

inline bool is_name(std::string_view term) {
  if (term.empty() || !std::isalpha(static_cast<unsigned char>(term[0]))) return false;
  for (char c : term) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  }
  return true;
}

/// Splits program text into grammar tokens.
inline Tokens tokenize(std::string_view src) {
  Tokens out;
  std::size_t i = 0;
  while (i < src.size()) {
    const char c = src[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == ':' && i + 1 < src.size() && src[i + 1] == '-') {
      out.emplace_back(":-");
      i += 2;
    } else if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < src.size() && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_')) ++j;
      out.emplace_back(src.substr(i, j - i));
      i = j;
    } else {
      out.emplace_back(1, c);
      ++i;
    }
  }
  return out;
}

namespace detail {

class Parser {
 public:
  explicit Parser(const Tokens& tokens) : t_(tokens) {}

  Program parse() {
    Program program;
    bool have_query = false;
    while (pos_ < t_.size()) {
      const std::string& kw = t_[pos_];
      if (kw == "fact") {
        ++pos_;
        program.facts.push_back(atom());
        expect(".");
      } else if (kw == "rule") {
        ++pos_;
        Rule rule;
        rule.head = atom();
        expect(":-");
        rule.body.push_back(atom());
        while (peek(",")) {
          ++pos_;
          rule.body.push_back(atom());
        }
        expect(".");
        program.rules.push_back(std::move(rule));
      } else if (kw == "query") {
        if (have_query) throw ParseError("second query", pos_);
        ++pos_;
        program.query = atom();
        expect("?");
        have_query = true;
      } else {
        throw ParseError("expected fact, rule or query but found '" + kw + "'", pos_);
      }
    }
    if (!have_query) throw ParseError("program has no query", pos_);
    return program;
  }

 private:
  Atom atom() {
    Atom a;
    if (pos_ >= t_.size() || !is_name(t_[pos_]) || is_variable(t_[pos_])) {
      throw ParseError("expected predicate name", pos_);
    }
    a.pred = t_[pos_++];
    expect("(");
    a.args.push_back(term());
    while (peek(",")) {
      ++pos_;
      a.args.push_back(term());
    }
    expect(")");
    return a;
  }

  std::string term() {
    if (pos_ >= t_.size() || !is_name(t_[pos_])) throw ParseError("expected term", pos_);
    return t_[pos_++];
  }

  bool peek(std::string_view s) const { return pos_ < t_.size() && t_[pos_] == s; }

  void expect(std::string_view s) {
    if (!peek(s)) throw ParseError("expected '" + std::string(s) + "'", pos_);
    ++pos_;
  }

  const Tokens& t_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Throws ParseError with the offending token index.
inline Program parse_program(const Tokens& tokens) { return detail::Parser(tokens).parse(); }

/// Ground facts keyed by predicate; each entry is an argument tuple.
using FactSet = std::map<std::string, std::set<std::vector<std::string>>>;

inline std::set<std::string> constants_of(const Program& p) {
  std::set<std::string> out;
  auto collect = [&](const Atom& a) {
    for (const auto& t : a.args) {
      if (!is_variable(t)) out.insert(t);
    }
  };
  for (const auto& f : p.facts) collect(f);
  for (const auto& r : p.rules) {
    collect(r.head);
    for (const auto& b : r.body) collect(b);
  }
  collect(p.query);
  return out;
}

namespace detail {

using Binding = std::map<std::string, std::string>;

inline bool unify(const Atom& pattern, const std::vector<std::string>& tuple, Binding& binding) {
  if (pattern.args.size() != tuple.size()) return false;
  for (std::size_t i = 0; i < tuple.size(); ++i) {
    const std::string& term = pattern.args[i];
    if (!is_variable(term)) {
      if (term != tuple[i]) return false;
      continue;
    }
    auto [it, inserted] = binding.emplace(term, tuple[i]);
    if (!inserted && it->second != tuple[i]) return false;
  }
  return true;
}

// Enumerates all joins of `body[index..]` against `facts`.
template <class Emit>
void join(const std::vector<Atom>& body, std::size_t index, const FactSet& facts, Binding& binding,
          Emit&& emit) {
  if (index == body.size()) {
    emit(binding);
    return;
  }
  auto it = facts.find(body[index].pred);
  if (it == facts.end()) return;
  for (const auto& tuple : it->second) {
    Binding next = binding;
    if (unify(body[index], tuple, next)) join(body, index + 1, facts, next, emit);
  }
}

// Instantiates the head, enumerating unbound head variables over `universe`.
template <class Emit>
void ground_head(const Atom& head, std::size_t index, const std::vector<std::string>& universe,
                 Binding& binding, std::vector<std::string>& tuple, Emit&& emit) {
  if (index == head.args.size()) {
    emit(tuple);
    return;
  }
  const std::string& term = head.args[index];
  if (!is_variable(term)) {
    tuple.push_back(term);
    ground_head(head, index + 1, universe, binding, tuple, emit);
    tuple.pop_back();
    return;
  }
  if (auto it = binding.find(term); it != binding.end()) {
    tuple.push_back(it->second);
    ground_head(head, index + 1, universe, binding, tuple, emit);
    tuple.pop_back();
    return;
  }
  for (const auto& c : universe) {
    binding[term] = c;
    tuple.push_back(c);
    ground_head(head, index + 1, universe, binding, tuple, emit);
    tuple.pop_back();
    binding.erase(term);
  }
}

}  // namespace detail

struct Closure {
  FactSet facts;
  std::size_t rounds = 0;
};

/// Forward chaining until no rule adds a fact. Throws RuntimeError for a
/// non-ground fact and BudgetExceeded after `max_rounds` productive rounds.
inline Closure closure(const Program& program, std::size_t max_rounds = kDefaultRoundBudget) {
  Closure out;
  for (const auto& f : program.facts) {
    for (const auto& t : f.args) {
      if (is_variable(t)) throw RuntimeError("fact " + f.pred + " is not ground");
    }
    out.facts[f.pred].insert(f.args);
  }
  const auto constants = constants_of(program);
  const std::vector<std::string> universe(constants.begin(), constants.end());

  std::size_t derivations = 0;
  while (true) {
    FactSet fresh;
    for (const auto& rule : program.rules) {
      detail::Binding binding;
      detail::join(rule.body, 0, out.facts, binding, [&](detail::Binding& b) {
        std::vector<std::string> tuple;
        detail::ground_head(rule.head, 0, universe, b, tuple, [&](const std::vector<std::string>& t) {
          if (++derivations > kDerivationBudget) throw BudgetExceeded("derivation budget exceeded");
          auto known = out.facts.find(rule.head.pred);
          if (known == out.facts.end() || !known->second.count(t)) fresh[rule.head.pred].insert(t);
        });
      });
    }
    if (fresh.empty()) return out;
    if (++out.rounds > max_rounds) throw BudgetExceeded("fixpoint round budget exceeded");
    for (auto& [pred, tuples] : fresh) out.facts[pred].insert(tuples.begin(), tuples.end());
  }
}

/// True iff some derived fact matches the query pattern.
inline bool holds(const Closure& c, const Atom& query) {
  auto it = c.facts.find(query.pred);
  if (it == c.facts.end()) return false;
  for (const auto& tuple : it->second) {
    detail::Binding b;
    if (detail::unify(query, tuple, b)) return true;
  }
  return false;
}

inline ExecutionResult run_logic(const Tokens& program, const TaskInstance& task,
                                 std::size_t max_rounds = kDefaultRoundBudget) {
  try {
    const Program parsed = parse_program(program);
    const Closure c = closure(parsed, max_rounds);
    return grade(ExecStatus::Ok, holds(c, parsed.query) ? "true" : "false", task.y);
  } catch (const ParseError& e) {
    return grade(ExecStatus::ParseError, std::nullopt, task.y, e.what());
  } catch (const RuntimeError& e) {
    return grade(ExecStatus::RuntimeError, std::nullopt, task.y, e.what());
  } catch (const BudgetExceeded& e) {
    return grade(ExecStatus::Timeout, std::nullopt, task.y, e.what());
  }
}

}  // namespace envisions::logic
