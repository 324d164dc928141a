#pragma once

// Environment-guided self-training loop: explore K candidates per task,
// refine each once, execute and self-reward both, keep the better of each
// pair in a long-term pool, build positive-only (U1) and positive/negative
// pair (U2) training sets from the ranked pool, and retrain.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "envisions/environments.hpp"
#include "envisions/metrics.hpp"
#include "envisions/policy.hpp"
#include "envisions/trajectory.hpp"

namespace envisions {

enum class Method { envisions, star_env, sft_dpo };
enum class TrainMode { scratch, continual };
enum class Ablation { no_self_refine, no_self_reward, no_candidate_pool, no_L2 };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::envisions: return "envisions";
    case Method::star_env: return "star_env";
    case Method::sft_dpo: return "sft_dpo";
  }
  return "?";
}
inline std::string_view to_string(TrainMode m) { return m == TrainMode::scratch ? "scratch" : "continual"; }
inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::no_self_refine: return "no_self_refine";
    case Ablation::no_self_reward: return "no_self_reward";
    case Ablation::no_candidate_pool: return "no_candidate_pool";
    case Ablation::no_L2: return "no_L2";
  }
  return "?";
}

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::envisions, Method::star_env, Method::sft_dpo}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("method: unknown value '" + std::string(s) + "'");
}
inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "scratch") return TrainMode::scratch;
  if (s == "continual") return TrainMode::continual;
  throw ConfigError("train_mode: unknown value '" + std::string(s) + "'");
}
inline Ablation parse_ablation(std::string_view s) {
  for (Ablation a : {Ablation::no_self_refine, Ablation::no_self_reward, Ablation::no_candidate_pool, Ablation::no_L2}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("ablations: unknown value '" + std::string(s) + "'");
}

struct RunConfig {
  EnvKind env = EnvKind::ExprMath;
  Method method = Method::envisions;
  std::size_t K = 5;
  std::size_t N1 = 10;
  std::size_t N2 = 2;
  std::size_t iterations = 5;
  TrainMode train_mode = TrainMode::scratch;
  std::set<Ablation> ablations;
  std::size_t epochs_per_iter = 200;
  double lr = 1.0;
  double dpo_beta = 0.1;
  std::uint64_t seed = 0;

  // Optional knobs.
  std::string dataset;  // gen-data directory; empty = generate in-process
  std::size_t n_held_in = 200;
  std::size_t n_held_out = 50;
  std::uint64_t data_seed = 0;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  double clip = 1.0;
  double temperature = 1.0;
  std::size_t max_len = 24;
  std::size_t batch_size = 8;
  std::size_t pool_cap = CandidatePool::kDefaultCap;
  std::size_t warmup_tasks = 20;
  std::size_t warmup_epochs = 1000;
  bool seed_pool_with_warmup = true;
  bool rescore_pool = false;
  bool eval_with_refine = false;
  std::size_t probe_pairs = 64;
  std::size_t workers = 1;

  bool has(Ablation a) const { return ablations.count(a) > 0; }
  bool refines() const { return method != Method::star_env && !has(Ablation::no_self_refine); }
  bool uses_L2() const { return method == Method::envisions && !has(Ablation::no_L2); }

  /// Method name plus ablations, e.g. "envisions+no_L2"; used in file names.
  std::string label() const {
    std::string out(to_string(method));
    for (Ablation a : ablations) out += "+" + std::string(to_string(a));
    return out;
  }

  void validate() const {
    if (K < 1) throw ConfigError("K must be >= 1");
    if (N1 < 1) throw ConfigError("N1 must be >= 1");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (!ablations.empty() && method != Method::envisions) {
      throw ConfigError("ablations are only valid with method envisions");
    }
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(dpo_beta > 0)) throw ConfigError("dpo_beta must be positive");
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (!(clip > 0)) throw ConfigError("clip must be positive");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (pool_cap < 1) throw ConfigError("pool_cap must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (n_held_in < 1 || n_held_out < 1) throw ConfigError("n_held_in and n_held_out must be >= 1");
    if (embed_dim < 1 || hidden_dim < 1) throw ConfigError("embed_dim and hidden_dim must be >= 1");
  }
};

inline constexpr const char* kRequiredConfigKeys[] = {
    "env", "method", "K", "N1", "N2", "iterations", "train_mode", "ablations",
    "epochs_per_iter", "lr", "dpo_beta", "seed"};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json ablations = nlohmann::json::array();
  for (Ablation a : c.ablations) ablations.push_back(to_string(a));
  return {{"env", to_string(c.env)},
          {"method", to_string(c.method)},
          {"K", c.K},
          {"N1", c.N1},
          {"N2", c.N2},
          {"iterations", c.iterations},
          {"train_mode", to_string(c.train_mode)},
          {"ablations", ablations},
          {"epochs_per_iter", c.epochs_per_iter},
          {"lr", c.lr},
          {"dpo_beta", c.dpo_beta},
          {"seed", c.seed},
          {"dataset", c.dataset},
          {"n_held_in", c.n_held_in},
          {"n_held_out", c.n_held_out},
          {"data_seed", c.data_seed},
          {"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},
          {"clip", c.clip},
          {"temperature", c.temperature},
          {"max_len", c.max_len},
          {"batch_size", c.batch_size},
          {"pool_cap", c.pool_cap},
          {"warmup_tasks", c.warmup_tasks},
          {"warmup_epochs", c.warmup_epochs},
          {"seed_pool_with_warmup", c.seed_pool_with_warmup},
          {"rescore_pool", c.rescore_pool},
          {"eval_with_refine", c.eval_with_refine},
          {"probe_pairs", c.probe_pairs},
          {"workers", c.workers}};
}

/// Strict parse: the core RunConfig keys are required, optional knobs fall
/// back to defaults, anything else is rejected. Errors name the key.
inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const nlohmann::json known = to_json(RunConfig{});
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  for (const char* key : kRequiredConfigKeys) {
    if (!j.contains(key)) throw ConfigError("missing config key '" + std::string(key) + "'");
  }
  RunConfig c;
  auto field = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + std::string(key) + "': " + e.what());
    }
  };
  auto enum_field = [&](const char* key, auto parse, auto& out) {
    std::string text;
    field(key, text);
    try {
      out = parse(text);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + std::string(key) + "': " + e.what());
    }
  };
  enum_field("env", parse_env_kind, c.env);
  enum_field("method", parse_method, c.method);
  enum_field("train_mode", parse_train_mode, c.train_mode);
  std::vector<std::string> ablations;
  field("ablations", ablations);
  for (const auto& a : ablations) c.ablations.insert(parse_ablation(a));
  field("K", c.K);
  field("N1", c.N1);
  field("N2", c.N2);
  field("iterations", c.iterations);
  field("epochs_per_iter", c.epochs_per_iter);
  field("lr", c.lr);
  field("dpo_beta", c.dpo_beta);
  field("seed", c.seed);
  field("dataset", c.dataset);
  field("n_held_in", c.n_held_in);
  field("n_held_out", c.n_held_out);
  field("data_seed", c.data_seed);
  field("embed_dim", c.embed_dim);
  field("hidden_dim", c.hidden_dim);
  field("clip", c.clip);
  field("temperature", c.temperature);
  field("max_len", c.max_len);
  field("batch_size", c.batch_size);
  field("pool_cap", c.pool_cap);
  field("warmup_tasks", c.warmup_tasks);
  field("warmup_epochs", c.warmup_epochs);
  field("seed_pool_with_warmup", c.seed_pool_with_warmup);
  field("rescore_pool", c.rescore_pool);
  field("eval_with_refine", c.eval_with_refine);
  field("probe_pairs", c.probe_pairs);
  field("workers", c.workers);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c = config_from_json(j);
  if (!c.dataset.empty() && std::filesystem::path(c.dataset).is_relative()) {
    c.dataset = (path.parent_path() / c.dataset).lexically_normal().string();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Exploration

struct ExplorePair {
  Trajectory explored;
  std::optional<Trajectory> refined;  // absent without self-refinement
};

struct ExploreOptions {
  EnvKind env = EnvKind::ExprMath;
  GenerationParams generation;
  bool refine = true;
  std::size_t workers = 1;
};

namespace detail {

inline Trajectory make_trajectory(EnvKind env, const TaskInstance& task, const Tokens& a, double r, Source source,
                                  std::size_t iteration) {
  const ExecutionResult res = execute(env, task, a);
  return Trajectory{task.id, task.x, task.y, a, res.b, r, source, iteration, res.status};
}

inline std::vector<ExplorePair> explore_task(const PolicyModel& model, const TaskInstance& task,
                                             const ExploreOptions& opt, std::size_t iteration, Rng& rng) {
  std::vector<ExplorePair> out;
  const Samples drafts = sample(model, task.x, opt.generation, rng);
  GenerationParams single = opt.generation;
  single.k_samples = 1;
  for (const Tokens& a : drafts.sequences) {
    ExplorePair pair{make_trajectory(opt.env, task, a, score(model, task.x, a), Source::explore, iteration), {}};
    if (opt.refine) {
      // An empty draft still yields the x <sep> <sep> conditioning layout.
      const Samples s = a.empty() ? sample(model, refine_condition(task.x, a), single, rng)
                                  : refine(model, task.x, a, single, rng);
      const Tokens& condition = s.condition;
      const Tokens& refined = s.sequences.front();
      pair.refined = make_trajectory(opt.env, task, refined, score(model, condition, refined), Source::refine, iteration);
    }
    out.push_back(std::move(pair));
  }
  return out;
}

}  // namespace detail

/// K sampled solutions per task (plus one refinement each), executed and
/// self-rewarded. Task i draws from its own stream keyed on (seed, iteration, i),
/// so the result does not depend on `workers`.
inline std::vector<ExplorePair> explore_phase(const PolicyModel& model, const std::vector<TaskInstance>& tasks,
                                              const ExploreOptions& opt, std::size_t iteration, std::uint64_t seed) {
  std::vector<std::vector<ExplorePair>> per_task(tasks.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < tasks.size(); i += stride) {
      Rng rng(derive_seed(seed, 0xe4, iteration, i));
      per_task[i] = detail::explore_task(model, tasks[i], opt, iteration, rng);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.workers, tasks.size()));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work, w, workers);
    for (auto& t : threads) t.join();
  }
  std::vector<ExplorePair> out;
  for (auto& chunk : per_task) {
    for (auto& p : chunk) out.push_back(std::move(p));
  }
  return out;
}

/// Applies filter_pair to every pair (bare T passes through).
inline std::vector<Trajectory> filter_all(const std::vector<ExplorePair>& pairs) {
  std::vector<Trajectory> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.refined ? filter_pair(p.explored, *p.refined) : p.explored);
  return out;
}

// ---------------------------------------------------------------------------
// Selection

/// Top min(N1, |S+|) positives.
inline std::vector<Trajectory> select_U1(const RankedSets& sets, std::size_t N1) {
  const std::size_t n = std::min(N1, sets.positives.size());
  return {sets.positives.begin(), sets.positives.begin() + static_cast<std::ptrdiff_t>(n)};
}

/// Pairs m = 1..min(N2, |S+| - N1, |S-|): positive ranked m + |U1| with
/// negative ranked m. Any non-positive bound yields no pairs.
inline std::vector<std::pair<Trajectory, Trajectory>> select_U2(const RankedSets& sets, std::size_t N1, std::size_t N2,
                                                                std::size_t u1_size) {
  const long long bound = std::min({static_cast<long long>(N2),
                                    static_cast<long long>(sets.positives.size()) - static_cast<long long>(N1),
                                    static_cast<long long>(sets.negatives.size())});
  std::vector<std::pair<Trajectory, Trajectory>> out;
  for (long long m = 1; m <= bound; ++m) {
    const std::size_t pos = static_cast<std::size_t>(m) - 1 + u1_size;
    if (pos >= sets.positives.size()) break;
    out.emplace_back(sets.positives[pos], sets.negatives[static_cast<std::size_t>(m) - 1]);
  }
  return out;
}

/// Replaces reward ranking by a seeded shuffle of S+ and S-.
inline RankedSets shuffled(RankedSets sets, Rng& rng) {
  rng.shuffle(sets.positives);
  rng.shuffle(sets.negatives);
  return sets;
}

struct U1Entry {
  std::string task_id;
  Tokens x;
  Tokens positive;
  friend bool operator==(const U1Entry&, const U1Entry&) = default;
};

struct U2Entry {
  std::string task_id;
  Tokens x;
  Tokens positive;
  Tokens negative;
  friend bool operator==(const U2Entry&, const U2Entry&) = default;
};

struct TrainingSets {
  std::vector<U1Entry> U1;
  std::vector<U2Entry> U2;
  friend bool operator==(const TrainingSets&, const TrainingSets&) = default;
};

struct SelectOptions {
  std::size_t N1 = 10;
  std::size_t N2 = 2;
  bool pairs = true;          // build U2
  bool random_rank = false;   // no_self_reward
  std::uint64_t seed = 0;
};

/// U1 and U2 over every task in the pool, in task-id order.
inline TrainingSets build_training_sets(const CandidatePool& pool, const SelectOptions& opt) {
  TrainingSets sets;
  std::size_t index = 0;
  for (const auto& [task_id, entries] : pool.tasks()) {
    RankedSets ranked = pool.ranked(task_id);
    if (opt.random_rank) {
      Rng rng(derive_seed(opt.seed, 0x5e1, index));
      ranked = shuffled(std::move(ranked), rng);
    }
    ++index;
    const auto u1 = select_U1(ranked, opt.N1);
    for (const auto& t : u1) sets.U1.push_back({task_id, t.x, t.a});
    if (!opt.pairs) continue;
    for (const auto& [pos, neg] : select_U2(ranked, opt.N1, opt.N2, u1.size())) {
      sets.U2.push_back({task_id, pos.x, pos.a, neg.a});
    }
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t epochs = 30;
  double lr = 0.1;
  double clip = 1.0;
  std::size_t batch_size = 8;
  bool use_L2 = true;
  std::optional<std::uint64_t> reinit_seed;  // set for from-scratch training
  std::uint64_t shuffle_seed = 0;
};

struct LossReport {
  double L1 = 0.0;
  double L2 = 0.0;
  double total = 0.0;
  double first_batch_loss = 0.0;
  std::size_t first_batch_tokens = 0;
  std::size_t steps = 0;
};

namespace detail {

inline double summed_nll(const PolicyModel& model, const std::vector<EncodedExample>& examples) {
  double total = 0.0;
  for (std::size_t start = 0; start < examples.size(); start += 32) {
    const std::size_t end = std::min(examples.size(), start + 32);
    Tape tape;
    const ModelVars vars = bind(tape, model, false);
    Var rows = batch_nll(tape, vars, model, std::span(examples.data() + start, end - start));
    total += sum(rows).value().item();
  }
  return total;
}

}  // namespace detail

/// Minimizes L = L1 + L2 with minibatch SGD, where
///   L1 = sum over U1 of -log p(a+ | x)
///   L2 = sum over U2 of -log p(a+ | x <sep> a-).
/// Reinitializes the model first when opt.reinit_seed is set.
inline LossReport train_iteration(PolicyModel& model, const TrainingSets& sets, const TrainOptions& opt) {
  if (sets.U1.empty() && sets.U2.empty()) throw ContractError("train_iteration needs U1 or U2 data");
  if (opt.reinit_seed) model.reinit(*opt.reinit_seed);

  std::vector<EncodedExample> l1, l2;
  for (const auto& e : sets.U1) l1.push_back(encode_example(model, e.x, e.positive));
  if (opt.use_L2) {
    for (const auto& e : sets.U2) l2.push_back(encode_example(model, refine_condition(e.x, e.negative), e.positive));
  }
  std::vector<EncodedExample> all = l1;
  all.insert(all.end(), l2.begin(), l2.end());

  LossReport report;
  if (all.empty()) return report;
  Rng rng(opt.shuffle_seed);
  std::vector<std::size_t> order(all.size());
  std::vector<EncodedExample> batch;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + opt.batch_size); ++i) batch.push_back(all[order[i]]);
      Tape tape;
      const ModelVars vars = bind(tape, model);
      Var loss = sum(batch_nll(tape, vars, model, batch));
      if (report.steps == 0) {
        report.first_batch_loss = loss.value().item();
        for (const auto& ex : batch) report.first_batch_tokens += ex.ids.size() - ex.answer_start;
      }
      tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(vars.params.size());
      for (Var v : vars.params) grads.push_back(tape.grad(v));
      sgd_step(model.parameters(), grads, opt.lr, opt.clip);
      ++report.steps;
    }
  }
  if (!model.all_finite()) throw TrainingError("parameters became non-finite during training");
  report.L1 = detail::summed_nll(model, l1);
  report.L2 = l2.empty() ? 0.0 : detail::summed_nll(model, l2);
  report.total = report.L1 + report.L2;
  return report;
}

/// Reference log-probabilities for one preference pair.
struct DpoPair {
  Tokens x;
  Tokens positive;
  Tokens negative;
  double ref_positive = 0.0;  // log p_ref(a+ | x)
  double ref_negative = 0.0;  // log p_ref(a- | x)
};

inline double sequence_logprob(const PolicyModel& model, const Tokens& condition, const Tokens& a) {
  double total = 0.0;
  for (double v : token_logprobs(model, condition, a)) total += v;
  return total;
}

/// -log sigmoid(beta * [(log p(a+|x) - ref+) - (log p(a-|x) - ref-)]) on tape.
inline Var dpo_loss(Tape& tape, const ModelVars& vars, const PolicyModel& model, const DpoPair& pair, double beta) {
  Var nll_pos = nll(tape, vars, model, pair.x, pair.positive);
  Var nll_neg = nll(tape, vars, model, pair.x, pair.negative);
  // log p(a+) - log p(a-) = nll_neg - nll_pos
  Var margin = add(nll_neg, scale(nll_pos, -1.0));
  Var logit = shift(scale(margin, beta), beta * (pair.ref_negative - pair.ref_positive));
  return scale(log_sigmoid(logit), -1.0);
}

/// DPO against a frozen reference model over the U2 pairs.
inline LossReport train_dpo(PolicyModel& model, const PolicyModel& reference, const std::vector<U2Entry>& pairs,
                            const TrainOptions& opt, double beta) {
  LossReport report;
  if (pairs.empty()) return report;
  std::vector<DpoPair> data;
  for (const auto& p : pairs) {
    data.push_back({p.x, p.positive, p.negative, sequence_logprob(reference, p.x, p.positive),
                    sequence_logprob(reference, p.x, p.negative)});
  }
  Rng rng(opt.shuffle_seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      Tape tape;
      const ModelVars vars = bind(tape, model);
      Var loss;
      for (std::size_t i = start; i < std::min(order.size(), start + opt.batch_size); ++i) {
        Var term = dpo_loss(tape, vars, model, data[order[i]], beta);
        loss = loss.valid() ? add(loss, term) : term;
      }
      if (report.steps == 0) report.first_batch_loss = loss.value().item();
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (Var v : vars.params) grads.push_back(tape.grad(v));
      sgd_step(model.parameters(), grads, opt.lr, opt.clip);
      ++report.steps;
    }
  }
  for (const auto& p : data) {
    Tape tape;
    report.L2 += dpo_loss(tape, bind(tape, model, false), model, p, beta).value().item();
  }
  report.total = report.L2;
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double rate = 0.0;
  TaskSet solved;
};

/// Greedy single-attempt solve rate; with_refine adds one greedy refinement
/// for failed tasks.
inline EvalResult evaluate(const PolicyModel& model, EnvKind env, const std::vector<TaskInstance>& tasks,
                           std::size_t max_len, bool with_refine = false) {
  EvalResult out;
  if (tasks.empty()) return out;
  for (const auto& task : tasks) {
    const Tokens a = greedy(model, task.x, max_len);
    bool ok = execute(env, task, a).b == 1;
    if (!ok && with_refine) ok = execute(env, task, greedy(model, refine_condition(task.x, a), max_len)).b == 1;
    if (ok) out.solved.insert(task.id);
  }
  out.rate = static_cast<double>(out.solved.size()) / static_cast<double>(tasks.size());
  return out;
}

// ---------------------------------------------------------------------------
// The loop

struct IterationReport {
  std::size_t iteration = 0;
  TaskSet solved_task_ids;  // held-in tasks with a correct trajectory this iteration
  std::size_t new_trajectory_count = 0;
  LossReport losses;
  double held_in_rate = 0.0;
  double held_out_rate = 0.0;
  std::size_t pool_size = 0;
  std::size_t u1_size = 0;
  std::size_t u2_size = 0;
  AnalysisRecord analysis;
};

inline nlohmann::json to_json(const IterationReport& r) {
  return {{"iteration", r.iteration},
          {"solved_task_ids", std::vector<std::string>(r.solved_task_ids.begin(), r.solved_task_ids.end())},
          {"new_trajectory_count", r.new_trajectory_count},
          {"losses", {{"L1", r.losses.L1}, {"L2", r.losses.L2}, {"total", r.losses.total}}},
          {"held_in_rate", r.held_in_rate},
          {"held_out_rate", r.held_out_rate},
          {"pool_size", r.pool_size},
          {"U1_size", r.u1_size},
          {"U2_size", r.u2_size}};
}

struct RunResult {
  std::vector<IterationReport> reports;
  PolicyModel model;
  CandidatePool pool;
  AnalysisSeries series;
  std::vector<ProbePair> probe;
  std::vector<TaskInstance> eval_held_in;
  std::vector<TaskInstance> eval_held_out;
  std::vector<TrainingSets> training_sets;  // per iteration, index 0 = warmup
};

/// Task split used by a run: the first warmup_tasks held-in tasks with
/// witnesses seed the warmup and are excluded from held-in evaluation.
struct RunData {
  std::vector<TaskInstance> explore;
  std::vector<TaskInstance> warmup;
  std::vector<TaskInstance> eval_held_in;
  std::vector<TaskInstance> eval_held_out;
};

inline RunData partition(const RunConfig& config, const Dataset& data) {
  RunData out;
  for (const auto& t : data.tasks) {
    if (t.env != config.env) throw ConfigError("dataset task " + t.id + " is not a " + std::string(to_string(config.env)) + " task");
    if (t.split == Split::held_out) {
      out.eval_held_out.push_back(t);
      continue;
    }
    out.explore.push_back(t);
    if (out.warmup.size() < config.warmup_tasks && data.witnesses.count(t.id)) {
      out.warmup.push_back(t);
    } else {
      out.eval_held_in.push_back(t);
    }
  }
  if (out.explore.empty()) throw ConfigError("dataset has no held_in tasks");
  return out;
}

inline Dataset dataset_for(const RunConfig& config) {
  if (!config.dataset.empty()) return read_dataset(config.dataset);
  Dataset data = generate_dataset(config.env, config.n_held_in, config.data_seed, Split::held_in);
  data.append(generate_dataset(config.env, config.n_held_out, config.data_seed, Split::held_out));
  return data;
}

/// Frozen probe for the margin curve: per task with both sets non-empty,
/// (top positive, top negative), in task-id order, at most `limit` pairs.
inline std::vector<ProbePair> build_probe(const CandidatePool& pool, std::size_t limit) {
  std::vector<ProbePair> probe;
  for (const auto& [task_id, entries] : pool.tasks()) {
    if (probe.size() >= limit) break;
    const RankedSets sets = pool.ranked(task_id);
    if (sets.positives.empty() || sets.negatives.empty()) continue;
    probe.push_back({sets.positives.front().x, sets.positives.front().a, sets.negatives.front().a});
  }
  return probe;
}

inline RunResult run(const RunConfig& config, const Dataset& data,
                     const std::function<void(const IterationReport&)>& on_report = {}) {
  config.validate();
  const RunData split = partition(config, data);
  const bool continual = config.method == Method::sft_dpo || config.train_mode == TrainMode::continual;

  RunResult result{{}, PolicyModel(vocab_for(config.env), {config.embed_dim, config.hidden_dim}, config.seed),
                   CandidatePool(config.pool_cap), {}, {}, split.eval_held_in, split.eval_held_out, {}};
  PolicyModel& model = result.model;
  const std::size_t eval_len = config.max_len;

  auto base_train = [&](std::size_t iteration) {
    TrainOptions t;
    t.epochs = config.epochs_per_iter;
    t.lr = config.lr;
    t.clip = config.clip;
    t.batch_size = config.batch_size;
    t.shuffle_seed = derive_seed(config.seed, 0x7a, iteration);
    return t;
  };

  // Warmup on witness solutions.
  TrainingSets warm;
  for (const auto& t : split.warmup) warm.U1.push_back({t.id, t.x, data.witnesses.at(t.id)});
  IterationReport warm_report;
  if (!warm.U1.empty()) {
    TrainOptions t = base_train(0);
    t.epochs = config.warmup_epochs;
    t.reinit_seed = derive_seed(config.seed, 0x1a1, 0);
    warm_report.losses = train_iteration(model, warm, t);
  }
  result.training_sets.push_back(warm);

  CandidatePool seeds(config.pool_cap);
  if (config.seed_pool_with_warmup) {
    for (const auto& t : split.warmup) {
      const Tokens& w = data.witnesses.at(t.id);
      seeds.insert(detail::make_trajectory(config.env, t, w, score(model, t.x, w), Source::explore, 0));
    }
  }
  result.pool = seeds;

  TaskSet universe;
  for (const auto& t : split.explore) universe.insert(t.id);
  TaskSet solved_prev, solved_ever;
  for (const auto& t : split.warmup) solved_prev.insert(t.id);
  solved_ever = solved_prev;

  auto finish = [&](IterationReport& r) {
    r.held_in_rate = evaluate(model, config.env, split.eval_held_in, eval_len, config.eval_with_refine).rate;
    r.held_out_rate = evaluate(model, config.env, split.eval_held_out, eval_len, config.eval_with_refine).rate;
    r.pool_size = result.pool.size();
    r.analysis.iteration = r.iteration;
    r.analysis.held_in_rate = r.held_in_rate;
    r.analysis.held_out_rate = r.held_out_rate;
    r.analysis.diversity = diversity(result.pool);
    r.analysis.delta_logp = delta_logp(model, result.probe);
    result.series.records.push_back(r.analysis);
    result.reports.push_back(r);
    if (on_report) on_report(r);
  };

  warm_report.iteration = 0;
  warm_report.solved_task_ids = solved_prev;
  warm_report.new_trajectory_count = result.pool.size();
  warm_report.u1_size = warm.U1.size();
  finish(warm_report);

  ExploreOptions explore;
  explore.env = config.env;
  explore.generation = {config.temperature, config.max_len, config.K};
  explore.refine = config.refines();
  explore.workers = config.workers;

  for (std::size_t i = 1; i <= config.iterations; ++i) {
    IterationReport report;
    report.iteration = i;

    const auto pairs = explore_phase(model, split.explore, explore, i, config.seed);
    for (const auto& p : pairs) {
      if (p.explored.b == 1 || (p.refined && p.refined->b == 1)) report.solved_task_ids.insert(p.explored.task_id);
    }
    const auto filtered = filter_all(pairs);
    if (config.has(Ablation::no_candidate_pool)) result.pool = CandidatePool(config.pool_cap);
    report.new_trajectory_count = result.pool.update(filtered);

    if (config.rescore_pool) {
      for (const auto& [task_id, _] : result.pool.tasks()) {
        for (auto& t : result.pool.entries(task_id)) t.r = score(model, t.x, t.a);
      }
    }
    if (i == 1) result.probe = build_probe(result.pool, config.probe_pairs);

    SelectOptions select;
    select.N1 = config.N1;
    select.N2 = config.N2;
    select.pairs = config.method == Method::sft_dpo || config.uses_L2();
    select.random_rank = config.has(Ablation::no_self_reward);
    select.seed = derive_seed(config.seed, 0x5e, i);
    TrainingSets sets = build_training_sets(result.pool, select);
    report.u1_size = sets.U1.size();
    report.u2_size = sets.U2.size();

    TrainOptions t = base_train(i);
    if (!continual) t.reinit_seed = derive_seed(config.seed, 0x1a1, i);
    if (config.method == Method::sft_dpo) {
      TrainingSets sft{sets.U1, {}};
      t.use_L2 = false;
      if (!sft.U1.empty()) report.losses = train_iteration(model, sft, t);
      const PolicyModel reference = model;
      TrainOptions d = base_train(i);
      d.shuffle_seed = derive_seed(config.seed, 0xd0, i);
      const LossReport dpo = train_dpo(model, reference, sets.U2, d, config.dpo_beta);
      report.losses.L2 = dpo.L2;
      report.losses.total = report.losses.L1 + report.losses.L2;
    } else {
      t.use_L2 = config.uses_L2();
      if (!t.use_L2) sets.U2.clear();
      if (!sets.U1.empty() || !sets.U2.empty()) report.losses = train_iteration(model, sets, t);
    }
    result.training_sets.push_back(sets);

    report.analysis.exploratory_ability = exploratory_ability(report.solved_task_ids, solved_ever, universe);
    if (!solved_prev.empty()) report.analysis.stability = stability(report.solved_task_ids, solved_prev);
    solved_prev = report.solved_task_ids;
    solved_ever.insert(solved_prev.begin(), solved_prev.end());
    finish(report);
  }
  return result;
}

inline RunResult run_star_env(RunConfig config, const Dataset& data,
                              const std::function<void(const IterationReport&)>& on_report = {}) {
  if (config.method != Method::star_env) throw ConfigError("run_star_env needs method star_env");
  return run(config, data, on_report);
}

inline RunResult run_sft_dpo(RunConfig config, const Dataset& data,
                             const std::function<void(const IterationReport&)>& on_report = {}) {
  if (config.method != Method::sft_dpo) throw ConfigError("run_sft_dpo needs method sft_dpo");
  return run(config, data, on_report);
}

}  // namespace envisions
