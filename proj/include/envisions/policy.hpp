#pragma once

// Autoregressive policy: token embedding -> single-layer GRU -> vocabulary
// projection. A conditional sequence is laid out as
//   <bos> condition <sep> answer <eos>
// where refinement conditions are `x <sep> a_prev`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "envisions/rng.hpp"
#include "envisions/tensor.hpp"
#include "envisions/vocab.hpp"

namespace envisions {

struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t context_budget = 128;  // max tokens in <bos> condition <sep>
  double init_scale = 0.08;
};

struct GenerationParams {
  double temperature = 1.0;
  std::size_t max_len = 32;
  std::size_t k_samples = 5;
};

struct Samples {
  std::vector<Tokens> sequences;
  Tokens condition;        // conditioning sequence actually used
  bool truncated = false;  // refine only: a_prev was cut from the left to fit the context budget
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum ParamIndex : std::size_t {
  kEmbedding, kWz, kWr, kWn, kUz, kUr, kUn, kBz, kBr, kBn, kWout, kBout, kParamCount
};

class PolicyModel {
 public:
  PolicyModel(Vocab vocab, ModelConfig config, std::uint64_t seed)
      : vocab_(std::move(vocab)), config_(config) {
    const std::size_t v = vocab_.size(), d = config_.embed_dim, h = config_.hidden_dim;
    const std::pair<const char*, std::pair<std::size_t, std::size_t>> shapes[kParamCount] = {
        {"embedding", {v, d}}, {"W_z", {d, h}}, {"W_r", {d, h}}, {"W_n", {d, h}},
        {"U_z", {h, h}},       {"U_r", {h, h}}, {"U_n", {h, h}}, {"b_z", {1, h}},
        {"b_r", {1, h}},       {"b_n", {1, h}}, {"W_out", {h, v}}, {"b_out", {1, v}}};
    for (const auto& [name, shape] : shapes) {
      params_.push_back(Parameter{name, Tensor(shape.first, shape.second)});
    }
    reinit(seed);
  }

  /// Redraws every parameter from U(-init_scale, init_scale) and restarts the
  /// sampling stream, both from `seed`.
  void reinit(std::uint64_t seed) {
    rng_ = Rng(seed);
    Rng init(derive_seed(seed, 0x1417));
    for (auto& p : params_) {
      for (double& v : p.value.values()) v = init.uniform(-config_.init_scale, config_.init_scale);
    }
  }

  const Vocab& vocab() const { return vocab_; }
  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const Tensor& param(ParamIndex i) const { return params_[i].value; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }

  bool all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](const Parameter& p) { return p.value.all_finite(); });
  }

  /// <bos> condition <sep>
  std::vector<int> prefix_ids(const Tokens& condition) const {
    std::vector<int> ids{vocab_.bos()};
    for (const auto& t : condition) ids.push_back(vocab_.id(t));
    ids.push_back(vocab_.sep());
    return ids;
  }

  // -- inference path (no tape) ---------------------------------------------

  std::vector<double> initial_state() const { return std::vector<double>(config_.hidden_dim, 0.0); }

  /// Advances the hidden state by one input token.
  void step(int token, std::vector<double>& hidden) const {
    const std::size_t h = config_.hidden_dim;
    using Row = Eigen::Matrix<double, 1, Eigen::Dynamic>;
    const auto x = detail::view(param(kEmbedding)).row(token);
    const Eigen::Map<const Row> prev(hidden.data(), static_cast<Eigen::Index>(h));
    const Row z = (x * detail::view(param(kWz)) + prev * detail::view(param(kUz)) + detail::view(param(kBz)))
                      .unaryExpr([](double v) { return detail::sigmoid(v); });
    const Row r = (x * detail::view(param(kWr)) + prev * detail::view(param(kUr)) + detail::view(param(kBr)))
                      .unaryExpr([](double v) { return detail::sigmoid(v); });
    const Row hn = prev * detail::view(param(kUn));
    const Row n = (x * detail::view(param(kWn)) + detail::view(param(kBn)) + r.cwiseProduct(hn))
                      .unaryExpr([](double v) { return std::tanh(v); });
    const Row next = n + z.cwiseProduct(prev - n);
    std::copy(next.data(), next.data() + h, hidden.begin());
  }

  std::vector<double> logits(const std::vector<double>& hidden) const {
    using Row = Eigen::Matrix<double, 1, Eigen::Dynamic>;
    const Eigen::Map<const Row> hv(hidden.data(), static_cast<Eigen::Index>(hidden.size()));
    const Row out = hv * detail::view(param(kWout)) + detail::view(param(kBout));
    return std::vector<double>(out.data(), out.data() + out.size());
  }

  /// Next-token log-distribution after feeding all of `ids`.
  std::vector<double> next_logprobs(std::span<const int> ids) const {
    auto hidden = initial_state();
    for (int id : ids) step(id, hidden);
    return log_softmax(logits(hidden));
  }

 private:
  Vocab vocab_;
  ModelConfig config_;
  std::vector<Parameter> params_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Generation and scoring

namespace detail {

inline int draw_token(std::span<const double> logits, double temperature, Rng& rng) {
  std::vector<double> scaled(logits.begin(), logits.end());
  for (double& v : scaled) v /= temperature;
  const auto logp = log_softmax(scaled);
  double u = rng.uniform();
  for (std::size_t i = 0; i < logp.size(); ++i) {
    u -= std::exp(logp[i]);
    if (u < 0) return static_cast<int>(i);
  }
  // rounding residue: fall back to the most likely token
  return static_cast<int>(std::max_element(logp.begin(), logp.end()) - logp.begin());
}

inline Tokens decode_from(const PolicyModel& model, const std::vector<int>& prefix, std::size_t max_len,
                          double temperature, Rng* rng) {
  auto hidden = model.initial_state();
  for (int id : prefix) model.step(id, hidden);
  Tokens out;
  const Vocab& v = model.vocab();
  while (out.size() < max_len) {
    auto lg = model.logits(hidden);
    // Only answer tokens and <eos> may be emitted.
    for (int id : {v.bos(), v.sep(), v.pad()}) lg[static_cast<std::size_t>(id)] = -INFINITY;
    const int next = rng ? draw_token(lg, temperature, *rng)
                         : static_cast<int>(std::max_element(lg.begin(), lg.end()) - lg.begin());
    if (next == v.eos()) break;
    out.push_back(v.token(next));
    model.step(next, hidden);
  }
  return out;
}

}  // namespace detail

/// Conditioning sequence used for refinement: x <sep> a_prev.
inline Tokens refine_condition(const Tokens& x, const Tokens& a_prev) {
  Tokens cond = x;
  cond.emplace_back(kSep);
  cond.insert(cond.end(), a_prev.begin(), a_prev.end());
  return cond;
}

/// Ancestral sampling of params.k_samples answers to `condition`.
inline Samples sample(const PolicyModel& model, const Tokens& condition, const GenerationParams& params,
                      Rng& rng) {
  if (condition.empty()) throw ContractError("sample needs a non-empty input");
  if (!(params.temperature > 0)) throw ContractError("temperature must be positive");
  if (params.max_len < 1) throw ContractError("max_len must be at least 1");
  const auto prefix = model.prefix_ids(condition);
  Samples out;
  out.condition = condition;
  for (std::size_t k = 0; k < params.k_samples; ++k) {
    out.sequences.push_back(detail::decode_from(model, prefix, params.max_len, params.temperature, &rng));
  }
  return out;
}

inline Samples sample(PolicyModel& model, const Tokens& x, const GenerationParams& params) {
  return sample(static_cast<const PolicyModel&>(model), x, params, model.rng());
}

/// Samples refinements of a_prev, conditioned on x <sep> a_prev. If the
/// prefix exceeds the context budget, a_prev loses tokens from the left.
inline Samples refine(const PolicyModel& model, const Tokens& x, const Tokens& a_prev,
                      const GenerationParams& params, Rng& rng) {
  if (a_prev.empty()) throw ContractError("refine needs a non-empty previous answer");
  const std::size_t fixed = x.size() + 3;  // <bos> x <sep> ... <sep>
  const std::size_t budget = model.config().context_budget;
  Tokens kept = a_prev;
  bool truncated = false;
  if (fixed + kept.size() > budget) {
    const std::size_t room = budget > fixed ? budget - fixed : 0;
    kept.erase(kept.begin(), kept.end() - static_cast<std::ptrdiff_t>(std::min(room, kept.size())));
    truncated = true;
  }
  Samples out = sample(model, refine_condition(x, kept), params, rng);
  out.truncated = truncated;
  return out;
}

inline Samples refine(PolicyModel& model, const Tokens& x, const Tokens& a_prev, const GenerationParams& params) {
  return refine(static_cast<const PolicyModel&>(model), x, a_prev, params, model.rng());
}

/// Argmax decoding; deterministic in (parameters, condition).
inline Tokens greedy(const PolicyModel& model, const Tokens& condition, std::size_t max_len = 32) {
  return detail::decode_from(model, model.prefix_ids(condition), max_len, 1.0, nullptr);
}

/// Answer tokens with trailing padding and an explicit terminator removed.
inline Tokens strip_terminator(const Tokens& a) {
  Tokens out = a;
  while (!out.empty() && out.back() == kPad) out.pop_back();
  if (!out.empty() && out.back() == kEos) out.pop_back();
  return out;
}

/// Per-token log-probabilities of `a` followed by <eos>.
inline std::vector<double> token_logprobs(const PolicyModel& model, const Tokens& condition, const Tokens& a) {
  const Tokens answer = strip_terminator(a);
  auto hidden = model.initial_state();
  for (int id : model.prefix_ids(condition)) model.step(id, hidden);
  std::vector<double> out;
  out.reserve(answer.size() + 1);
  for (const auto& tok : answer) {
    const int id = model.vocab().id(tok);
    out.push_back(log_softmax(model.logits(hidden))[static_cast<std::size_t>(id)]);
    model.step(id, hidden);
  }
  out.push_back(log_softmax(model.logits(hidden))[static_cast<std::size_t>(model.vocab().eos())]);
  return out;
}

/// Self-reward: mean per-token log-probability of `a` (its <eos> included)
/// given `condition`, in nats per token.
inline double score(const PolicyModel& model, const Tokens& condition, const Tokens& a) {
  const auto lp = token_logprobs(model, condition, a);
  double total = 0.0;
  for (double v : lp) total += v;
  return total / static_cast<double>(lp.size());
}

// ---------------------------------------------------------------------------
// Differentiable path

/// Parameters bound as tape leaves.
struct ModelVars {
  std::vector<Var> params;
  Var operator[](ParamIndex i) const { return params[i]; }
};

inline ModelVars bind(Tape& tape, const PolicyModel& model, bool track = true) {
  ModelVars vars;
  for (const auto& p : model.parameters()) {
    Tensor value = p.value;
    value.set_requires_grad(track);
    vars.params.push_back(tape.leaf(std::move(value)));
  }
  return vars;
}

/// Encoded teacher-forcing sequence; loss covers positions >= answer_start.
struct EncodedExample {
  std::vector<int> ids;  // <bos> condition <sep> answer <eos>
  std::size_t answer_start = 0;
};

inline EncodedExample encode_example(const PolicyModel& model, const Tokens& condition, const Tokens& target) {
  EncodedExample ex;
  ex.ids = model.prefix_ids(condition);
  ex.answer_start = ex.ids.size();
  for (const auto& t : strip_terminator(target)) ex.ids.push_back(model.vocab().id(t));
  ex.ids.push_back(model.vocab().eos());
  return ex;
}

/// Per-example summed answer NLL, shape [B x 1]. Examples are right-padded;
/// padded positions contribute nothing.
inline Var batch_nll(Tape& tape, const ModelVars& vars, const PolicyModel& model,
                     std::span<const EncodedExample> batch) {
  if (batch.empty()) throw ContractError("batch_nll needs at least one example");
  const std::size_t rows = batch.size();
  const std::size_t h = model.config().hidden_dim;
  std::size_t steps = 0;
  for (const auto& ex : batch) steps = std::max(steps, ex.ids.size() - 1);

  Var ones = tape.constant(Tensor(rows, 1, 1.0));
  Var bias_z = matmul(ones, vars[kBz]);
  Var bias_r = matmul(ones, vars[kBr]);
  Var bias_n = matmul(ones, vars[kBn]);
  Var bias_out = matmul(ones, vars[kBout]);
  Var hidden = tape.constant(Tensor(rows, h));
  Var total;

  std::vector<int> inputs(rows), targets(rows);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& ids = batch[r].ids;
      inputs[r] = t < ids.size() ? ids[t] : model.vocab().pad();
      targets[r] = (t + 1 < ids.size() && t + 1 >= batch[r].answer_start) ? ids[t + 1] : -1;
    }
    Var x = embedding_lookup(vars[kEmbedding], inputs);
    Var z = sigmoid(add(add(matmul(x, vars[kWz]), matmul(hidden, vars[kUz])), bias_z));
    Var r = sigmoid(add(add(matmul(x, vars[kWr]), matmul(hidden, vars[kUr])), bias_r));
    Var n = tanh(add(add(matmul(x, vars[kWn]), bias_n), mul(r, matmul(hidden, vars[kUn]))));
    hidden = add(n, mul(z, add(hidden, scale(n, -1.0))));
    if (std::all_of(targets.begin(), targets.end(), [](int v) { return v < 0; })) continue;
    Var logits = add(matmul(hidden, vars[kWout]), bias_out);
    Var step_loss = nll_rows(logits, targets);
    total = total.valid() ? add(total, step_loss) : step_loss;
  }
  if (!total.valid()) throw ContractError("batch has no answer tokens");
  return total;
}

/// -log p(target | condition) summed over target tokens and <eos>.
inline Var nll(Tape& tape, const ModelVars& vars, const PolicyModel& model, const Tokens& condition,
               const Tokens& target) {
  const EncodedExample ex = encode_example(model, condition, target);
  return sum(batch_nll(tape, vars, model, std::span<const EncodedExample>(&ex, 1)));
}

// ---------------------------------------------------------------------------
// Checkpoints: a versioned JSON document.

inline constexpr const char* kCheckpointFormat = "envisions-policy";
inline constexpr int kCheckpointVersion = 1;

inline void save(const PolicyModel& model, const std::filesystem::path& path) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& p : model.parameters()) {
    params[p.name] = {{"rows", p.value.rows()}, {"cols", p.value.cols()},
                      {"values", std::vector<double>(p.value.values().begin(), p.value.values().end())}};
  }
  const nlohmann::json doc = {
      {"format", kCheckpointFormat},
      {"version", kCheckpointVersion},
      {"vocab", model.vocab().user_tokens()},
      {"config",
       {{"embed_dim", model.config().embed_dim},
        {"hidden_dim", model.config().hidden_dim},
        {"context_budget", model.config().context_budget},
        {"init_scale", model.config().init_scale}}},
      {"rng_state", model.rng().state()},
      {"parameters", params}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << doc.dump() << '\n';
  if (!out) throw CheckpointError("write failed: " + path.string());
}

inline PolicyModel load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  try {
    if (doc.at("format") != kCheckpointFormat) throw CheckpointError("not a policy checkpoint");
    if (doc.at("version") != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + doc.at("version").dump());
    }
    ModelConfig config;
    const auto& c = doc.at("config");
    config.embed_dim = c.at("embed_dim").get<std::size_t>();
    config.hidden_dim = c.at("hidden_dim").get<std::size_t>();
    config.context_budget = c.at("context_budget").get<std::size_t>();
    config.init_scale = c.at("init_scale").get<double>();
    PolicyModel model(Vocab(doc.at("vocab").get<Tokens>()), config, 0);
    for (auto& p : model.parameters()) {
      const auto& entry = doc.at("parameters").at(p.name);
      auto values = entry.at("values").get<std::vector<double>>();
      if (entry.at("rows").get<std::size_t>() != p.value.rows() ||
          entry.at("cols").get<std::size_t>() != p.value.cols() || values.size() != p.value.size()) {
        throw CheckpointError("shape mismatch for parameter " + p.name);
      }
      std::copy(values.begin(), values.end(), p.value.values().begin());
    }
    model.rng().set_state(doc.at("rng_state").get<std::string>());
    return model;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("invalid checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace envisions
