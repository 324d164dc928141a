#include <gtest/gtest.h>

#include <cmath>

#include "envisions/envisions.hpp"
#include "oracles.hpp"

namespace envisions {
namespace {

Trajectory entry(const std::string& a, int b, double r, std::size_t iteration = 1) {
  Trajectory t;
  t.task_id = "k";
  t.x = {"x"};
  t.y = "1";
  t.a = {a};
  t.b = b;
  t.r = r;
  t.iteration = iteration;
  t.status = b ? ExecStatus::Ok : ExecStatus::RuntimeError;
  return t;
}

RankedSets sets_of(std::size_t positives, std::size_t negatives) {
  RankedSets s;
  for (std::size_t i = 0; i < positives; ++i) s.positives.push_back(entry("p" + std::to_string(i + 1), 1, -0.01 * (i + 1)));
  for (std::size_t i = 0; i < negatives; ++i) s.negatives.push_back(entry("n" + std::to_string(i + 1), 0, -0.01 * (i + 1)));
  return s;
}

std::vector<std::string> answers(const std::vector<Trajectory>& ts) {
  std::vector<std::string> out;
  for (const auto& t : ts) out.push_back(t.a.front());
  return out;
}

TEST(SelectU1, Examples) {
  EXPECT_EQ(answers(select_U1(sets_of(3, 0), 10)), (std::vector<std::string>{"p1", "p2", "p3"}));
  const auto top = select_U1(sets_of(12, 0), 10);
  ASSERT_EQ(top.size(), 10u);
  EXPECT_EQ(top.front().a.front(), "p1");
  EXPECT_EQ(top.back().a.front(), "p10");
  EXPECT_TRUE(select_U1(sets_of(0, 4), 10).empty());
}

TEST(SelectU2, Examples) {
  const auto s = sets_of(12, 5);
  const auto pairs = select_U2(s, 10, 2, select_U1(s, 10).size());
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].first.a.front(), "p11");
  EXPECT_EQ(pairs[0].second.a.front(), "n1");
  EXPECT_EQ(pairs[1].first.a.front(), "p12");
  EXPECT_EQ(pairs[1].second.a.front(), "n2");
  EXPECT_TRUE(select_U2(sets_of(10, 5), 10, 2, 10).empty());
  EXPECT_EQ(select_U2(sets_of(15, 1), 10, 2, 10).size(), 1u);
  EXPECT_TRUE(select_U2(sets_of(3, 5), 10, 2, 3).empty());
}

TEST(Selection, MatchesBruteForceOnRandomPools) {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t N1 = 1 + rng.below(12), N2 = rng.below(4);
    CandidatePool pool(1000);
    std::map<std::string, oracle::Candidate> kept;
    const std::size_t n = rng.below(40);
    for (std::size_t i = 0; i < n; ++i) {
      const std::string a = "s" + std::to_string(rng.below(35));
      const int b = (a.back() - '0') % 2;
      const double r = -0.5 * static_cast<double>(rng.below(6));
      const std::size_t it = rng.below(3);
      Trajectory t = entry(a, b, r, it);
      if (pool.insert(t)) kept[a] = {a, b, r, it};
    }
    std::vector<oracle::Candidate> all;
    for (const auto& [_, c] : kept) all.push_back(c);
    const auto ref = oracle::reference_selection(all, N1, N2);
    SelectOptions opt;
    opt.N1 = N1;
    opt.N2 = N2;
    const TrainingSets got = build_training_sets(pool, opt);
    ASSERT_EQ(got.U1.size(), ref.u1.size()) << "trial " << trial;
    for (std::size_t i = 0; i < ref.u1.size(); ++i) EXPECT_EQ(join_tokens(got.U1[i].positive), ref.u1[i]);
    ASSERT_EQ(got.U2.size(), ref.u2.size()) << "trial " << trial;
    for (std::size_t i = 0; i < ref.u2.size(); ++i) {
      EXPECT_EQ(join_tokens(got.U2[i].positive), ref.u2[i].first);
      EXPECT_EQ(join_tokens(got.U2[i].negative), ref.u2[i].second);
    }
  }
}

TEST(Selection, RandomRankIsSeededSubset) {
  CandidatePool pool;
  for (int i = 0; i < 25; ++i) pool.insert(entry("p" + std::to_string(i), 1, -0.01 * i));
  SelectOptions opt;
  opt.random_rank = true;
  opt.seed = 5;
  const TrainingSets a = build_training_sets(pool, opt);
  EXPECT_EQ(a, build_training_sets(pool, opt));
  ASSERT_EQ(a.U1.size(), 10u);
  std::set<Tokens> distinct;
  for (const auto& e : a.U1) distinct.insert(e.positive);
  EXPECT_EQ(distinct.size(), 10u);
  opt.random_rank = false;
  EXPECT_NE(a, build_training_sets(pool, opt));
  opt.random_rank = true;
  opt.seed = 6;
  EXPECT_NE(a, build_training_sets(pool, opt));
}

TEST(Selection, InvariantsOnBuiltSets) {
  Rng rng(3);
  CandidatePool pool;
  for (int i = 0; i < 300; ++i) {
    Trajectory t = entry("a" + std::to_string(rng.below(80)), 0, -rng.uniform(0, 2));
    t.task_id = "task" + std::to_string(rng.below(5));
    t.b = t.a.front().size() % 2;
    pool.insert(t);
  }
  SelectOptions opt;
  opt.N1 = 3;
  const TrainingSets s = build_training_sets(pool, opt);
  for (const auto& u : s.U1) {
    bool found = false;
    for (const auto& t : pool.tasks().at(u.task_id)) found |= t.a == u.positive && t.b == 1;
    EXPECT_TRUE(found);
  }
  for (const auto& u : s.U2) {
    for (const auto& t : pool.tasks().at(u.task_id)) {
      if (t.a == u.positive) {
        EXPECT_EQ(t.b, 1);
      }
      if (t.a == u.negative) {
        EXPECT_EQ(t.b, 0);
      }
    }
  }
  EXPECT_FALSE(s.U2.empty());
}

// -- training ---------------------------------------------------------------

PolicyModel grad_model(std::uint64_t seed) {
  ModelConfig c;
  c.embed_dim = 8;
  c.hidden_dim = 12;
  c.init_scale = 0.5;
  return PolicyModel(oracle::small_vocab(16), c, seed);
}

TEST(Gradients, L1L2AndDpoMatchFiniteDifferences) {
  PolicyModel m = grad_model(41);
  ASSERT_EQ(m.vocab().size(), 16u);
  const Tokens x{"t0", "t4", "t7"}, pos{"t2", "t3"}, neg{"t9", "t3", "t1"};
  std::string where;
  EXPECT_LE(oracle::max_param_grad_error(m, [&](Tape& t, const ModelVars& v) { return nll(t, v, m, x, pos); }, 1e-5,
                                         &where),
            1e-4)
      << "L1 " << where;
  EXPECT_LE(oracle::max_param_grad_error(
                m, [&](Tape& t, const ModelVars& v) { return nll(t, v, m, refine_condition(x, neg), pos); }, 1e-5,
                &where),
            1e-4)
      << "L2 " << where;
  const PolicyModel ref = grad_model(42);
  const DpoPair pair{x, pos, neg, sequence_logprob(ref, x, pos), sequence_logprob(ref, x, neg)};
  EXPECT_LE(oracle::max_param_grad_error(m, [&](Tape& t, const ModelVars& v) { return dpo_loss(t, v, m, pair, 0.1); },
                                         1e-5, &where),
            1e-4)
      << "DPO " << where;
}

TEST(Dpo, EqualPolicyGivesLn2) {
  PolicyModel m = grad_model(5);
  const Tokens x{"t1"}, pos{"t2"}, neg{"t3", "t4"};
  const DpoPair pair{x, pos, neg, sequence_logprob(m, x, pos), sequence_logprob(m, x, neg)};
  Tape tape;
  EXPECT_NEAR(dpo_loss(tape, bind(tape, m), m, pair, 0.1).value().item(), std::log(2.0), 1e-12);
  EXPECT_DOUBLE_EQ(RunConfig{}.dpo_beta, 0.1);
}

TEST(Dpo, TrainingRaisesPreferenceMargin) {
  PolicyModel m = grad_model(6);
  const PolicyModel ref = m;
  std::vector<U2Entry> pairs{{"k", {"t1"}, {"t2", "t3"}, {"t5", "t6"}}};
  TrainOptions opt;
  opt.epochs = 40;
  opt.lr = 0.5;
  const double before = sequence_logprob(m, {"t1"}, {"t2", "t3"}) - sequence_logprob(m, {"t1"}, {"t5", "t6"});
  const LossReport r = train_dpo(m, ref, pairs, opt, 0.1);
  const double after = sequence_logprob(m, {"t1"}, {"t2", "t3"}) - sequence_logprob(m, {"t1"}, {"t5", "t6"});
  EXPECT_NEAR(r.first_batch_loss, std::log(2.0), 1e-12);
  EXPECT_GT(after, before);
  EXPECT_LT(r.L2, std::log(2.0));
}

TEST(Train, MemorizesSingleU1Example) {
  PolicyModel m(vocab_for(EnvKind::ExprMath), {16, 32, 128, 0.08}, 3);
  TrainingSets sets;
  const Tokens x = split_tokens("a = 3 ; b = 4 ; a plus b");
  sets.U1.push_back({"k", x, split_tokens("a + b")});
  TrainOptions opt;
  opt.epochs = 200;
  opt.lr = 0.5;
  opt.reinit_seed = 9;
  train_iteration(m, sets, opt);
  EXPECT_EQ(greedy(m, x, 16), split_tokens("a + b"));
}

TEST(Train, MemorizesSingleU2Pair) {
  PolicyModel m(vocab_for(EnvKind::ExprMath), {16, 32, 128, 0.08}, 3);
  TrainingSets sets;
  const Tokens x = split_tokens("a = 3 ; b = 4 ; a times b");
  sets.U2.push_back({"k", x, split_tokens("a * b"), split_tokens("a + b")});
  TrainOptions opt;
  opt.epochs = 200;
  opt.lr = 0.5;
  const LossReport r = train_iteration(m, sets, opt);
  EXPECT_EQ(greedy(m, refine_condition(x, split_tokens("a + b")), 16), split_tokens("a * b"));
  EXPECT_EQ(r.L1, 0.0);
  EXPECT_GT(r.L2, 0.0);
  EXPECT_DOUBLE_EQ(r.total, r.L1 + r.L2);
}

TEST(Train, FirstBatchLossNearUniform) {
  const Vocab vocab = vocab_for(EnvKind::ExprMath);
  PolicyModel m(vocab, {}, 1);
  TrainingSets sets;
  sets.U1.push_back({"k", split_tokens("a = 1 ;"), split_tokens("a + 1")});
  sets.U1.push_back({"k", split_tokens("b = 2 ;"), split_tokens("b * 2 - 1")});
  TrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 8;
  opt.reinit_seed = 1;
  const LossReport r = train_iteration(m, sets, opt);
  ASSERT_EQ(r.first_batch_tokens, 4u + 6u);
  const double expected = static_cast<double>(r.first_batch_tokens) * std::log(static_cast<double>(vocab.size()));
  EXPECT_NEAR(r.first_batch_loss, expected, 0.02 * expected);
}

TEST(Train, ContractAndNonFiniteAbort) {
  PolicyModel m = grad_model(1);
  EXPECT_THROW(train_iteration(m, TrainingSets{}, TrainOptions{}), ContractError);
  TrainingSets sets;
  sets.U1.push_back({"k", {"t0"}, {"t1"}});
  m.parameters()[kWout].value[0] = std::nan("");
  EXPECT_THROW(train_iteration(m, sets, TrainOptions{}), TrainingError);
}

TEST(Train, DeterministicUnderSeeds) {
  TrainingSets sets;
  sets.U1.push_back({"k", {"t0"}, {"t1", "t2"}});
  sets.U1.push_back({"k", {"t3"}, {"t4"}});
  sets.U2.push_back({"k", {"t3"}, {"t4"}, {"t5"}});
  TrainOptions opt;
  opt.epochs = 5;
  opt.batch_size = 2;
  opt.reinit_seed = 8;
  opt.shuffle_seed = 4;
  PolicyModel a = grad_model(1), b = grad_model(2);
  train_iteration(a, sets, opt);
  train_iteration(b, sets, opt);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
}

// -- exploration ------------------------------------------------------------

TEST(Explore, PairsPerTaskAndWorkerInvariance) {
  const Dataset d = generate_dataset(EnvKind::ExprMath, 7, 1, Split::held_in);
  PolicyModel m(vocab_for(EnvKind::ExprMath), {8, 12, 128, 0.3}, 2);
  ExploreOptions opt;
  opt.generation = {1.0, 12, 5};
  const auto one = explore_phase(m, d.tasks, opt, 1, 77);
  ASSERT_EQ(one.size(), 35u);
  for (const auto& p : one) {
    ASSERT_TRUE(p.refined.has_value());
    EXPECT_EQ(p.explored.source, Source::explore);
    EXPECT_EQ(p.refined->source, Source::refine);
    EXPECT_EQ(p.explored.task_id, p.refined->task_id);
    EXPECT_LE(p.explored.r, 0.0);
  }
  opt.workers = 3;
  const auto three = explore_phase(m, d.tasks, opt, 1, 77);
  ASSERT_EQ(three.size(), one.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(three[i].explored, one[i].explored);
    EXPECT_EQ(three[i].refined, one[i].refined);
  }
  opt.refine = false;
  for (const auto& p : explore_phase(m, d.tasks, opt, 1, 77)) EXPECT_FALSE(p.refined.has_value());
}

TEST(Explore, RefinedRewardUsesRefineCondition) {
  const Dataset d = generate_dataset(EnvKind::ExprMath, 1, 2, Split::held_in);
  PolicyModel m(vocab_for(EnvKind::ExprMath), {8, 12, 128, 0.3}, 2);
  ExploreOptions opt;
  opt.generation = {1.0, 10, 3};
  for (const auto& p : explore_phase(m, d.tasks, opt, 1, 5)) {
    EXPECT_DOUBLE_EQ(p.explored.r, score(m, d.tasks[0].x, p.explored.a));
    EXPECT_DOUBLE_EQ(p.refined->r, score(m, refine_condition(d.tasks[0].x, p.explored.a), p.refined->a));
  }
}

TEST(Explore, UnparseableSamplesAreParseErrorNegatives) {
  const Dataset d = generate_dataset(EnvKind::ExprMath, 1, 3, Split::held_in);
  PolicyModel m(vocab_for(EnvKind::ExprMath), {8, 12, 128, 0.08}, 2);
  // Bias the output layer so every sample is "+ + + ...".
  Tensor& bias = m.parameters()[kBout].value;
  bias[static_cast<std::size_t>(m.vocab().id("+"))] = 50.0;
  ExploreOptions opt;
  opt.generation = {1.0, 6, 5};
  opt.refine = false;
  const auto pairs = explore_phase(m, d.tasks, opt, 1, 0);
  ASSERT_EQ(pairs.size(), 5u);
  for (const auto& p : pairs) {
    EXPECT_EQ(p.explored.status, ExecStatus::ParseError);
    EXPECT_EQ(p.explored.b, 0);
  }
}

// -- the loop ---------------------------------------------------------------

RunConfig tiny_config() {
  RunConfig c;
  c.n_held_in = 30;
  c.n_held_out = 8;
  c.warmup_tasks = 8;
  c.warmup_epochs = 60;
  c.epochs_per_iter = 10;
  c.lr = 0.5;
  c.embed_dim = 8;
  c.hidden_dim = 16;
  c.iterations = 2;
  c.max_len = 12;
  return c;
}

std::string report_stream(const RunResult& r) {
  std::string out;
  for (const auto& rep : r.reports) out += to_json(rep).dump() + "\n";
  return out;
}

TEST(Run, DeterministicAndWorkerInvariant) {
  const RunConfig c = tiny_config();
  const Dataset d = dataset_for(c);
  const RunResult a = run(c, d);
  const RunResult b = run(c, d);
  EXPECT_EQ(report_stream(a), report_stream(b));
  EXPECT_EQ(a.series, b.series);
  EXPECT_EQ(a.pool, b.pool);
  RunConfig parallel = c;
  parallel.workers = 3;
  const RunResult p = run(parallel, d);
  EXPECT_EQ(report_stream(a), report_stream(p));
  EXPECT_EQ(a.pool, p.pool);
}

TEST(Run, ReportShapeAndWarmupRow) {
  const RunConfig c = tiny_config();
  std::vector<std::size_t> seen;
  const RunResult r = run(c, dataset_for(c), [&](const IterationReport& rep) { seen.push_back(rep.iteration); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2}));
  ASSERT_EQ(r.series.records.size(), c.iterations + 1);
  EXPECT_FALSE(r.series.records[0].delta_logp.has_value());
  EXPECT_FALSE(r.series.records[0].exploratory_ability.has_value());
  EXPECT_EQ(r.eval_held_in.size(), c.n_held_in - c.warmup_tasks);
  EXPECT_EQ(r.eval_held_out.size(), c.n_held_out);
  for (const auto& rec : r.series.records) {
    if (rec.exploratory_ability) {
      EXPECT_GE(*rec.exploratory_ability, 0.0);
      EXPECT_LE(*rec.exploratory_ability, 1.0);
    }
    if (rec.stability) {
      EXPECT_GE(*rec.stability, 0.0);
      EXPECT_LE(*rec.stability, 1.0);
    }
  }
  for (std::size_t i = 1; i < r.series.records.size(); ++i) {
    EXPECT_GE(r.series.records[i].diversity, r.series.records[i - 1].diversity);
  }
}

// iterations = 1 against the phases composed by hand.
TEST(Run, SingleIterationEqualsHandComposition) {
  RunConfig c = tiny_config();
  c.iterations = 1;
  const Dataset d = dataset_for(c);
  const RunResult r = run(c, d);

  const RunData split = partition(c, d);
  PolicyModel m(vocab_for(c.env), {c.embed_dim, c.hidden_dim}, c.seed);
  TrainingSets warm;
  for (const auto& t : split.warmup) warm.U1.push_back({t.id, t.x, d.witnesses.at(t.id)});
  TrainOptions t0;
  t0.epochs = c.warmup_epochs;
  t0.lr = c.lr;
  t0.clip = c.clip;
  t0.batch_size = c.batch_size;
  t0.shuffle_seed = derive_seed(c.seed, 0x7a, 0);
  t0.reinit_seed = derive_seed(c.seed, 0x1a1, 0);
  train_iteration(m, warm, t0);
  CandidatePool pool(c.pool_cap);
  for (const auto& t : split.warmup) {
    const Tokens& w = d.witnesses.at(t.id);
    const auto res = execute(c.env, t, w);
    pool.insert(Trajectory{t.id, t.x, t.y, w, res.b, score(m, t.x, w), Source::explore, 0, res.status});
  }
  ExploreOptions e;
  e.env = c.env;
  e.generation = {c.temperature, c.max_len, c.K};
  const auto pairs = explore_phase(m, split.explore, e, 1, c.seed);
  pool.update(filter_all(pairs));
  SelectOptions s;
  s.N1 = c.N1;
  s.N2 = c.N2;
  s.seed = derive_seed(c.seed, 0x5e, 1);
  const TrainingSets sets = build_training_sets(pool, s);
  TrainOptions t1 = t0;
  t1.epochs = c.epochs_per_iter;
  t1.shuffle_seed = derive_seed(c.seed, 0x7a, 1);
  t1.reinit_seed = derive_seed(c.seed, 0x1a1, 1);
  train_iteration(m, sets, t1);

  EXPECT_EQ(r.pool, pool);
  EXPECT_EQ(r.training_sets.at(1), sets);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(r.model.parameters()[i].value, m.parameters()[i].value);
  }
  EXPECT_EQ(r.reports.back().held_in_rate, evaluate(m, c.env, split.eval_held_in, c.max_len).rate);
  EXPECT_EQ(r.reports.back().held_out_rate, evaluate(m, c.env, split.eval_held_out, c.max_len).rate);
}

TEST(Run, StarEnvMatchesAblationLattice) {
  RunConfig star = tiny_config();
  star.method = Method::star_env;
  RunConfig lattice = tiny_config();
  lattice.ablations = {Ablation::no_self_refine, Ablation::no_L2};
  const Dataset d = dataset_for(star);
  const RunResult a = run_star_env(star, d);
  const RunResult b = run(lattice, d);
  EXPECT_EQ(a.training_sets, b.training_sets);
  EXPECT_EQ(a.pool, b.pool);
  for (const auto& sets : a.training_sets) EXPECT_TRUE(sets.U2.empty());
  for (const auto& [_, entries] : a.pool.tasks()) {
    for (const auto& t : entries) EXPECT_EQ(t.source, Source::explore);
  }
  EXPECT_THROW(run_star_env(lattice, d), ConfigError);
}

TEST(Run, NoCandidatePoolKeepsOnlyCurrentIteration) {
  RunConfig c = tiny_config();
  c.ablations = {Ablation::no_candidate_pool};
  const RunResult r = run(c, dataset_for(c));
  for (const auto& [_, entries] : r.pool.tasks()) {
    for (const auto& t : entries) EXPECT_EQ(t.iteration, c.iterations);
  }
}

TEST(Run, SftDpoTrainsContinually) {
  RunConfig c = tiny_config();
  c.method = Method::sft_dpo;
  const Dataset d = dataset_for(c);
  const RunResult r = run_sft_dpo(c, d);
  EXPECT_EQ(r.reports.size(), c.iterations + 1);
  std::size_t pairs = 0;
  for (const auto& rep : r.reports) {
    EXPECT_TRUE(std::isfinite(rep.losses.total));
    pairs += rep.u2_size;
  }
  // Without preference pairs the DPO stage is a no-op, so the run must equal
  // continual SFT.
  ASSERT_EQ(pairs, 0u);
  RunConfig sft = tiny_config();
  sft.train_mode = TrainMode::continual;
  sft.ablations = {Ablation::no_L2};
  const RunResult s = run(sft, d);
  for (std::size_t i = 0; i < s.model.parameters().size(); ++i) {
    EXPECT_EQ(r.model.parameters()[i].value, s.model.parameters()[i].value);
  }
  RunConfig scratch = sft;
  scratch.train_mode = TrainMode::scratch;
  EXPECT_NE(run(scratch, d).model.parameters()[kWout].value, s.model.parameters()[kWout].value);
  EXPECT_THROW(run_sft_dpo(tiny_config(), d), ConfigError);
}

TEST(Run, ProbeFrozenAfterFirstIteration) {
  RunConfig c = tiny_config();
  c.iterations = 3;
  const RunResult r = run(c, dataset_for(c));
  RunConfig one = c;
  one.iterations = 1;
  EXPECT_EQ(run(one, dataset_for(one)).probe.size(), r.probe.size());
  for (std::size_t i = 1; i < r.series.records.size(); ++i) {
    EXPECT_EQ(r.series.records[i].delta_logp.has_value(), !r.probe.empty());
  }
}

// -- configuration ----------------------------------------------------------

nlohmann::json minimal_config() {
  return {{"env", "ExprMath"}, {"method", "envisions"}, {"K", 5},          {"N1", 10},
          {"N2", 2},           {"iterations", 5},       {"train_mode", "scratch"},
          {"ablations", nlohmann::json::array()},       {"epochs_per_iter", 30},
          {"lr", 0.1},         {"dpo_beta", 0.1},       {"seed", 0}};
}

TEST(Config, MissingKeyNamed) {
  auto j = minimal_config();
  j.erase("K");
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'K'"), std::string::npos) << e.what();
  }
}

TEST(Config, AblationNamesAndValidation) {
  auto j = minimal_config();
  j["ablations"] = {"no_self_refine", "no_self_reward", "no_candidate_pool", "no_L2"};
  const RunConfig c = config_from_json(j);
  EXPECT_EQ(c.ablations.size(), 4u);
  EXPECT_EQ(c.label(), "envisions+no_self_refine+no_self_reward+no_candidate_pool+no_L2");
  j["ablations"] = {"no_l2"};
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = minimal_config();
  j["bogus"] = 1;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = minimal_config();
  j["method"] = "star_env";
  j["ablations"] = {"no_L2"};
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = minimal_config();
  j["K"] = "five";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = minimal_config();
  j["lr"] = 0;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c = tiny_config();
  c.method = Method::envisions;
  c.ablations = {Ablation::no_L2};
  c.train_mode = TrainMode::continual;
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

}  // namespace
}  // namespace envisions
