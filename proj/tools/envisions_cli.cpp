#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "envisions/envisions.hpp"

namespace fs = std::filesystem;
using namespace envisions;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kReportsFile = "reports.jsonl";
constexpr const char* kSummaryFile = "summary.json";
constexpr const char* kCheckpointFile = "checkpoint.json";
constexpr const char* kPoolFile = "pool.jsonl";
constexpr const char* kEvalDatasetFile = "eval_dataset.jsonl";

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string env = "ExprMath";
  std::size_t n_train = 200;
  std::size_t n_held_out = 50;
  std::uint64_t seed = 0;
  std::string out;
};

int gen_data(const GenDataArgs& a) {
  const EnvKind env = parse_env_kind(a.env);
  Dataset data = generate_dataset(env, a.n_train, a.seed, Split::held_in);
  data.append(generate_dataset(env, a.n_held_out, a.seed, Split::held_out));
  write_dataset(data, a.out);
  std::cout << "wrote " << a.n_train << " held_in and " << a.n_held_out << " held_out " << a.env << " instances to "
            << (fs::path(a.out) / kDatasetFile).string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct RunArgs {
  std::string config;
  std::string out_dir;
  std::size_t workers = 0;  // 0 keeps the config value
};

int run_command(const RunArgs& a) {
  RunConfig config;
  try {
    config = load_config(a.config);
    if (a.workers > 0) config.workers = a.workers;
    config.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const Dataset data = dataset_for(config);

  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  std::ofstream reports(dir / kReportsFile, std::ios::binary);
  if (!reports) throw std::runtime_error("cannot write " + (dir / kReportsFile).string());

  const RunResult result = run(config, data, [&](const IterationReport& r) {
    reports << to_json(r).dump() << '\n' << std::flush;
    std::cout << "iter=" << r.iteration << " held_in=" << format_number(r.held_in_rate)
              << " held_out=" << format_number(r.held_out_rate) << " new_traj=" << r.new_trajectory_count << std::endl;
  });
  if (!reports) throw std::runtime_error("write failed: " + (dir / kReportsFile).string());

  save(result.model, dir / kCheckpointFile);
  persist(result.pool, dir / kPoolFile);
  std::vector<TaskInstance> eval_tasks = result.eval_held_in;
  eval_tasks.insert(eval_tasks.end(), result.eval_held_out.begin(), result.eval_held_out.end());
  write_tasks(eval_tasks, dir / kEvalDatasetFile);

  const std::string base = analysis_basename(config.label(), config.seed);
  export_series(result.series, dir / (base + ".csv"), ExportFormat::csv);
  export_series(result.series, dir / (base + ".json"), ExportFormat::json);

  const IterationReport& last = result.reports.back();
  nlohmann::json summary{{"label", config.label()},
                         {"seed", config.seed},
                         {"config", to_json(config)},
                         {"iterations", result.reports.size() - 1},
                         {"final_held_in_rate", last.held_in_rate},
                         {"final_held_out_rate", last.held_out_rate},
                         {"analysis", base}};
  write_text(dir / kSummaryFile, summary.dump(2) + "\n");
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string split = "held_in";
  bool with_refine = false;
  std::size_t max_len = RunConfig{}.max_len;
};

int eval_command(const EvalArgs& a) {
  const Split split = parse_split(a.split);
  if (!fs::exists(a.checkpoint)) throw std::runtime_error("missing checkpoint " + a.checkpoint);
  if (!fs::exists(a.dataset)) throw std::runtime_error("missing dataset " + a.dataset);
  const PolicyModel model = load(a.checkpoint);
  const std::vector<TaskInstance> tasks = read_dataset(a.dataset).split(split);
  if (tasks.empty()) throw std::runtime_error("dataset has no " + a.split + " instances");
  const EnvKind env = tasks.front().env;
  for (const auto& t : tasks) {
    if (t.env != env) throw std::runtime_error("dataset mixes environments");
  }
  std::cout << format_number(evaluate(model, env, tasks, a.max_len, a.with_refine).rate) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct RunInfo {
  std::string label;
  std::uint64_t seed = 0;
  AnalysisSeries series;
};

RunInfo read_run(const fs::path& dir) {
  const nlohmann::json summary = read_json(dir / kSummaryFile);
  RunInfo info;
  try {
    info.label = summary.at("label").get<std::string>();
    info.seed = summary.at("seed").get<std::uint64_t>();
    info.series = series_from_json(read_json(dir / (summary.at("analysis").get<std::string>() + ".json")));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / kSummaryFile).string() + ": " + e.what());
  }
  return info;
}

struct AnalyzeArgs {
  std::string run_dir;
  std::string format = "csv";
  std::string out;
};

int analyze(const AnalyzeArgs& a) {
  const RunInfo info = read_run(a.run_dir);
  const ExportFormat format = a.format == "csv" ? ExportFormat::csv : ExportFormat::json;
  if (a.out.empty()) {
    std::cout << (format == ExportFormat::csv ? to_csv(info.series) : to_json(info.series).dump(2) + "\n");
  } else {
    export_series(info.series, a.out, format);
  }
  return kOk;
}

struct CompareArgs {
  std::vector<std::string> runs;
  std::string out;
};

int compare(const CompareArgs& a) {
  if (a.runs.size() < 2) throw UsageError("compare needs at least two run directories");
  std::vector<RunInfo> infos;
  std::set<std::string> prefixes;
  std::size_t rows = 0;
  for (const auto& dir : a.runs) {
    infos.push_back(read_run(dir));
    const std::string prefix = infos.back().label + "_" + std::to_string(infos.back().seed);
    if (!prefixes.insert(prefix).second) throw UsageError("two runs share the column prefix " + prefix);
    rows = std::max(rows, infos.back().series.records.size());
  }
  for (std::size_t i = 0; i < infos.size(); ++i) {
    if (infos[i].series.records.size() != rows) {
      std::cerr << "warning: " << a.runs[i] << " has " << infos[i].series.records.size() << " rows, expected " << rows
                << "; padding with nulls\n";
    }
  }

  std::ostringstream csv;
  csv << "iteration";
  for (const auto& info : infos) {
    const std::string p = info.label + "_" + std::to_string(info.seed);
    csv << ',' << p << "_held_in," << p << "_held_out," << p << "_delta_logp," << p << "_diversity";
  }
  csv << '\n';
  for (std::size_t row = 0; row < rows; ++row) {
    csv << row;
    for (const auto& info : infos) {
      if (row < info.series.records.size()) {
        const AnalysisRecord& r = info.series.records[row];
        csv << ',' << format_number(r.held_in_rate) << ',' << format_number(r.held_out_rate) << ','
            << format_number(r.delta_logp) << ',' << r.diversity;
      } else {
        csv << ",,,,";
      }
    }
    csv << '\n';
  }
  write_text(a.out, csv.str());
  std::cout << "merged " << infos.size() << " runs into " << a.out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Environment-guided self-training toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset with witness solutions");
  gen_cmd->add_option("--env", gen.env, "ExprMath, LogicRules or GridAgent")
      ->check(CLI::IsMember({"ExprMath", "LogicRules", "GridAgent"}))
      ->capture_default_str();
  gen_cmd->add_option("--n-train", gen.n_train, "Held-in instances")->check(CLI::PositiveNumber)->capture_default_str();
  gen_cmd->add_option("--n-held-out", gen.n_held_out, "Held-out instances")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  RunArgs run_args;
  auto* run_cmd = app.add_subcommand("run", "Run a self-training method from a config file");
  run_cmd->add_option("--config", run_args.config, "RunConfig JSON")->required();
  run_cmd->add_option("--out-dir", run_args.out_dir, "Run directory")->required();
  run_cmd->add_option("--workers", run_args.workers, "Exploration workers (overrides the config)")
      ->check(CLI::PositiveNumber);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Greedy solve rate of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Policy checkpoint")->required();
  eval_cmd->add_option("--dataset", eval_args.dataset, "Dataset directory or JSONL file")->required();
  eval_cmd->add_option("--split", eval_args.split, "held_in or held_out")
      ->check(CLI::IsMember({"held_in", "held_out"}))
      ->capture_default_str();
  eval_cmd->add_flag("--with-refine", eval_args.with_refine, "Retry failures once with self-refinement");
  eval_cmd->add_option("--max-len", eval_args.max_len, "Decoding length limit")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "Export a run's analysis series");
  analyze_cmd->add_option("--run-dir", analyze_args.run_dir, "Run directory")->required();
  analyze_cmd->add_option("--format", analyze_args.format, "csv or json")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();
  analyze_cmd->add_option("--out", analyze_args.out, "Output file (stdout if omitted)");

  CompareArgs compare_args;
  auto* compare_cmd = app.add_subcommand("compare", "Merge several runs' curves into one CSV");
  compare_cmd->add_option("--runs", compare_args.runs, "Run directories")->required();
  compare_cmd->add_option("--out", compare_args.out, "Merged CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*run_cmd) return run_command(run_args);
    if (*eval_cmd) return eval_command(eval_args);
    if (*analyze_cmd) return analyze(analyze_args);
    if (*compare_cmd) return compare(compare_args);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
