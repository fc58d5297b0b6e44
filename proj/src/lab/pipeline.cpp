#include <algorithm>
#include <chrono>
#include <functional>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "bard/lab.hpp"

namespace bard::lab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<taskgen::Task> task_suite(const ExperimentConfig& c, std::string_view stream, int count) {
  std::vector<taskgen::Task> out;
  const int span = c.tasks.max_difficulty - c.tasks.min_difficulty + 1;
  for (int i = 0; i < count; ++i)
    out.push_back(taskgen::generate_task(derive_seed(c.seed, stream, static_cast<std::uint64_t>(i)),
                                         c.tasks.min_difficulty + i % span, c.tasks.generator));
  return out;
}

std::vector<budgetpress::TracedTask> with_traces(const std::vector<taskgen::Task>& tasks) {
  std::vector<budgetpress::TracedTask> out;
  for (const auto& t : tasks) out.push_back({t, taskgen::teacher_trace(t, taskgen::Verbosity::High)});
  return out;
}

json stage_json(const std::string& stage, const std::string& upstream, json body) {
  body["stage"] = stage;
  body["upstream"] = upstream;
  return body;
}

}  // namespace

TaskSuites generate_suites(const ExperimentConfig& c) {
  TaskSuites s;
  s.train = with_traces(task_suite(c, "lab.tasks.train", c.tasks.train_tasks));
  s.heldout = task_suite(c, "lab.tasks.heldout", c.tasks.heldout_tasks);
  s.eval = task_suite(c, "lab.tasks.eval", c.tasks.eval_tasks);
  return s;
}

budgetpress::Dataset build_sft_dataset(const ExperimentConfig& c, std::span<const budgetpress::TracedTask> train) {
  const int bucket = c.compress.histogram_bucket;
  auto standard = budgetpress::build_unconditioned_set(train, bucket);
  budgetpress::Dataset out;
  const std::uint64_t seed = stage_seed(c, "lab.compress");
  int per_trace = 0;
  if (!c.pipeline.compress) {
    out.records = std::move(standard.records);
  } else {
    auto aware = c.compress.k == 1 ? budgetpress::build_single_budget_set(train, seed, c.compress.policy, bucket)
                                   : budgetpress::build_contrastive_set(train, c.compress.k, seed, c.compress.policy, bucket);
    out.records = sft::mix_records(aware.records, standard.records, c.sft.mix_ratio, stage_seed(c, "lab.mix"));
    per_trace = c.compress.k;
  }
  if (!c.pipeline.budget_tokens)
    for (auto& r : out.records) r.budget.reset();
  out.manifest = budgetpress::make_manifest(out.records, per_trace, seed, bucket);
  return out;
}

double budget_length_r(const evalkit::EvalReport& report) {
  std::vector<double> b, l;
  for (const auto& s : report.samples) {
    if (!s.budget) continue;
    b.push_back(*s.budget);
    l.push_back(s.think_len);
  }
  return evalkit::pearson(b, l);
}

ProbeResult probe_sweep(const nanolm::ParameterStore& params, std::span<const taskgen::Task> tasks,
                        const EvalConfig& eval, bool budget_in_prompt) {
  evalkit::EvalOptions opts;
  opts.w = eval.w;
  opts.budget_scale = eval.budget_scale;
  opts.budget_in_prompt = budget_in_prompt;
  ProbeResult p;
  p.in_range = evalkit::run_eval(params, tasks, eval.probe_in_range, opts);
  p.out_of_range = evalkit::run_eval(params, tasks, eval.probe_out_of_range, opts);
  p.r_in_range = budget_length_r(p.in_range);
  p.r_out_of_range = budget_length_r(p.out_of_range);
  return p;
}

json to_json(const ProbeResult& p) {
  return {{"r_in_range", p.r_in_range},
          {"r_out_of_range", p.r_out_of_range},
          {"in_range", evalkit::to_json(p.in_range, true)},
          {"out_of_range", evalkit::to_json(p.out_of_range, true)}};
}

json to_json(const RunLedger& l) {
  json stages = json::object();
  json manifests = json::object();
  json metrics = json::object();
  json checkpoints = json::object();
  for (const auto& [name, rec] : l.stages) {
    stages[name] = {{"stage_hash", rec.stage_hash}, {"artifacts", rec.artifacts}, {"wall_seconds", rec.wall_seconds}};
    for (const auto& [key, path] : rec.artifacts) {
      const std::string id = name + ":" + key;
      if (key.find("manifest") != std::string::npos) manifests[id] = path;
      else if (path.ends_with(".ckpt")) checkpoints[id] = path;
      else if (path.ends_with(".csv") || path.ends_with("report.json") || path.ends_with("probe.json") ||
               path.ends_with("behavior.json"))
        metrics[id] = path;
    }
  }
  return {{"run_id", l.run_id},       {"preset", l.preset},       {"config_hash", l.config_hash},
          {"seed", l.seed},           {"config", "config.json"},  {"stages", stages},
          {"manifests", manifests},   {"metrics", metrics},       {"checkpoints", checkpoints}};
}

RunLedger ledger_from_json(const json& j) {
  RunLedger l;
  l.run_id = j.at("run_id").get<std::string>();
  l.preset = j.at("preset").get<std::string>();
  l.config_hash = j.at("config_hash").get<std::string>();
  l.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& [name, s] : j.at("stages").items()) {
    StageRecord r;
    r.stage_hash = s.at("stage_hash").get<std::string>();
    r.artifacts = s.at("artifacts").get<std::map<std::string, std::string>>();
    r.wall_seconds = s.at("wall_seconds").get<double>();
    l.stages[name] = std::move(r);
  }
  return l;
}

RunLedger load_ledger(const fs::path& run_dir) {
  const auto path = run_dir / "ledger.json";
  if (!fs::exists(path)) throw std::runtime_error("no ledger at " + path.string());
  return ledger_from_json(json::parse(read_text(path)));
}

evalkit::EvalReport load_eval_report(const fs::path& run_dir, const std::string& which) {
  const auto ledger = load_ledger(run_dir);
  if (!ledger.complete("eval")) throw std::runtime_error("run " + run_dir.string() + " has no eval stage");
  const auto& artifacts = ledger.stages.at("eval").artifacts;
  const auto it = artifacts.find(which + "_report");
  if (it == artifacts.end()) throw std::invalid_argument("run has no " + which + " eval report");
  return evalkit::report_from_json(json::parse(read_text(run_dir / it->second)));
}

namespace {

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& c, const fs::path& root, const RunOptions& options)
      : c_(c), root_(root), options_(options) {
    c_.validate();
    fs::create_directories(root_);
    if (fs::exists(root_ / "ledger.json")) ledger_ = load_ledger(root_);
    ledger_.config_hash = config_hash(c_);
    ledger_.run_id = fmt::format("{}-{}", c_.preset, ledger_.config_hash.substr(0, 12));
    ledger_.preset = c_.preset;
    ledger_.seed = c_.seed;
    write_text(root_ / "config.json", to_json(c_).dump(2) + "\n");
    if (options_.reuse_from && fs::exists(*options_.reuse_from / "ledger.json"))
      reuse_ = load_ledger(*options_.reuse_from);
  }

  RunLedger run() {
    std::string up;
    up = stage("gen-data", stage_json("gen-data", "", {{"seed", c_.seed}, {"tasks", to_json(c_)["tasks"]}}),
               [this](StageRecord& r) { gen_data(r); });
    if (done("gen-data")) return ledger_;
    const auto cj = to_json(c_);
    up = stage("compress",
               stage_json("compress", up,
                          {{"seed", c_.seed},
                           {"compress", cj["compress"]},
                           {"pipeline", {{"compress", c_.pipeline.compress}, {"budget_tokens", c_.pipeline.budget_tokens}}},
                           {"mix_ratio", c_.sft.mix_ratio}}),
               [this](StageRecord& r) { compress(r); });
    if (done("compress")) return ledger_;
    up = stage("sft",
               stage_json("sft", up,
                          {{"seed", c_.seed},
                           {"model", cj["model"]},
                           {"init_std", c_.init_std},
                           {"sft", cj["sft"]},
                           {"probe", probe_json()}}),
               [this](StageRecord& r) { sft(r); });
    if (done("sft")) return ledger_;
    up = stage("rl",
               stage_json("rl", up,
                          {{"seed", c_.seed},
                           {"enabled", c_.pipeline.rl},
                           {"rl", cj["rl"]},
                           {"reward", cj["reward"]},
                           {"probe", probe_json()}}),
               [this](StageRecord& r) { rl(r); });
    if (done("rl")) return ledger_;
    stage("eval", stage_json("eval", up, {{"eval", cj["eval"]}, {"budget_tokens", c_.pipeline.budget_tokens}}),
          [this](StageRecord& r) { eval(r); });
    return ledger_;
  }

 private:
  bool done(const std::string& name) const { return options_.until && *options_.until == name; }

  json probe_json() const {
    return {{"in_range", c_.eval.probe_in_range},
            {"out_of_range", c_.eval.probe_out_of_range},
            {"tasks", c_.eval.probe_tasks},
            {"budget_tokens", c_.pipeline.budget_tokens}};
  }

  bool artifacts_exist(const fs::path& base, const StageRecord& r) const {
    return std::all_of(r.artifacts.begin(), r.artifacts.end(),
                       [&](const auto& kv) { return fs::exists(base / kv.second); });
  }

  void write_ledger() {
    for (const auto& [name, rec] : ledger_.stages)
      for (const auto& [key, path] : rec.artifacts)
        if (!fs::exists(root_ / path))
          throw std::logic_error(fmt::format("ledger references missing file {} ({}:{})", path, name, key));
    write_text(root_ / "ledger.json", to_json(ledger_).dump(2) + "\n");
  }

  // Drops `name` and every later stage from the ledger.
  void invalidate_from(const std::string& name) {
    const auto it = std::find(kStages.begin(), kStages.end(), name);
    for (auto s = it; s != kStages.end(); ++s) ledger_.stages.erase(*s);
  }

  std::string stage(const std::string& name, const json& spec, const std::function<void(StageRecord&)>& body) {
    const std::string hash = sha256_hex(spec.dump());
    if (const auto it = ledger_.stages.find(name);
        it != ledger_.stages.end() && it->second.stage_hash == hash && artifacts_exist(root_, it->second)) {
      spdlog::info("stage {}: up to date", name);
      return hash;
    }
    invalidate_from(name);
    if (reuse_) {
      const auto it = reuse_->stages.find(name);
      if (it != reuse_->stages.end() && it->second.stage_hash == hash &&
          artifacts_exist(*options_.reuse_from, it->second)) {
        for (const auto& [key, path] : it->second.artifacts) {
          fs::create_directories((root_ / path).parent_path());
          fs::copy_file(*options_.reuse_from / path, root_ / path, fs::copy_options::overwrite_existing);
        }
        ledger_.stages[name] = it->second;
        write_ledger();
        spdlog::info("stage {}: reused from {}", name, options_.reuse_from->string());
        return hash;
      }
    }
    spdlog::info("stage {}: running", name);
    const auto start = std::chrono::steady_clock::now();
    StageRecord rec;
    rec.stage_hash = hash;
    try {
      body(rec);
    } catch (const std::exception& e) {
      write_ledger();
      throw std::runtime_error(fmt::format("stage {} failed: {}", name, e.what()));
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ledger_.stages[name] = std::move(rec);
    write_ledger();
    spdlog::info("stage {}: done in {:.1f}s", name, ledger_.stages[name].wall_seconds);
    return hash;
  }

  fs::path path_of(const std::string& stage, const std::string& key) const {
    return root_ / ledger_.stages.at(stage).artifacts.at(key);
  }

  void gen_data(StageRecord& r) {
    const auto suites = generate_suites(c_);
    std::vector<taskgen::Task> train_tasks;
    std::vector<taskgen::TeacherTrace> traces;
    for (const auto& t : suites.train) {
      train_tasks.push_back(t.task);
      traces.push_back(t.trace);
    }
    write_jsonl(root_ / "data/train_tasks.jsonl", train_tasks);
    write_jsonl(root_ / "data/train_traces.jsonl", traces);
    write_jsonl(root_ / "data/heldout_tasks.jsonl", suites.heldout);
    write_jsonl(root_ / "data/eval_tasks.jsonl", suites.eval);
    r.artifacts = {{"train_tasks", "data/train_tasks.jsonl"},
                   {"train_traces", "data/train_traces.jsonl"},
                   {"heldout_tasks", "data/heldout_tasks.jsonl"},
                   {"eval_tasks", "data/eval_tasks.jsonl"}};
  }

  std::vector<budgetpress::TracedTask> train_traced() const {
    const auto tasks = read_jsonl<taskgen::Task>(path_of("gen-data", "train_tasks"));
    const auto traces = read_jsonl<taskgen::TeacherTrace>(path_of("gen-data", "train_traces"));
    if (tasks.size() != traces.size()) throw std::runtime_error("train tasks and traces differ in length");
    std::vector<budgetpress::TracedTask> out;
    for (std::size_t i = 0; i < tasks.size(); ++i) out.push_back({tasks[i], traces[i]});
    return out;
  }

  std::vector<taskgen::Task> probe_tasks() const {
    auto tasks = read_jsonl<taskgen::Task>(path_of("gen-data", "heldout_tasks"));
    tasks.resize(std::min<std::size_t>(tasks.size(), static_cast<std::size_t>(c_.eval.probe_tasks)));
    return tasks;
  }

  void compress(StageRecord& r) {
    const auto train = train_traced();
    const auto ds = build_sft_dataset(c_, train);
    // Held-out records follow the same recipe on the held-out tasks.
    ExperimentConfig hc = c_;
    hc.seed = derive_seed(c_.seed, "lab.heldout");
    const auto heldout =
        build_sft_dataset(hc, with_traces(read_jsonl<taskgen::Task>(path_of("gen-data", "heldout_tasks"))));
    write_jsonl(root_ / "data/sft_records.jsonl", ds.records);
    write_jsonl(root_ / "data/heldout_records.jsonl", heldout.records);
    write_text(root_ / "data/manifest.json", json(ds.manifest).dump(2) + "\n");
    spdlog::info("compress: {} SFT records ({} budgeted, {} unconditioned)", ds.manifest.record_count,
                 ds.manifest.budgeted_count, ds.manifest.unconditioned_count);
    r.artifacts = {{"sft_records", "data/sft_records.jsonl"},
                   {"heldout_records", "data/heldout_records.jsonl"},
                   {"manifest", "data/manifest.json"}};
  }

  void write_probe(const fs::path& rel, const ProbeResult& p, StageRecord& r, const std::string& key) {
    write_text(root_ / rel, to_json(p).dump(2) + "\n");
    r.artifacts[key] = rel.string();
    spdlog::info("probe: r(in-range) {:.3f}, r(out-of-range) {:.3f}", p.r_in_range, p.r_out_of_range);
  }

  nanolm::CheckpointHeader header(const nanolm::ParameterStore& params, long step, const std::string& stage) const {
    return {params.config(), textcodec::Vocab::standard().hash(), step, {{"stage", stage}, {"preset", c_.preset}}};
  }

  void sft(StageRecord& r) {
    const auto records = read_jsonl<budgetpress::BudgetedExample>(path_of("compress", "sft_records"));
    nanolm::ParameterStore params{c_.model};
    params.init_normal(stage_seed(c_, "lab.init"), c_.init_std);
    auto cfg = c_.sft;
    cfg.seed = stage_seed(c_, "lab.sft");
    sft::SftOptions opts;
    opts.out_dir = root_ / "sft";
    opts.heldout = read_jsonl<budgetpress::BudgetedExample>(path_of("compress", "heldout_records"));
    const auto probe = probe_tasks();
    ProbeResult result;
    opts.probe = [&](const nanolm::ParameterStore& p) {
      result = probe_sweep(p, probe, c_.eval, c_.pipeline.budget_tokens);
      return result.r_in_range;
    };
    const auto report = sft::train_sft(params, records, cfg, opts);
    nanolm::save_checkpoint(root_ / "sft/model.ckpt", params, header(params, report.steps, "sft"));
    r.artifacts = {{"model", "sft/model.ckpt"}, {"report", "sft/sft_report.json"}, {"curve", "sft/sft_curve.csv"}};
    for (std::size_t e = 0; e < report.checkpoints.size(); ++e)
      r.artifacts[fmt::format("epoch_{}", e + 1)] = "sft/" + report.checkpoints[e].filename().string();
    write_probe("sft/probe.json", result, r, "probe");
  }

  void rl(StageRecord& r) {
    if (!c_.pipeline.rl) {
      spdlog::info("rl: disabled by preset {}", c_.preset);
      return;
    }
    auto params = nanolm::load_checkpoint(path_of("sft", "model")).params;
    const auto tasks = read_jsonl<taskgen::Task>(path_of("gen-data", "train_tasks"));
    auto cfg = c_.rl;
    cfg.seed = stage_seed(c_, "lab.rl");
    grpo::RlOptions opts;
    opts.out_dir = root_ / "rl";
    const auto report = grpo::train_rl(params, tasks, cfg, c_.reward, opts);
    r.artifacts = {{"model", "rl/model.ckpt"}, {"report", "rl/rl_report.json"}, {"log", "rl/rl_log.csv"}};
    for (const auto& p : report.checkpoints)
      if (p.filename() != "model.ckpt") r.artifacts[p.stem().string()] = "rl/" + p.filename().string();
    write_probe("rl/probe.json", probe_sweep(params, probe_tasks(), c_.eval, c_.pipeline.budget_tokens), r, "probe");
  }

  void eval_one(const nanolm::ParameterStore& params, const std::string& which, StageRecord& r) {
    const auto tasks = read_jsonl<taskgen::Task>(path_of("gen-data", "eval_tasks"));
    evalkit::EvalOptions opts;
    opts.include_unconstrained = c_.eval.include_unconstrained;
    opts.w = c_.eval.w;
    opts.budget_scale = c_.eval.budget_scale;
    opts.budget_in_prompt = c_.pipeline.budget_tokens;
    const auto report = evalkit::run_eval(params, tasks, c_.eval.budgets, opts);
    const std::string dir = "eval/" + which + "/";
    write_text(root_ / (dir + "eval.csv"), evalkit::to_csv(report));
    write_text(root_ / (dir + "eval_report.json"), evalkit::to_json(report, true).dump(1) + "\n");
    write_text(root_ / (dir + "plot_data.csv"), evalkit::plot_data_csv(report));
    write_text(root_ / (dir + "behavior.json"),
               evalkit::to_json(evalkit::behavior_profile(report, c_.eval.behavior_bucket)).dump(2) + "\n");
    r.artifacts[which + "_csv"] = dir + "eval.csv";
    r.artifacts[which + "_report"] = dir + "eval_report.json";
    r.artifacts[which + "_plot_data"] = dir + "plot_data.csv";
    r.artifacts[which + "_behavior"] = dir + "behavior.json";
    spdlog::info("eval {}: mean UPS {:.3f}, pooled Acc {:.3f}, pooled Fid {:.3f}", which, report.mean_ups,
                 report.pooled_accuracy, report.pooled_fidelity);
  }

  void eval(StageRecord& r) {
    const auto sft_params = nanolm::load_checkpoint(path_of("sft", "model")).params;
    eval_one(sft_params, "sft", r);
    if (ledger_.stages.at("rl").artifacts.count("model")) {
      eval_one(nanolm::load_checkpoint(path_of("rl", "model")).params, "final", r);
    } else {
      for (const auto& name : {"eval.csv", "eval_report.json", "plot_data.csv", "behavior.json"}) {
        fs::create_directories(root_ / "eval/final");
        fs::copy_file(root_ / "eval/sft" / name, root_ / "eval/final" / name, fs::copy_options::overwrite_existing);
      }
      r.artifacts["final_csv"] = "eval/final/eval.csv";
      r.artifacts["final_report"] = "eval/final/eval_report.json";
      r.artifacts["final_plot_data"] = "eval/final/plot_data.csv";
      r.artifacts["final_behavior"] = "eval/final/behavior.json";
    }
  }

  ExperimentConfig c_;
  fs::path root_;
  RunOptions options_;
  RunLedger ledger_;
  std::optional<RunLedger> reuse_;
};

}  // namespace

sft::SftReport train_sft_from(const ExperimentConfig& config, const fs::path& data, const fs::path& out_dir) {
  config.validate();
  const auto records = read_jsonl<budgetpress::BudgetedExample>(data);
  nanolm::ParameterStore params{config.model};
  params.init_normal(stage_seed(config, "lab.init"), config.init_std);
  auto cfg = config.sft;
  cfg.seed = stage_seed(config, "lab.sft");
  sft::SftOptions opts;
  opts.out_dir = out_dir;
  const auto report = sft::train_sft(params, records, cfg, opts);
  const nanolm::CheckpointHeader header{params.config(), textcodec::Vocab::standard().hash(), report.steps,
                                       {{"stage", "sft"}, {"preset", config.preset}}};
  nanolm::save_checkpoint(out_dir / "model.ckpt", params, header);
  return report;
}

grpo::RlReport train_rl_from(const ExperimentConfig& config, const fs::path& init, const fs::path& out_dir) {
  config.validate();
  auto params = nanolm::load_checkpoint(init).params;
  if (params.config().vocab_size != config.model.vocab_size)
    throw std::invalid_argument("checkpoint vocabulary does not match the config");
  auto cfg = config.rl;
  cfg.seed = stage_seed(config, "lab.rl");
  grpo::RlOptions opts;
  opts.out_dir = out_dir;
  return grpo::train_rl(params, task_suite(config, "lab.tasks.train", config.tasks.train_tasks), cfg, config.reward,
                        opts);
}

RunLedger run_pipeline(const ExperimentConfig& config, const fs::path& out_dir, const RunOptions& options) {
  if (options.until && std::find(kStages.begin(), kStages.end(), *options.until) == kStages.end())
    throw std::invalid_argument("unknown stage " + *options.until);
  return Pipeline{config, out_dir, options}.run();
}

}  // namespace bard::lab
