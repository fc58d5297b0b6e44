#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <openssl/sha.h>

#include "bard/lab.hpp"

namespace bard::lab {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("invalid config: " + what);
}

void validate_budgets(const std::vector<int>& budgets, const std::string& name, std::size_t min_count) {
  require(budgets.size() >= min_count, fmt::format("{} needs at least {} budgets", name, min_count));
  for (int b : budgets) require(b >= 1, fmt::format("{} contains budget {} < 1", name, b));
  auto sorted = budgets;
  std::sort(sorted.begin(), sorted.end());
  require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), name + " contains duplicates");
}

json kinds_to_json(const std::vector<taskgen::StepKind>& kinds) {
  json out = json::array();
  for (auto k : kinds) out.push_back(std::string(taskgen::to_string(k)));
  return out;
}

// Every key present in `given` must also exist in `known`.
void reject_unknown(const json& given, const json& known, const std::string& where) {
  if (!given.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw std::invalid_argument(fmt::format("unknown config key {}/{}", where, key));
    if (value.is_object()) reject_unknown(value, known.at(key), where + "/" + key);
  }
}

void diff_into(const json& a, const json& b, const std::string& at, std::vector<std::string>& out) {
  if (a.is_object() && b.is_object()) {
    std::vector<std::string> keys;
    for (const auto& [k, _] : a.items()) keys.push_back(k);
    for (const auto& [k, _] : b.items())
      if (!a.contains(k)) keys.push_back(k);
    for (const auto& k : keys) {
      if (!a.contains(k) || !b.contains(k)) {
        out.push_back(at + "/" + k);
        continue;
      }
      diff_into(a.at(k), b.at(k), at + "/" + k, out);
    }
    return;
  }
  if (a != b) out.push_back(at);
}

}  // namespace

void ExperimentConfig::validate() const {
  require(std::find(kPresets.begin(), kPresets.end(), preset) != kPresets.end(), "unknown preset " + preset);
  require(tasks.train_tasks >= 1 && tasks.heldout_tasks >= 1 && tasks.eval_tasks >= 1, "task counts must be >= 1");
  require(tasks.min_difficulty >= 1 && tasks.max_difficulty >= tasks.min_difficulty, "difficulty range");
  tasks.generator.validate();
  require(compress.k >= 1, "compress.k must be >= 1");
  require(compress.histogram_bucket >= 1, "compress.histogram_bucket must be >= 1");
  compress.policy.validate();
  model.validate();
  require(model.vocab_size == static_cast<int>(textcodec::Vocab::standard().size()),
          fmt::format("model.vocab_size must be {}", textcodec::Vocab::standard().size()));
  require(init_std > 0.0, "init_std must be > 0");
  sft.validate();
  rl.validate();
  reward.validate();
  validate_budgets(eval.budgets, "eval.budgets", 1);
  validate_budgets(eval.probe_in_range, "eval.probe_in_range", 2);
  validate_budgets(eval.probe_out_of_range, "eval.probe_out_of_range", 2);
  require(eval.probe_tasks >= 1 && eval.probe_tasks <= tasks.heldout_tasks, "eval.probe_tasks must be in [1, heldout]");
  require(eval.w >= 0.0 && eval.w <= 1.0, "eval.w must be in [0, 1]");
  require(eval.budget_scale > 0.0, "eval.budget_scale must be > 0");
  require(eval.behavior_bucket >= 1, "eval.behavior_bucket must be >= 1");
}

json to_json(const ExperimentConfig& c) {
  json sft = c.sft;
  json rl = c.rl;
  // Stage seeds come from the global seed.
  sft.erase("seed");
  rl.erase("seed");
  const auto& g = c.tasks.generator;
  return {
      {"preset", c.preset},
      {"seed", c.seed},
      {"tasks",
       {{"train_tasks", c.tasks.train_tasks},
        {"heldout_tasks", c.tasks.heldout_tasks},
        {"eval_tasks", c.tasks.eval_tasks},
        {"min_difficulty", c.tasks.min_difficulty},
        {"max_difficulty", c.tasks.max_difficulty},
        {"generator",
         {{"min_value", g.min_value}, {"max_value", g.max_value}, {"max_operand", g.max_operand},
          {"max_start", g.max_start}}}}},
      {"compress",
       {{"k", c.compress.k},
        {"histogram_bucket", c.compress.histogram_bucket},
        {"policy",
         {{"drop_order", kinds_to_json(c.compress.policy.drop_order)},
          {"compact_derive", c.compress.policy.compact_derive}}}}},
      {"pipeline",
       {{"compress", c.pipeline.compress}, {"budget_tokens", c.pipeline.budget_tokens}, {"rl", c.pipeline.rl}}},
      {"model", c.model},
      {"init_std", c.init_std},
      {"sft", sft},
      {"rl", rl},
      {"reward", c.reward},
      {"eval",
       {{"budgets", c.eval.budgets},
        {"include_unconstrained", c.eval.include_unconstrained},
        {"w", c.eval.w},
        {"budget_scale", c.eval.budget_scale},
        {"probe_in_range", c.eval.probe_in_range},
        {"probe_out_of_range", c.eval.probe_out_of_range},
        {"probe_tasks", c.eval.probe_tasks},
        {"behavior_bucket", c.eval.behavior_bucket}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  ExperimentConfig c;
  c.model.vocab_size = static_cast<int>(textcodec::Vocab::standard().size());
  reject_unknown(j, to_json(c), "");

  c.preset = j.value("preset", c.preset);
  c.seed = j.value("seed", c.seed);
  if (j.contains("tasks")) {
    const auto& t = j.at("tasks");
    c.tasks.train_tasks = t.value("train_tasks", c.tasks.train_tasks);
    c.tasks.heldout_tasks = t.value("heldout_tasks", c.tasks.heldout_tasks);
    c.tasks.eval_tasks = t.value("eval_tasks", c.tasks.eval_tasks);
    c.tasks.min_difficulty = t.value("min_difficulty", c.tasks.min_difficulty);
    c.tasks.max_difficulty = t.value("max_difficulty", c.tasks.max_difficulty);
    if (t.contains("generator")) {
      const auto& g = t.at("generator");
      auto& o = c.tasks.generator;
      o.min_value = g.value("min_value", o.min_value);
      o.max_value = g.value("max_value", o.max_value);
      o.max_operand = g.value("max_operand", o.max_operand);
      o.max_start = g.value("max_start", o.max_start);
    }
  }
  if (j.contains("compress")) {
    const auto& cj = j.at("compress");
    c.compress.k = cj.value("k", c.compress.k);
    c.compress.histogram_bucket = cj.value("histogram_bucket", c.compress.histogram_bucket);
    if (cj.contains("policy")) {
      const auto& p = cj.at("policy");
      if (p.contains("drop_order")) {
        c.compress.policy.drop_order.clear();
        for (const auto& k : p.at("drop_order")) c.compress.policy.drop_order.push_back(taskgen::step_kind_from_string(k.get<std::string>()));
      }
      c.compress.policy.compact_derive = p.value("compact_derive", c.compress.policy.compact_derive);
    }
  }
  if (j.contains("pipeline")) {
    const auto& p = j.at("pipeline");
    c.pipeline.compress = p.value("compress", c.pipeline.compress);
    c.pipeline.budget_tokens = p.value("budget_tokens", c.pipeline.budget_tokens);
    c.pipeline.rl = p.value("rl", c.pipeline.rl);
  }
  if (j.contains("model")) {
    nanolm::ModelConfig m = c.model;
    from_json(j.at("model"), m);
    c.model = m;
  }
  c.init_std = j.value("init_std", c.init_std);
  if (j.contains("sft")) from_json(j.at("sft"), c.sft);
  if (j.contains("rl")) from_json(j.at("rl"), c.rl);
  if (j.contains("reward")) from_json(j.at("reward"), c.reward);
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.budgets = e.value("budgets", c.eval.budgets);
    c.eval.include_unconstrained = e.value("include_unconstrained", c.eval.include_unconstrained);
    c.eval.w = e.value("w", c.eval.w);
    c.eval.budget_scale = e.value("budget_scale", c.eval.budget_scale);
    c.eval.probe_in_range = e.value("probe_in_range", c.eval.probe_in_range);
    c.eval.probe_out_of_range = e.value("probe_out_of_range", c.eval.probe_out_of_range);
    c.eval.probe_tasks = e.value("probe_tasks", c.eval.probe_tasks);
    c.eval.behavior_bucket = e.value("behavior_bucket", c.eval.behavior_bucket);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(fmt::format("config {} is not valid JSON: {}", path.string(), e.what()));
  }
  return config_from_json(j);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
  std::string out;
  for (unsigned char b : digest) out += fmt::format("{:02x}", b);
  return out;
}

// nlohmann::json objects are key-sorted, so dump() is canonical.
std::string config_hash(const ExperimentConfig& c) { return sha256_hex(to_json(c).dump()); }

ExperimentConfig apply_preset(ExperimentConfig c, const std::string& preset) {
  if (preset == "bard") {
  } else if (preset == "sft-full") {
    c.sft.mix_ratio = 0.0;
    c.pipeline.compress = false;
    c.pipeline.rl = false;
  } else if (preset == "no-contrastive") {
    c.compress.k = 1;
  } else if (preset == "additive-reward") {
    c.reward.mode = grpo::RewardMode::Additive;
  } else if (preset == "rl-direct") {
    c.sft.mix_ratio = 0.0;
    c.pipeline.compress = false;
  } else if (preset == "bard-no-budget") {
    c.pipeline.budget_tokens = false;
    c.rl.use_budget = false;
  } else {
    throw std::invalid_argument("unknown preset " + preset);
  }
  c.preset = preset;
  return c;
}

std::vector<std::string> preset_fields(const std::string& preset) {
  if (preset == "bard") return {};
  if (preset == "sft-full") return {"/preset", "/sft/mix_ratio", "/pipeline/compress", "/pipeline/rl"};
  if (preset == "no-contrastive") return {"/preset", "/compress/k"};
  if (preset == "additive-reward") return {"/preset", "/reward/mode"};
  if (preset == "rl-direct") return {"/preset", "/sft/mix_ratio", "/pipeline/compress"};
  if (preset == "bard-no-budget") return {"/preset", "/pipeline/budget_tokens", "/rl/use_budget"};
  throw std::invalid_argument("unknown preset " + preset);
}

std::vector<std::string> config_diff(const ExperimentConfig& a, const ExperimentConfig& b) {
  std::vector<std::string> out;
  diff_into(to_json(a), to_json(b), "", out);
  std::sort(out.begin(), out.end());
  return out;
}

std::uint64_t stage_seed(const ExperimentConfig& c, std::string_view stage) { return derive_seed(c.seed, stage); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace bard::lab
