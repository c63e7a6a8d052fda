#include "hlora/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace hlora {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void spill(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

template <typename T>
T field(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config field \"" + key + "\" has the wrong type");
  }
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    task.validate();
    train.validate();
    grpo.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  if (rank < 1) throw ValidationError("config field \"rank\" must be >= 1");
  if (r_fft <= 0.0 || r_fft >= 1.0)
    throw ValidationError("config field \"r_fft\" must lie in (0,1)");
  if (partitions < 2)
    throw ValidationError("config field \"partitions\" must be >= 2");
  if (model.vocab_size < tok::kMinVocab)
    throw ValidationError("config field \"model.vocab_size\" must be >= " +
                          std::to_string(tok::kMinVocab));
  const TaskGenerator gen(task);
  const int needed = gen.max_sequence_len() + grpo.max_gen_len;
  if (model.max_seq_len < needed)
    throw ValidationError("config field \"model.max_seq_len\" must be >= " +
                          std::to_string(needed) + " for this task");
}

RunConfig RunConfig::parse_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  const json mj = j.value("model", json::object());
  cfg.model.num_layers = field(mj, "num_layers", 2);
  cfg.model.d_model = field(mj, "d_model", 32);
  cfg.model.num_heads = field(mj, "num_heads", 4);
  cfg.model.d_ff = field(mj, "d_ff", 64);
  cfg.model.vocab_size = field(mj, "vocab_size", 16);
  cfg.model.max_seq_len = field(mj, "max_seq_len", 32);
  cfg.model.seed = field<std::uint64_t>(mj, "seed", 1);

  if (!j.contains("rank") || j.at("rank").is_null())
    throw ValidationError("config field \"rank\" is required");
  cfg.rank = field(j, "rank", 16);
  cfg.variant = variant_from_name(field<std::string>(j, "score_variant", "product"));
  cfg.r_fft = field(j, "r_fft", 0.10);
  cfg.partitions = field(j, "partitions", 20);
  cfg.direction = direction_from_name(
      field<std::string>(j, "direction", "ascending-from-lora"));

  const json sj = j.value("seeds", json::object());
  cfg.partition_seed = field<std::uint64_t>(sj, "partition", 2);
  const std::uint64_t sampling_seed = field<std::uint64_t>(sj, "sampling", 3);

  const json tj = j.value("task", json::object());
  try {
    cfg.task.kind = task_from_name(field<std::string>(tj, "kind", "modular-addition"));
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  cfg.task.seed = field<std::uint64_t>(tj, "seed", 4);
  cfg.task.modulus = field(tj, "modulus", 7);
  cfg.task.alphabet = field(tj, "alphabet", 8);
  cfg.task.min_len = field(tj, "min_len", 2);
  cfg.task.max_len = field(tj, "max_len", 5);

  const json trj = j.value("train", json::object());
  cfg.train.lr_fft = field(trj, "lr_fft", 4e-5);
  cfg.train.lr_lora = field(trj, "lr_lora", 1e-3);
  cfg.train.pretrain_lr = field(trj, "pretrain_lr", 1e-3);
  cfg.train.pretrain_steps = field(trj, "pretrain_steps", 40);
  cfg.train.warmup_steps = field(trj, "warmup_steps", 500);
  cfg.train.total_steps = field(trj, "total_steps", 300);
  cfg.train.eval_every = field(trj, "eval_every", 50);
  cfg.train.batch_size = field(trj, "batch_size", 8);
  cfg.train.seed = sampling_seed;
  try {
    cfg.train.objective =
        objective_from_name(field<std::string>(trj, "objective", "grpo"));
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }

  const json gj = j.value("grpo", json::object());
  cfg.grpo.group_size = field(gj, "group_size", 4);
  cfg.grpo.clip = field(gj, "clip", 0.2);
  cfg.grpo.kl_beta = field(gj, "kl_beta", 0.01);
  cfg.grpo.adv_epsilon = field(gj, "adv_epsilon", 1e-8);
  cfg.grpo.temperature = field(gj, "temperature", 1.0);
  cfg.grpo.max_gen_len = field(gj, "max_gen_len", 8);

  cfg.validate();
  return cfg;
}

RunConfig RunConfig::parse_file(const fs::path& path,
                                const std::string& overrides_json) {
  if (!fs::exists(path))
    throw MissingArtifactError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(slurp(path));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!overrides_json.empty()) {
    json o;
    try {
      o = json::parse(overrides_json);
    } catch (const json::exception& e) {
      throw ValidationError(std::string("overrides are not valid JSON: ") + e.what());
    }
    j.merge_patch(o);
  }
  return parse_json(j.dump());
}

std::string RunConfig::to_json() const {
  ordered_json j;
  j["model"] = {{"num_layers", model.num_layers}, {"d_model", model.d_model},
                {"num_heads", model.num_heads},   {"d_ff", model.d_ff},
                {"vocab_size", model.vocab_size},
                {"max_seq_len", model.max_seq_len}, {"seed", model.seed}};
  j["rank"] = rank;
  j["score_variant"] = variant_name(variant);
  j["r_fft"] = r_fft;
  j["partitions"] = partitions;
  j["direction"] = direction_name(direction);
  j["seeds"] = {{"partition", partition_seed}, {"sampling", train.seed}};
  j["task"] = {{"kind", task_name(task.kind)}, {"seed", task.seed},
               {"modulus", task.modulus},       {"alphabet", task.alphabet},
               {"min_len", task.min_len},       {"max_len", task.max_len}};
  j["train"] = {{"lr_fft", train.lr_fft},
                {"lr_lora", train.lr_lora},
                {"pretrain_lr", train.pretrain_lr},
                {"pretrain_steps", train.pretrain_steps},
                {"warmup_steps", train.warmup_steps},
                {"total_steps", train.total_steps},
                {"eval_every", train.eval_every},
                {"batch_size", train.batch_size},
                {"objective", objective_name(train.objective)}};
  j["grpo"] = {{"group_size", grpo.group_size}, {"clip", grpo.clip},
               {"kl_beta", grpo.kl_beta},       {"adv_epsilon", grpo.adv_epsilon},
               {"temperature", grpo.temperature},
               {"max_gen_len", grpo.max_gen_len}};
  return j.dump(2) + "\n";
}

// ---- artifact formats -----------------------------------------------------

void write_score_report(const fs::path& path, const HybridScoreReport& report) {
  ordered_json j;
  j["variant"] = variant_name(report.variant);
  j["T"] = report.T;
  j["partition_seed"] = report.partition_seed;
  ordered_json mods = ordered_json::array();
  for (const auto& ms : report.modules) {
    ordered_json m;
    m["layer"] = ms.module.layer;
    m["kind"] = kind_name(ms.module.kind);
    m["T"] = report.T;
    m["samples"] = ms.samples;
    m["mu"] = ms.mu;
    m["sigma"] = ms.sigma;
    if (ms.degenerate) {
      m["score"] = "infinity";
    } else {
      m["score"] = ms.score;
    }
    m["variant"] = variant_name(report.variant);
    m["rank"] = ms.rank;
    m["flags"] = ms.degenerate ? ordered_json::array({"degenerate"})
                               : ordered_json::array();
    mods.push_back(std::move(m));
  }
  j["modules"] = std::move(mods);
  spill(path, j.dump(2) + "\n");
}

HybridScoreReport read_score_report(const fs::path& path) {
  if (!fs::exists(path))
    throw MissingArtifactError("score report not found: " + path.string());
  json j = json::parse(slurp(path));
  HybridScoreReport report;
  report.variant = variant_from_name(j.at("variant").get<std::string>());
  report.T = j.at("T").get<int>();
  report.partition_seed = j.at("partition_seed").get<std::uint64_t>();
  for (const auto& m : j.at("modules")) {
    ModuleScore ms;
    ms.module = {m.at("layer").get<int>(),
                 kind_from_name(m.at("kind").get<std::string>())};
    ms.samples = m.at("samples").get<std::vector<double>>();
    ms.mu = m.at("mu").get<double>();
    ms.sigma = m.at("sigma").get<double>();
    if (m.at("score").is_string()) {
      ms.score = std::numeric_limits<double>::infinity();
      ms.degenerate = true;
    } else {
      ms.score = m.at("score").get<double>();
    }
    ms.rank = m.at("rank").get<int>();
    report.modules.push_back(std::move(ms));
  }
  return report;
}

void write_plan(const fs::path& path, const AllocationPlan& plan) {
  ordered_json j;
  auto set_to_json = [](const std::set<ModuleId>& set) {
    ordered_json arr = ordered_json::array();
    for (const auto& id : set)
      arr.push_back({{"layer", id.layer}, {"kind", kind_name(id.kind)}});
    return arr;
  };
  j["fft"] = set_to_json(plan.fft_set);
  j["lora"] = set_to_json(plan.lora_set);
  j["r_fft"] = plan.budget_ratio;
  j["used_ratio"] = plan.used_ratio;
  j["total_params"] = plan.total_params;
  j["direction"] = direction_name(plan.direction);
  j["report_digest"] = plan.report_digest;
  spill(path, j.dump(2) + "\n");
}

AllocationPlan read_plan(const fs::path& path) {
  if (!fs::exists(path))
    throw MissingArtifactError("plan not found: " + path.string());
  json j = json::parse(slurp(path));
  AllocationPlan plan;
  auto set_from_json = [](const json& arr) {
    std::set<ModuleId> out;
    for (const auto& e : arr)
      out.insert({e.at("layer").get<int>(),
                  kind_from_name(e.at("kind").get<std::string>())});
    return out;
  };
  plan.fft_set = set_from_json(j.at("fft"));
  plan.lora_set = set_from_json(j.at("lora"));
  plan.budget_ratio = j.at("r_fft").get<double>();
  plan.used_ratio = j.at("used_ratio").get<double>();
  plan.total_params = j.at("total_params").get<std::size_t>();
  plan.direction = direction_from_name(j.at("direction").get<std::string>());
  plan.report_digest = j.at("report_digest").get<std::string>();
  return plan;
}

void write_grid_csv(const fs::path& path, const AllocationPlan& plan,
                    int num_layers) {
  std::ostringstream os;
  os << "layer";
  for (ModuleKind k : kAllKinds) os << "," << kind_name(k);
  os << "\n";
  for (int l = 1; l <= num_layers; ++l) {
    os << l;
    for (ModuleKind k : kAllKinds)
      os << "," << (plan.fft_set.count({l, k}) ? "FFT" : "LoRA");
    os << "\n";
  }
  spill(path, os.str());
}

void write_metrics_csv(const fs::path& path,
                       const std::vector<MetricRecord>& log) {
  std::ostringstream os;
  os << "step,objective,metric,stage\n";
  os.precision(17);
  for (const auto& rec : log)
    os << rec.step << "," << rec.objective << "," << rec.value << ","
       << rec.stage << "\n";
  spill(path, os.str());
}

// ---- Run ------------------------------------------------------------------

Run::Run(const fs::path& config_path, const std::string& overrides_json,
         const fs::path& output_dir, bool overwrite)
    : cfg_(RunConfig::parse_file(config_path, overrides_json)),
      dir_(output_dir),
      overwrite_(overwrite) {
  if (dir_.empty()) throw ValidationError("output directory not set");
  fs::create_directories(dir_);
  // fully-resolved config is written before any stage runs
  spill(dir_ / "config.resolved.json", cfg_.to_json());
}

fs::path Run::path(const std::string& artifact) const { return dir_ / artifact; }

void Run::require_artifact(const std::string& artifact) const {
  if (!fs::exists(path(artifact)))
    throw MissingArtifactError("missing artifact " + path(artifact).string() +
                               "; run the preceding stage first");
}

void Run::record_artifact(const std::string& stage, const std::string& artifact) {
  ordered_json manifest;
  const fs::path mpath = path("manifest.json");
  if (fs::exists(mpath)) manifest = ordered_json::parse(slurp(mpath));
  manifest["config"] = ordered_json::parse(cfg_.to_json());
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  manifest["stages"][stage]["completed_unix_ms"] =
      std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  manifest["artifacts"][artifact] = digest_hex(file_digest(path(artifact)));
  spill(mpath, manifest.dump(2) + "\n");
}

void Run::probe() {
  if (fs::exists(path("probe.ckpt")) && !overwrite_)
    throw ValidationError("output " + path("probe.ckpt").string() +
                          " already exists; pass the overwrite flag to redo");
  const TaskGenerator task(cfg_.task);

  // supervised stand-in pre-training for the base checkpoint
  Model model(cfg_.model);
  if (cfg_.train.pretrain_steps > 0) {
    model.set_all_base_trainable(true);
    AdamOptimizer opt;
    opt.add_group(model.base_parameters(), cfg_.train.pretrain_lr);
    std::mt19937_64 rng(mix64(cfg_.train.seed, 0x707265ull));
    for (int step = 0; step < cfg_.train.pretrain_steps; ++step)
      supervised_step(model, task.make_batch(
                                 static_cast<std::size_t>(cfg_.train.batch_size), rng),
                      opt);
    model.set_all_base_trainable(false);
  }
  save_checkpoint(path("m0.ckpt"), model);
  record_artifact("probe", "m0.ckpt");

  AdapterSet adapters = attach_lora(model, model.universe(), cfg_.rank,
                                    mix64(cfg_.train.seed, 0x70726f6265ull));
  probing_warmup(model, adapters, task, cfg_.train);
  save_checkpoint(path("probe.ckpt"), model, &adapters);
  record_artifact("probe", "probe.ckpt");
}

void Run::score() {
  require_artifact("probe.ckpt");
  LoadedCheckpoint ckpt = load_checkpoint(path("probe.ckpt"));
  if (!ckpt.adapters)
    throw InvariantError("probe checkpoint carries no LoRA state");
  const TaskGenerator task(cfg_.task);
  std::mt19937_64 val_rng(mix64(cfg_.task.seed, 0x73636f7265ull));
  const auto batches = task.make_batches(
      static_cast<std::size_t>(cfg_.partitions),
      static_cast<std::size_t>(cfg_.train.batch_size), val_rng);
  auto records = collect_sensitivities(ckpt.model, *ckpt.adapters, batches,
                                       cfg_.partition_seed);
  HybridScoreReport report =
      hybrid_score(records, cfg_.variant, cfg_.partition_seed);
  write_score_report(path("score_report.json"), report);
  record_artifact("score", "score_report.json");

  // alpha-magnitude baseline scores, written alongside
  ordered_json aj = ordered_json::array();
  for (const auto& [id, v] : alpha_importance(*ckpt.adapters))
    aj.push_back({{"layer", id.layer}, {"kind", kind_name(id.kind)},
                  {"alpha_importance", v}});
  spill(path("alpha_report.json"), aj.dump(2) + "\n");
  record_artifact("score", "alpha_report.json");
}

void Run::allocate() {
  require_artifact("score_report.json");
  HybridScoreReport report = read_score_report(path("score_report.json"));
  Model model(cfg_.model);
  std::map<ModuleId, std::size_t> params;
  for (const auto& [id, p] : model.candidate_modules()) params[id] = p;
  AllocationPlan plan =
      cfg_.direction == AllocationDirection::AscendingFromLora
          ? hlora::allocate(report, params, cfg_.r_fft)
          : allocate_from_full(report, params, cfg_.r_fft);
  plan.report_digest = digest_hex(file_digest(path("score_report.json")));
  PlanCheck check = validate_plan(plan, model.universe(), params);
  if (!check.ok) throw InvariantError("allocation plan invalid: " + check.diagnostic);
  write_plan(path("plan.json"), plan);
  record_artifact("allocate", "plan.json");
  write_grid_csv(path("grid.csv"), plan, cfg_.model.num_layers);
  record_artifact("allocate", "grid.csv");
}

void Run::train() {
  require_artifact("m0.ckpt");
  require_artifact("plan.json");
  LoadedCheckpoint ckpt = load_checkpoint(path("m0.ckpt"));
  AllocationPlan plan = read_plan(path("plan.json"));
  const auto universe = ckpt.model.universe();
  {
    std::set<ModuleId> joined = plan.fft_set;
    joined.insert(plan.lora_set.begin(), plan.lora_set.end());
    if (joined != universe) {
      std::ostringstream os;
      os << "plan universe mismatch: plan covers {";
      for (const auto& id : joined) os << id.str() << " ";
      os << "} but model has {";
      for (const auto& id : universe) os << id.str() << " ";
      os << "}";
      throw ValidationError(os.str());
    }
  }
  const TaskGenerator task(cfg_.task);
  HybridTrainResult result =
      hybrid_train(ckpt.model, plan, task, cfg_.train, cfg_.grpo, cfg_.rank);
  save_checkpoint(path("final.ckpt"), ckpt.model, &result.adapters);
  record_artifact("train", "final.ckpt");
  write_metrics_csv(path("metrics.csv"), result.log);
  record_artifact("train", "metrics.csv");
}

void Run::oracle() {
  require_artifact("probe.ckpt");
  LoadedCheckpoint ckpt = load_checkpoint(path("probe.ckpt"));
  if (!ckpt.adapters)
    throw InvariantError("probe checkpoint carries no LoRA state");
  const TaskGenerator task(cfg_.task);
  std::mt19937_64 val_rng(mix64(cfg_.task.seed, 0x73636f7265ull));
  const auto batches = task.make_batches(
      static_cast<std::size_t>(cfg_.partitions),
      static_cast<std::size_t>(cfg_.train.batch_size), val_rng);
  const auto scores = perturbation_scores(ckpt.model, *ckpt.adapters, batches);

  // mu ranking comes from the score report when present, otherwise from a
  // fresh scoring pass over the same batches
  std::map<ModuleId, double> mu;
  if (fs::exists(path("score_report.json"))) {
    for (const auto& ms : read_score_report(path("score_report.json")).modules)
      mu[ms.module] = ms.mu;
  } else {
    auto records = collect_sensitivities(ckpt.model, *ckpt.adapters, batches,
                                         cfg_.partition_seed);
    for (const auto& rec : records) {
      double m = 0.0;
      for (double s : rec.samples) m += s;
      mu[rec.module] = m / static_cast<double>(rec.samples.size());
    }
  }
  std::vector<double> mu_vec, p_vec;
  ordered_json mods = ordered_json::array();
  for (const auto& [id, p] : scores) {
    mu_vec.push_back(mu.at(id));
    p_vec.push_back(p);
    mods.push_back({{"layer", id.layer}, {"kind", kind_name(id.kind)},
                    {"perturbation", p}, {"mu", mu.at(id)}});
  }
  ordered_json j;
  j["modules"] = std::move(mods);
  j["spearman_mu_vs_perturbation"] = spearman(mu_vec, p_vec);
  j["validation_evaluations"] = 1 + scores.size();
  spill(path("oracle.json"), j.dump(2) + "\n");
  record_artifact("oracle", "oracle.json");
}

void Run::pipeline() {
  probe();
  score();
  allocate();
  train();
}

std::string Run::report() const {
  std::ostringstream os;
  os << "run directory: " << dir_.string() << "\n";
  const fs::path mpath = dir_ / "manifest.json";
  if (!fs::exists(mpath)) {
    os << "no stages completed yet\n";
    return os.str();
  }
  const auto manifest = json::parse(slurp(mpath));
  os << "completed stages:";
  const json stages = manifest.value("stages", json::object());
  for (const auto& [stage, _] : stages.items()) os << " " << stage;
  os << "\nartifacts:\n";
  const json artifacts = manifest.value("artifacts", json::object());
  for (const auto& [name, digest] : artifacts.items())
    os << "  " << name << "  " << digest.get<std::string>() << "\n";
  if (fs::exists(dir_ / "metrics.csv")) os << "metrics:\n" << slurp(dir_ / "metrics.csv");
  return os.str();
}

}  // namespace hlora
