// Acceptance suite: one line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "hlora/pipeline.hpp"

using namespace hlora;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void criterion(const std::string& name, const std::function<void()>& body) {
  const auto start = std::chrono::steady_clock::now();
  std::string failure;
  try {
    body();
  } catch (const std::exception& e) {
    failure = e.what();
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  if (failure.empty()) {
    std::printf("PASS  %-28s (%.1fs)\n", name.c_str(), secs);
  } else {
    ++g_failures;
    std::printf("FAIL  %-28s (%.1fs): %s\n", name.c_str(), secs,
                failure.c_str());
  }
  std::fflush(stdout);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

ModelConfig small_model(int d_model, int layers, std::uint64_t seed) {
  ModelConfig c;
  c.num_layers = layers;
  c.d_model = d_model;
  c.num_heads = d_model >= 32 ? 4 : 2;
  c.d_ff = d_model + d_model / 2;
  c.vocab_size = 14;
  c.max_seq_len = 16;
  c.seed = seed;
  return c;
}

Batch addition_batch(std::uint64_t seed, std::size_t n) {
  TaskConfig tc;
  tc.kind = TaskKind::ModularAddition;
  tc.modulus = 7;
  tc.seed = seed;
  std::mt19937_64 rng(seed);
  return TaskGenerator(tc).make_batch(n, rng);
}

AdapterSet attach_with_signal(Model& model, int rank, std::uint64_t seed) {
  AdapterSet set = attach_lora(model, model.universe(), rank, seed);
  std::mt19937_64 rng(mix64(seed, 0xe5eedull));
  for (auto& id : set.ids())
    for (double& v : set.at(id).e.values())
      v = std::normal_distribution<double>(0.0, 0.1)(rng);
  return set;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("hlora_accept_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// ---- criteria --------------------------------------------------------------

// Analytic e-gradients of the supervised validation loss vs central finite
// differences, all 14 modules of a 2-layer d_model=32 model.
void gradient_fidelity() {
  Model model(small_model(32, 2, 1));
  AdapterSet set = attach_with_signal(model, 4, 2);
  Batch batch = addition_batch(3, 2);
  for (auto& id : set.ids()) set.at(id).set_trainable(true);

  auto loss_fn = [&] {
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < batch.inputs.size(); ++i)
      total = add(total,
                  scale(cross_entropy(model.forward(batch.inputs[i]),
                                      batch.targets[i]),
                        1.0 / static_cast<double>(batch.inputs.size())));
    return total;
  };
  for (auto& id : set.ids()) {
    double err = finite_difference_check(loss_fn, set.at(id).e, 1e-5);
    require(err < 1e-4, id.str() + ": relative gradient error " +
                            std::to_string(err) + " >= 1e-4");
  }
}

// Two complementary masked passes accumulate the same e-gradient as one
// single-active pass, over 100 random partitions; the disabled pass
// contributes exactly zero.
void complementary_masking() {
  Model model(small_model(16, 2, 4));
  AdapterSet set = attach_with_signal(model, 2, 5);
  for (auto& id : set.ids()) set.at(id).set_trainable(true);
  Batch batch = addition_batch(6, 2);
  const auto universe = model.universe();

  for (std::uint64_t t = 0; t < 100; ++t) {
    auto [bucket_a, bucket_b] = random_partition(universe, 7, t);

    // each pass in isolation: the disabled bucket accumulates exactly zero,
    // and the active bucket's gradient is recorded as the reference
    std::map<ModuleId, std::vector<double>> active_pass;
    set.zero_grads();
    masked_pass(model, set, batch, bucket_b);
    for (auto& id : bucket_b)
      for (double g : set.at(id).e.grad())
        require(g == 0.0, "disabled module " + id.str() +
                              " received gradient in partition " +
                              std::to_string(t));
    for (auto& id : bucket_a) active_pass[id] = set.at(id).e.grad();
    set.zero_grads();
    masked_pass(model, set, batch, bucket_a);
    for (auto& id : bucket_a)
      for (double g : set.at(id).e.grad())
        require(g == 0.0, "disabled module " + id.str() +
                              " received gradient in partition " +
                              std::to_string(t));
    for (auto& id : bucket_b) active_pass[id] = set.at(id).e.grad();

    // both passes accumulated: every module carries its active-pass gradient
    set.zero_grads();
    masked_pass(model, set, batch, bucket_b);
    masked_pass(model, set, batch, bucket_a);
    for (auto& id : set.ids()) {
      auto two = set.at(id).e.grad();
      auto& one = active_pass[id];
      for (std::size_t k = 0; k < two.size(); ++k)
        require(std::abs(two[k] - one[k]) < 1e-10,
                id.str() + ": two-pass gradient deviates by " +
                    std::to_string(std::abs(two[k] - one[k])));
    }
  }
}

void score_arithmetic() {
  require(std::abs(batch_sensitivity({1.0, 2.0}, {0.5, -0.5}, 2) - 0.75) <
              1e-12,
          "batch sensitivity fixture");
  SensitivityRecord rec{{1, ModuleKind::Query}, {0.2, 0.4}};
  auto expect = [&](ScoreVariant v, double want) {
    auto rep = hybrid_score({rec}, v, 0);
    require(std::abs(rep.modules[0].score - want) < 1e-12,
            variant_name(v) + " fixture: got " +
                std::to_string(rep.modules[0].score));
  };
  expect(ScoreVariant::Product, 0.03);
  expect(ScoreVariant::Ratio, 3.0);
  expect(ScoreVariant::InverseRatio, 0.1 / 0.3);
  expect(ScoreVariant::Additive, 0.35);
}

void allocation_feasibility() {
  std::mt19937_64 rng(99);
  for (int instance = 0; instance < 1000; ++instance) {
    const int layers = 1 + static_cast<int>(rng() % 4);
    HybridScoreReport rep;
    rep.T = 2;
    std::map<ModuleId, std::size_t> params;
    std::set<ModuleId> universe;
    const bool uniform = instance % 3 == 0;
    for (int l = 1; l <= layers; ++l) {
      for (ModuleKind k : kAllKinds) {
        ModuleId id{l, k};
        ModuleScore ms;
        ms.module = id;
        ms.score = std::uniform_real_distribution<double>(0, 1)(rng);
        ms.samples = {ms.score, ms.score};
        rep.modules.push_back(ms);
        params[id] = uniform ? 100 : 1 + rng() % 4000;
        universe.insert(id);
      }
    }
    const double r_fft = std::uniform_real_distribution<double>(0.02, 0.98)(rng);

    auto plan = allocate(rep, params, r_fft);
    auto chk = validate_plan(plan, universe, params);
    require(chk.ok, "instance " + std::to_string(instance) + ": " + chk.diagnostic);

    auto pruned = allocate_from_full(rep, params, r_fft);
    auto chk2 = validate_plan(pruned, universe, params);
    require(chk2.ok,
            "instance " + std::to_string(instance) + " (pruning): " + chk2.diagnostic);

    // direction agreement under uniform costs (scores are a.s. distinct)
    if (uniform)
      require(plan.fft_set == pruned.fft_set,
              "instance " + std::to_string(instance) +
                  ": directions disagree under uniform costs");

    // monotonicity: a larger budget never shrinks the FFT set
    auto larger = allocate(rep, params, std::min(0.99, r_fft + 0.2));
    for (auto& id : plan.fft_set)
      require(larger.fft_set.count(id) == 1,
              "instance " + std::to_string(instance) +
                  ": FFT set not monotone in the budget");
  }
}

void grpo_mechanics() {
  auto adv = compute_advantages({1, 0, 0, 0}, 0.0);
  require(std::abs(adv[0] - 1.7321) < 1e-4, "advantage fixture a0");
  for (int i = 1; i < 4; ++i)
    require(std::abs(adv[i] + 0.5774) < 1e-4, "advantage fixture a" + std::to_string(i));

  auto single = [](double rho, double a, double eps) {
    double old_lp = -1.0;
    Tensor new_lp = Tensor::from({1}, {old_lp + std::log(rho)}, true);
    Tensor loss = grpo_loss({new_lp}, {{old_lp}}, {a}, eps, Tensor(), 0.0);
    backward(loss);
    return std::make_pair(-loss.item(), new_lp.grad()[0]);
  };
  auto [l1, g1] = single(1.5, 1.0, 0.2);
  require(std::abs(l1 - 1.2) < 1e-12, "clipped surrogate fixture rho=1.5");
  require(g1 == 0.0, "clip-region gradient not zeroed (rho=1.5, A=1)");
  auto [l2, g2] = single(0.5, -1.0, 0.2);
  require(std::abs(l2 + 0.8) < 1e-12, "clipped surrogate fixture rho=0.5");
  require(g2 == 0.0, "clip-region gradient not zeroed (rho=0.5, A=-1)");

  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor p = log_softmax_rows(Tensor::randn({2, 8}, rng, 2.0));
    Tensor q = log_softmax_rows(Tensor::randn({2, 8}, rng, 2.0));
    require(kl_from_logits(p, q.values()).item() >= 0.0, "KL negative");
  }
  Tensor p = log_softmax_rows(Tensor::randn({2, 8}, rng, 2.0));
  require(std::abs(kl_from_logits(p, p.values()).item()) < 1e-12,
          "KL nonzero at parameter equality");
}

// One branch trained, all others at e=0: it tops both the mu ranking and the
// perturbation ranking, and the two rankings agree.
void planted_signal() {
  Model model(small_model(16, 2, 8));
  AdapterSet set = attach_lora(model, model.universe(), 2, 9);
  for (auto& id : set.ids()) set.at(id).set_trainable(true);

  const ModuleId planted{2, ModuleKind::Down};
  std::mt19937_64 rng(10);
  TaskConfig tc;
  tc.kind = TaskKind::ModularAddition;
  tc.modulus = 7;
  TaskGenerator gen(tc);
  Batch train_batch = gen.make_batch(8, rng);
  for (int step = 0; step < 80; ++step) {
    set.zero_grads();
    masked_pass(model, set, train_batch, {});
    auto g = set.at(planted).e.grad();
    auto& e = set.at(planted).e.values();
    for (std::size_t i = 0; i < e.size(); ++i) e[i] -= 0.5 * g[i];
  }

  std::mt19937_64 vrng(11);
  auto batches = gen.make_batches(20, 4, vrng);
  auto records = collect_sensitivities(model, set, batches, 13);
  auto report = hybrid_score(records, ScoreVariant::Product, 13);

  std::vector<double> mu_vec, p_vec;
  double planted_mu = 0, max_other_mu = 0;
  std::map<ModuleId, double> mu;
  for (auto& ms : report.modules) mu[ms.module] = ms.mu;
  auto perturb = perturbation_scores(model, set, batches);
  double planted_p = perturb.at(planted), max_other_p = 0;
  for (auto& [id, pval] : perturb) {
    mu_vec.push_back(mu.at(id));
    p_vec.push_back(pval);
    if (id == planted) {
      planted_mu = mu.at(id);
    } else {
      max_other_mu = std::max(max_other_mu, mu.at(id));
      max_other_p = std::max(max_other_p, pval);
    }
  }
  require(planted_mu > max_other_mu, "planted module does not top the mu ranking");
  require(planted_p > max_other_p,
          "planted module does not top the perturbation ranking");
  const double rho = spearman(mu_vec, p_vec);
  require(rho >= 0.8, "Spearman " + std::to_string(rho) + " < 0.8");
}

std::string smoke_config(std::uint64_t sampling_seed) {
  std::ostringstream os;
  os << R"({
  "model": {"num_layers": 2, "d_model": 16, "num_heads": 2, "d_ff": 24,
            "vocab_size": 14, "max_seq_len": 16, "seed": 11},
  "rank": 4,
  "r_fft": 0.10,
  "partitions": 20,
  "task": {"kind": "modular-addition", "modulus": 5, "seed": 21},
  "train": {"pretrain_steps": 100, "warmup_steps": 200, "total_steps": 400,
            "eval_every": 50, "batch_size": 8, "objective": "grpo",
            "lr_lora": 1e-2, "lr_fft": 4e-4},
  "grpo": {"group_size": 4, "clip": 0.2, "kl_beta": 0.01, "max_gen_len": 4,
           "temperature": 0.8},
  "seeds": {"partition": 2, "sampling": )"
     << sampling_seed << R"(}
})";
  return os.str();
}

// Full probe -> score -> allocate -> GRPO pipeline; the trained policy's mean
// group reward must beat the base checkpoint's by 0.2 absolute, averaged over
// three sampling seeds, with the freeze contract intact.
void pipeline_smoke() {
  double total_gain = 0.0;
  const std::uint64_t seeds[3] = {3, 4, 5};
  for (std::uint64_t seed : seeds) {
    fs::path dir = fresh_dir("smoke_" + std::to_string(seed));
    fs::path cfg_path = dir / "config.json";
    std::ofstream(cfg_path) << smoke_config(seed);
    Run run(cfg_path, "", dir / "out", false);
    run.pipeline();

    const RunConfig& cfg = run.config();
    TaskGenerator gen(cfg.task);
    LoadedCheckpoint m0 = load_checkpoint(run.path("m0.ckpt"));
    LoadedCheckpoint trained = load_checkpoint(run.path("final.ckpt"));
    AllocationPlan plan = read_plan(run.path("plan.json"));

    require(!plan.fft_set.empty(), "empty FFT set leaves nothing to verify");
    require(trained.model.base_digest(plan.lora_set) ==
                m0.model.base_digest(plan.lora_set),
            "lora_set base weights changed during training");
    require(trained.model.base_digest(plan.fft_set) !=
                m0.model.base_digest(plan.fft_set),
            "fft_set base weights did not change during training");

    const double base =
        evaluate_mean_reward(m0.model, gen, 32, cfg.grpo, 777);
    const double tuned =
        evaluate_mean_reward(trained.model, gen, 32, cfg.grpo, 777);
    total_gain += tuned - base;
  }
  const double mean_gain = total_gain / 3.0;
  require(mean_gain >= 0.2, "mean reward gain " + std::to_string(mean_gain) +
                                " < 0.2 over 3 seeds");
}

// Byte-identical reports, plans, and metrics logs across reruns.
void determinism() {
  fs::path d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
  fs::path cfg_path = d1 / "config.json";
  std::ofstream(cfg_path) << R"({
  "model": {"num_layers": 1, "d_model": 8, "num_heads": 2, "d_ff": 12,
            "vocab_size": 14, "max_seq_len": 16, "seed": 11},
  "rank": 2,
  "partitions": 2,
  "task": {"kind": "modular-addition", "modulus": 5, "seed": 1},
  "train": {"pretrain_steps": 4, "warmup_steps": 4, "total_steps": 4,
            "eval_every": 2, "batch_size": 2, "objective": "supervised"},
  "grpo": {"max_gen_len": 4}
})";
  for (auto* dir : {&d1, &d2}) {
    Run run(cfg_path, "", *dir / "out", false);
    run.pipeline();
  }
  for (const char* name : {"score_report.json", "plan.json", "grid.csv",
                           "metrics.csv", "config.resolved.json"})
    require(slurp(d1 / "out" / name) == slurp(d2 / "out" / name),
            std::string(name) + " differs between reruns");
}

}  // namespace

int main() {
  criterion("gradient-fidelity", gradient_fidelity);
  criterion("complementary-masking", complementary_masking);
  criterion("score-arithmetic", score_arithmetic);
  criterion("allocation-feasibility", allocation_feasibility);
  criterion("grpo-mechanics", grpo_mechanics);
  criterion("planted-signal", planted_signal);
  criterion("pipeline-smoke", pipeline_smoke);
  criterion("determinism", determinism);
  if (g_failures > 0) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
