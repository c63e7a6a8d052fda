#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hlora/allocator.hpp"
#include "hlora/tasks.hpp"

namespace hlora {

enum class Objective { Supervised, Grpo };

std::string objective_name(Objective o);
Objective objective_from_name(const std::string& name);

struct TrainConfig {
  double lr_fft = 4e-5;
  double lr_lora = 1e-3;
  double pretrain_lr = 1e-3;  // supervised stand-in for the base checkpoint
  int pretrain_steps = 40;
  int warmup_steps = 500;  // probing warmup T_warm
  int total_steps = 300;
  int eval_every = 50;
  int batch_size = 8;
  std::uint64_t seed = 0;
  Objective objective = Objective::Grpo;

  void validate() const;
};

struct GrpoConfig {
  int group_size = 4;
  double clip = 0.2;
  double kl_beta = 0.01;
  double adv_epsilon = 1e-8;
  double temperature = 1.0;
  int max_gen_len = 8;

  void validate() const;
};

struct GroupSample {
  std::vector<int> prompt;
  std::vector<std::vector<int>> responses;        // G responses
  std::vector<std::vector<double>> old_logps;     // per-token, sampling policy
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// Adam over parameter groups with per-group learning rates.
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void add_group(std::vector<Tensor> params, double lr);
  void step();
  void zero_grad();
  std::vector<Tensor> all_params() const;

 private:
  struct Slot {
    Tensor param;
    double lr;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

// One supervised cross-entropy step over the batch; returns the loss.
double supervised_step(const Model& model, const Batch& batch,
                       AdamOptimizer& opt);

// G temperature-scaled ancestral samples with per-token log-probabilities
// recorded under the sampling policy. Rewards/advantages are left unfilled.
GroupSample sample_group(const Model& policy, const std::vector<int>& prompt,
                         int group_size, double temperature, int max_gen_len,
                         std::mt19937_64& rng);

// Group-normalized advantages with population variance and stabilizer eps.
std::vector<double> compute_advantages(const std::vector<double>& rewards,
                                       double eps);

// Negated clipped-surrogate objective plus beta * KL. new_logps are
// differentiable per-response token log-probabilities; kl_mean is the exact
// per-token KL against the reference policy averaged the same way (pass an
// undefined tensor to skip the KL term).
Tensor grpo_loss(const std::vector<Tensor>& new_logps,
                 const std::vector<std::vector<double>>& old_logps,
                 const std::vector<double>& advantages, double eps_clip,
                 const Tensor& kl_mean, double beta);

// Differentiable per-token KL of the current policy against reference
// log-softmax rows (constants), averaged over rows.
Tensor kl_from_logits(const Tensor& new_log_softmax_rows,
                      const std::vector<double>& ref_log_softmax_rows);

// One GRPO update over a batch of prompts; returns mean sampled reward.
double grpo_step(const Model& policy, const Model& reference,
                 const TaskGenerator& task, const GrpoConfig& gcfg,
                 int batch_size, AdamOptimizer& opt, std::mt19937_64& rng);

// Mean reward of sampled groups over deterministic eval prompts.
double evaluate_mean_reward(const Model& policy, const TaskGenerator& task,
                            int num_prompts, const GrpoConfig& gcfg,
                            std::uint64_t seed);

// All-LoRA probing warmup; base weights must stay bitwise-unchanged.
void probing_warmup(const Model& model, AdapterSet& adapters,
                    const TaskGenerator& task, const TrainConfig& cfg);

struct MetricRecord {
  int step = 0;
  std::string objective;
  double value = 0.0;
  std::string stage;
};

struct HybridTrainResult {
  AdapterSet adapters;         // branches on the lora_set modules
  std::vector<MetricRecord> log;
  double best_metric = 0.0;
  int best_step = 0;
};

// Final-stage training on a fresh base model under the allocation plan.
// The returned model state is the best-evaluation checkpoint.
HybridTrainResult hybrid_train(Model& model, const AllocationPlan& plan,
                               const TaskGenerator& task, const TrainConfig& tcfg,
                               const GrpoConfig& gcfg, int lora_rank);

}  // namespace hlora
