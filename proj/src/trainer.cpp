#include "hlora/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hlora {

std::string objective_name(Objective o) {
  return o == Objective::Supervised ? "supervised" : "grpo";
}

Objective objective_from_name(const std::string& name) {
  if (name == "supervised") return Objective::Supervised;
  if (name == "grpo") return Objective::Grpo;
  throw std::invalid_argument("unknown objective \"" + name + "\"");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("TrainConfig: " + msg);
  };
  if (lr_fft <= 0.0) fail("lr_fft must be > 0");
  if (lr_lora <= 0.0) fail("lr_lora must be > 0");
  if (pretrain_lr <= 0.0) fail("pretrain_lr must be > 0");
  if (pretrain_steps < 0) fail("pretrain_steps must be >= 0");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (eval_every > total_steps) fail("eval_every must be <= total_steps");
  if (batch_size < 1) fail("batch_size must be >= 1");
}

void GrpoConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("GrpoConfig: " + msg);
  };
  if (group_size < 2) fail("group_size must be >= 2");
  if (clip <= 0.0) fail("clip must be > 0");
  if (kl_beta < 0.0) fail("kl_beta must be >= 0");
  if (adv_epsilon <= 0.0) fail("adv_epsilon must be > 0");
  if (temperature < 0.0) fail("temperature must be >= 0");
  if (max_gen_len < 1) fail("max_gen_len must be >= 1");
}

// ---- Adam -----------------------------------------------------------------

AdamOptimizer::AdamOptimizer(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::add_group(std::vector<Tensor> params, double lr) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    slots_.push_back({p, lr, std::vector<double>(p.size(), 0.0),
                      std::vector<double>(p.size(), 0.0)});
  }
}

void AdamOptimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& s : slots_) {
    const std::vector<double> g = s.param.grad();
    auto& vals = s.param.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      vals[i] -= s.lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

std::vector<Tensor> AdamOptimizer::all_params() const {
  std::vector<Tensor> out;
  for (const auto& s : slots_) out.push_back(s.param);
  return out;
}

// ---- supervised -----------------------------------------------------------

double supervised_step(const Model& model, const Batch& batch,
                       AdamOptimizer& opt) {
  if (batch.inputs.empty())
    throw std::invalid_argument("supervised_step: empty batch");
  opt.zero_grad();
  double total = 0.0;
  for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
    Tensor loss = scale(
        cross_entropy(model.forward(batch.inputs[i]), batch.targets[i]),
        1.0 / static_cast<double>(batch.inputs.size()));
    backward(loss);
    total += loss.item();
  }
  opt.step();
  return total;
}

// ---- GRPO -----------------------------------------------------------------

namespace {

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

GroupSample sample_group(const Model& policy, const std::vector<int>& prompt,
                         int group_size, double temperature, int max_gen_len,
                         std::mt19937_64& rng) {
  if (group_size < 2)
    throw std::invalid_argument("sample_group: group_size must be >= 2");
  GroupSample group;
  group.prompt = prompt;
  const int vocab = policy.config().vocab_size;
  for (int g = 0; g < group_size; ++g) {
    std::vector<int> ctx = prompt;
    std::vector<int> response;
    std::vector<double> logps;
    for (int step = 0; step < max_gen_len; ++step) {
      if (static_cast<int>(ctx.size()) >= policy.config().max_seq_len) break;
      Tensor logits = policy.forward(ctx);
      const std::size_t last = logits.rows() - 1;
      // stable log-softmax of the last row at the sampling temperature
      std::vector<double> row(vocab);
      int argmax = 0;
      for (int j = 0; j < vocab; ++j) {
        row[j] = logits(last, static_cast<std::size_t>(j));
        if (row[j] > row[argmax]) argmax = j;
      }
      int chosen;
      if (temperature < 1e-12) {
        chosen = argmax;  // greedy limit
      } else {
        double z = 0.0;
        std::vector<double> p(vocab);
        for (int j = 0; j < vocab; ++j) {
          p[j] = std::exp((row[j] - row[argmax]) / temperature);
          z += p[j];
        }
        double u = uniform01(rng) * z;
        chosen = vocab - 1;
        double acc = 0.0;
        for (int j = 0; j < vocab; ++j) {
          acc += p[j];
          if (u <= acc) {
            chosen = j;
            break;
          }
        }
      }
      // log-probability of the chosen token under the (untempered) policy,
      // so a later recomputation through the loss path reproduces it exactly
      double z = 0.0;
      for (int j = 0; j < vocab; ++j) z += std::exp(row[j] - row[argmax]);
      logps.push_back(row[chosen] - row[argmax] - std::log(z));
      response.push_back(chosen);
      ctx.push_back(chosen);
      if (chosen == tok::kEos) break;
    }
    group.responses.push_back(std::move(response));
    group.old_logps.push_back(std::move(logps));
  }
  return group;
}

std::vector<double> compute_advantages(const std::vector<double>& rewards,
                                       double eps) {
  if (rewards.empty())
    throw std::invalid_argument("compute_advantages: empty rewards");
  const double n = static_cast<double>(rewards.size());
  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  var /= n;
  const double sigma = std::sqrt(var + eps);
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i)
    adv[i] = (rewards[i] - mu) / sigma;
  return adv;
}

Tensor kl_from_logits(const Tensor& new_log_softmax_rows,
                      const std::vector<double>& ref_log_softmax_rows) {
  if (new_log_softmax_rows.size() != ref_log_softmax_rows.size())
    throw std::invalid_argument("kl_from_logits: row size mismatch");
  Tensor ref = Tensor::from(new_log_softmax_rows.shape(),
                            ref_log_softmax_rows);
  Tensor per_elem =
      mul(exp(new_log_softmax_rows), sub(new_log_softmax_rows, ref));
  // sum over vocab, mean over rows
  return scale(sum(per_elem),
               1.0 / static_cast<double>(new_log_softmax_rows.rows()));
}

Tensor grpo_loss(const std::vector<Tensor>& new_logps,
                 const std::vector<std::vector<double>>& old_logps,
                 const std::vector<double>& advantages, double eps_clip,
                 const Tensor& kl_mean, double beta) {
  const std::size_t G = new_logps.size();
  if (G == 0 || old_logps.size() != G || advantages.size() != G)
    throw std::invalid_argument("grpo_loss: group size mismatch");
  Tensor surrogate = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < G; ++i) {
    if (new_logps[i].size() != old_logps[i].size())
      throw std::invalid_argument(
          "grpo_loss: response " + std::to_string(i) + " has " +
          std::to_string(new_logps[i].size()) + " new log-probs vs " +
          std::to_string(old_logps[i].size()) + " stored");
    Tensor old_t = Tensor::from(new_logps[i].shape(), old_logps[i]);
    Tensor ratio = exp(sub(new_logps[i], old_t));
    Tensor unclipped = scale(ratio, advantages[i]);
    Tensor clipped = scale(clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip),
                           advantages[i]);
    Tensor token_terms = minimum(unclipped, clipped);
    surrogate = add(surrogate, scale(mean(token_terms), 1.0 / static_cast<double>(G)));
  }
  Tensor loss = scale(surrogate, -1.0);
  if (kl_mean.defined()) loss = add(loss, scale(kl_mean, beta));
  return loss;
}

double grpo_step(const Model& policy, const Model& reference,
                 const TaskGenerator& task, const GrpoConfig& gcfg,
                 int batch_size, AdamOptimizer& opt, std::mt19937_64& rng) {
  opt.zero_grad();
  double reward_sum = 0.0;
  int reward_count = 0;
  int used_groups = 0;
  const double inv_batch = 1.0 / static_cast<double>(batch_size);
  for (int b = 0; b < batch_size; ++b) {
    TaskExample ex = task.sample(rng);
    GroupSample group = sample_group(policy, ex.prompt, gcfg.group_size,
                                     gcfg.temperature, gcfg.max_gen_len, rng);
    for (const auto& resp : group.responses) {
      group.rewards.push_back(task.reward(ex.prompt, resp));
      reward_sum += group.rewards.back();
      ++reward_count;
    }
    group.advantages = compute_advantages(group.rewards, gcfg.adv_epsilon);

    std::vector<Tensor> new_logps;
    std::vector<Tensor> kl_parts;
    bool any_tokens = false;
    for (int i = 0; i < gcfg.group_size; ++i) {
      const auto& resp = group.responses[static_cast<std::size_t>(i)];
      if (resp.empty()) continue;
      any_tokens = true;
    }
    if (!any_tokens) continue;
    Tensor kl_mean = Tensor::scalar(0.0);
    std::vector<std::vector<double>> old_logps;
    std::vector<double> advantages;
    for (int i = 0; i < gcfg.group_size; ++i) {
      const auto& resp = group.responses[static_cast<std::size_t>(i)];
      if (resp.empty()) continue;
      std::vector<int> seq = ex.prompt;
      seq.insert(seq.end(), resp.begin(), resp.end());
      const std::size_t p = ex.prompt.size();
      Tensor ls = log_softmax_rows(policy.forward(seq));
      Tensor region = slice_rows(ls, p - 1, p - 1 + resp.size());
      new_logps.push_back(gather_rows(region, resp));
      old_logps.push_back(group.old_logps[static_cast<std::size_t>(i)]);
      advantages.push_back(group.advantages[static_cast<std::size_t>(i)]);
      if (gcfg.kl_beta > 0.0) {
        Tensor ref_ls = log_softmax_rows(reference.forward(seq));
        Tensor ref_region = slice_rows(ref_ls, p - 1, p - 1 + resp.size());
        kl_mean = add(kl_mean,
                      scale(kl_from_logits(region, ref_region.values()),
                            1.0 / static_cast<double>(gcfg.group_size)));
      }
    }
    Tensor loss = grpo_loss(new_logps, old_logps, advantages, gcfg.clip,
                            gcfg.kl_beta > 0.0 ? kl_mean : Tensor(),
                            gcfg.kl_beta);
    backward(scale(loss, inv_batch));
    ++used_groups;
  }
  if (used_groups > 0) opt.step();
  return reward_count > 0 ? reward_sum / static_cast<double>(reward_count) : 0.0;
}

double evaluate_mean_reward(const Model& policy, const TaskGenerator& task,
                            int num_prompts, const GrpoConfig& gcfg,
                            std::uint64_t seed) {
  std::mt19937_64 rng(mix64(seed, 0x65764cull));
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < num_prompts; ++i) {
    TaskExample ex = task.sample(rng);
    GroupSample group = sample_group(policy, ex.prompt, gcfg.group_size,
                                     gcfg.temperature, gcfg.max_gen_len, rng);
    for (const auto& resp : group.responses) {
      total += task.reward(ex.prompt, resp);
      ++count;
    }
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

// ---- stages ---------------------------------------------------------------

void probing_warmup(const Model& model, AdapterSet& adapters,
                    const TaskGenerator& task, const TrainConfig& cfg) {
  cfg.validate();
  const auto universe = model.universe();
  if (adapters.size() != universe.size())
    throw std::invalid_argument(
        "probing_warmup: adapters cover " + std::to_string(adapters.size()) +
        " modules, universe has " + std::to_string(universe.size()));
  for (const auto& id : universe)
    if (!adapters.has(id))
      throw std::invalid_argument("probing_warmup: no branch for " + id.str());

  AdamOptimizer opt;
  opt.add_group(adapters.parameters(), cfg.lr_lora);
  std::mt19937_64 rng(mix64(cfg.seed, 0x77617268ull));
  for (int step = 0; step < cfg.warmup_steps; ++step) {
    Batch batch = task.make_batch(static_cast<std::size_t>(cfg.batch_size), rng);
    supervised_step(model, batch, opt);
  }
}

namespace {

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.values());
  return out;
}

void restore(std::vector<Tensor>& params,
             const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = snap[i];
}

}  // namespace

HybridTrainResult hybrid_train(Model& model, const AllocationPlan& plan,
                               const TaskGenerator& task, const TrainConfig& tcfg,
                               const GrpoConfig& gcfg, int lora_rank) {
  tcfg.validate();
  gcfg.validate();
  const auto universe = model.universe();
  {
    std::map<ModuleId, std::size_t> params;
    for (const auto& [id, p] : model.candidate_modules()) params[id] = p;
    PlanCheck check = validate_plan(plan, universe, params);
    if (!check.ok)
      throw std::invalid_argument("hybrid_train: invalid plan: " + check.diagnostic);
  }

  // Reference policy is the incoming base checkpoint, frozen.
  Model reference(model.config());
  {
    auto src = model.base_parameters();
    auto dst = reference.base_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].values() = src[i].values();
    reference.token_embedding().values() = model.token_embedding().values();
    reference.position_embedding().values() = model.position_embedding().values();
    reference.unembedding().values() = model.unembedding().values();
  }

  HybridTrainResult result;
  result.adapters =
      attach_lora(model, plan.lora_set, lora_rank, mix64(tcfg.seed, 0x6c6f7261ull));
  for (const auto& id : plan.fft_set) model.module(id).set_trainable(true);

  AdamOptimizer opt;
  std::vector<Tensor> fft_params;
  for (const auto& id : plan.fft_set) {
    fft_params.push_back(model.module(id).weight);
    fft_params.push_back(model.module(id).bias);
  }
  if (!fft_params.empty()) opt.add_group(fft_params, tcfg.lr_fft);
  if (!plan.lora_set.empty()) opt.add_group(result.adapters.parameters(), tcfg.lr_lora);

  std::mt19937_64 rng(mix64(tcfg.seed, 0x747261696eull));
  std::mt19937_64 val_rng(mix64(tcfg.seed, 0x76616cull));
  const auto val_batches =
      task.make_batches(8, static_cast<std::size_t>(tcfg.batch_size), val_rng);

  auto params = opt.all_params();
  const bool maximize = tcfg.objective == Objective::Grpo;
  double best = maximize ? -1e300 : 1e300;
  std::vector<std::vector<double>> best_state = snapshot(params);
  int best_step = 0;

  for (int step = 1; step <= tcfg.total_steps; ++step) {
    if (tcfg.objective == Objective::Supervised) {
      Batch batch = task.make_batch(static_cast<std::size_t>(tcfg.batch_size), rng);
      supervised_step(model, batch, opt);
    } else {
      grpo_step(model, reference, task, gcfg, tcfg.batch_size, opt, rng);
    }
    if (step % tcfg.eval_every == 0) {
      double metric;
      if (tcfg.objective == Objective::Supervised) {
        metric = validation_loss(model, val_batches);
      } else {
        metric = evaluate_mean_reward(model, task, 16, gcfg, mix64(tcfg.seed, 0x6576616cull));
      }
      result.log.push_back({step, objective_name(tcfg.objective), metric, "final"});
      const bool improved = maximize ? metric > best : metric < best;
      if (improved) {
        best = metric;
        best_step = step;
        best_state = snapshot(params);
      }
    }
  }
  restore(params, best_state);
  result.best_metric = best;
  result.best_step = best_step;
  return result;
}

}  // namespace hlora
