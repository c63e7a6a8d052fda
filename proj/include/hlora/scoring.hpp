#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hlora/model.hpp"

namespace hlora {

// One token sequence with next-token targets (-1 = ignored position).
struct Batch {
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> targets;
};

enum class ScoreVariant { Product, Ratio, InverseRatio, Additive };

std::string variant_name(ScoreVariant v);
ScoreVariant variant_from_name(const std::string& name);

struct SensitivityRecord {
  ModuleId module;
  std::vector<double> samples;  // one per validation batch, each >= 0
};

struct ModuleScore {
  ModuleId module;
  std::vector<double> samples;
  double mu = 0.0;
  double sigma = 0.0;
  double score = 0.0;
  int rank = 0;  // ascending, 1-based
  bool degenerate = false;  // ratio variant with zero denominator
};

struct HybridScoreReport {
  std::vector<ModuleScore> modules;  // canonical (layer, kind) order
  int T = 0;
  std::uint64_t partition_seed = 0;
  ScoreVariant variant = ScoreVariant::Product;
};

// Counter-based 50/50 split of the universe keyed by (seed, t); deterministic
// and independent across modules.
std::pair<std::set<ModuleId>, std::set<ModuleId>> random_partition(
    const std::set<ModuleId>& universe, std::uint64_t seed, std::uint64_t t);

// Cross-entropy on the batch with the listed branches masked off; gradients
// are accumulated into the existing e-gradient buffers. Masks are restored
// to all-on afterward.
double masked_pass(const Model& model, AdapterSet& adapters, const Batch& batch,
                   const std::set<ModuleId>& disabled);

// Batch sensitivity: (1/r) * ||e ⊙ g||_1.
double batch_sensitivity(const std::vector<double>& e,
                         const std::vector<double>& g, int rank);

// Runs T batches of complementary masked passes and collects per-module
// sensitivity lists.
std::vector<SensitivityRecord> collect_sensitivities(
    const Model& model, AdapterSet& adapters, const std::vector<Batch>& batches,
    std::uint64_t partition_seed);

// Aggregates sample lists into per-module scores and ascending ranks.
HybridScoreReport hybrid_score(const std::vector<SensitivityRecord>& records,
                               ScoreVariant variant, std::uint64_t partition_seed);

// |alpha| per module (architecture-parameter magnitude baseline).
std::map<ModuleId, double> alpha_importance(const AdapterSet& adapters);

// Mean validation loss over the given batches with current masks.
double validation_loss(const Model& model, const std::vector<Batch>& batches);

// Perturbation oracle: loss with one branch masked off minus the all-on loss.
double perturbation_score(const Model& model, AdapterSet& adapters,
                          const std::vector<Batch>& batches, const ModuleId& id);
// All modules at once; costs 1 + |U| full validation evaluations.
std::map<ModuleId, double> perturbation_scores(const Model& model,
                                               AdapterSet& adapters,
                                               const std::vector<Batch>& batches);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace hlora
