#include "hlora/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace hlora {

std::string variant_name(ScoreVariant v) {
  switch (v) {
    case ScoreVariant::Product: return "product";
    case ScoreVariant::Ratio: return "ratio";
    case ScoreVariant::InverseRatio: return "inverse-ratio";
    case ScoreVariant::Additive: return "additive";
  }
  throw std::invalid_argument("variant_name: bad enum value");
}

ScoreVariant variant_from_name(const std::string& name) {
  if (name == "product") return ScoreVariant::Product;
  if (name == "ratio") return ScoreVariant::Ratio;
  if (name == "inverse-ratio") return ScoreVariant::InverseRatio;
  if (name == "additive") return ScoreVariant::Additive;
  throw std::invalid_argument("unknown score variant \"" + name + "\"");
}

std::pair<std::set<ModuleId>, std::set<ModuleId>> random_partition(
    const std::set<ModuleId>& universe, std::uint64_t seed, std::uint64_t t) {
  if (universe.empty())
    throw std::invalid_argument("random_partition: empty universe");
  std::set<ModuleId> a, b;
  std::uint64_t i = 0;
  for (const auto& id : universe) {
    const std::uint64_t bit = mix64(seed, t, i++) & 1u;
    (bit ? a : b).insert(id);
  }
  return {a, b};
}

double masked_pass(const Model& model, AdapterSet& adapters, const Batch& batch,
                   const std::set<ModuleId>& disabled) {
  if (batch.inputs.empty()) throw std::invalid_argument("masked_pass: empty batch");
  adapters.set_masks(disabled);  // rejects ids without a branch
  double total = 0.0;
  for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
    Tensor logits = model.forward(batch.inputs[i]);
    Tensor loss = cross_entropy(logits, batch.targets[i]);
    Tensor scaled = scale(loss, 1.0 / static_cast<double>(batch.inputs.size()));
    backward(scaled);
    total += scaled.item();
  }
  adapters.enable_all();
  return total;
}

double batch_sensitivity(const std::vector<double>& e,
                         const std::vector<double>& g, int rank) {
  if (e.size() != g.size() || e.size() != static_cast<std::size_t>(rank))
    throw std::invalid_argument(
        "batch_sensitivity: length mismatch, e=" + std::to_string(e.size()) +
        " g=" + std::to_string(g.size()) + " r=" + std::to_string(rank));
  double acc = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) acc += std::abs(e[i] * g[i]);
  return acc / static_cast<double>(rank);
}

std::vector<SensitivityRecord> collect_sensitivities(
    const Model& model, AdapterSet& adapters, const std::vector<Batch>& batches,
    std::uint64_t partition_seed) {
  const auto ids = adapters.ids();
  std::vector<SensitivityRecord> records;
  records.reserve(ids.size());
  for (const auto& id : ids) records.push_back({id, {}});

  const std::set<ModuleId> universe(ids.begin(), ids.end());
  for (std::size_t t = 0; t < batches.size(); ++t) {
    auto [bucket_a, bucket_b] = random_partition(universe, partition_seed, t);
    for (const auto& id : ids) adapters.at(id).e.zero_grad();
    masked_pass(model, adapters, batches[t], bucket_a);
    masked_pass(model, adapters, batches[t], bucket_b);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const LoraBranch& br = adapters.at(ids[i]);
      records[i].samples.push_back(
          batch_sensitivity(br.e.values(), br.e.grad(), br.rank));
    }
  }
  return records;
}

HybridScoreReport hybrid_score(const std::vector<SensitivityRecord>& records,
                               ScoreVariant variant,
                               std::uint64_t partition_seed) {
  if (records.empty()) throw std::invalid_argument("hybrid_score: no records");
  const std::size_t T = records.front().samples.size();
  if (T < 2)
    throw std::invalid_argument("hybrid_score: need T >= 2 samples, got " +
                                std::to_string(T));
  for (const auto& r : records)
    if (r.samples.size() != T)
      throw std::invalid_argument("hybrid_score: ragged sample lists");

  HybridScoreReport report;
  report.T = static_cast<int>(T);
  report.partition_seed = partition_seed;
  report.variant = variant;
  for (const auto& rec : records) {
    ModuleScore ms;
    ms.module = rec.module;
    ms.samples = rec.samples;
    double mu = 0.0;
    for (double s : rec.samples) mu += s;
    mu /= static_cast<double>(T);
    double var = 0.0;
    for (double s : rec.samples) var += (s - mu) * (s - mu);
    // population form: 1/T under the radical
    const double sigma = std::sqrt(var / static_cast<double>(T));
    ms.mu = mu;
    ms.sigma = sigma;
    switch (variant) {
      case ScoreVariant::Product:
        ms.score = mu * sigma;
        break;
      case ScoreVariant::Ratio:
        if (sigma == 0.0) {
          ms.score = std::numeric_limits<double>::infinity();
          ms.degenerate = true;
        } else {
          ms.score = mu / sigma;
        }
        break;
      case ScoreVariant::InverseRatio:
        if (mu == 0.0) {
          ms.score = std::numeric_limits<double>::infinity();
          ms.degenerate = true;
        } else {
          ms.score = sigma / mu;
        }
        break;
      case ScoreVariant::Additive:
        ms.score = mu + 0.5 * sigma;
        break;
    }
    report.modules.push_back(std::move(ms));
  }
  std::sort(report.modules.begin(), report.modules.end(),
            [](const ModuleScore& a, const ModuleScore& b) {
              return a.module < b.module;
            });
  // ascending ranks; ties broken by canonical (layer, kind) order
  std::vector<std::size_t> order(report.modules.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return report.modules[a].score < report.modules[b].score;
  });
  for (std::size_t r = 0; r < order.size(); ++r)
    report.modules[order[r]].rank = static_cast<int>(r + 1);
  return report;
}

std::map<ModuleId, double> alpha_importance(const AdapterSet& adapters) {
  std::map<ModuleId, double> out;
  for (const auto& id : adapters.ids())
    out[id] = std::abs(adapters.at(id).alpha.item());
  return out;
}

double validation_loss(const Model& model, const std::vector<Batch>& batches) {
  if (batches.empty()) throw std::invalid_argument("validation_loss: no batches");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& batch : batches) {
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
      total += cross_entropy(model.forward(batch.inputs[i]), batch.targets[i]).item();
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double perturbation_score(const Model& model, AdapterSet& adapters,
                          const std::vector<Batch>& batches,
                          const ModuleId& id) {
  if (!adapters.has(id))
    throw std::invalid_argument("perturbation_score: no branch for " + id.str());
  adapters.enable_all();
  const double base = validation_loss(model, batches);
  adapters.set_masks({id});
  const double masked = validation_loss(model, batches);
  adapters.enable_all();
  return masked - base;
}

std::map<ModuleId, double> perturbation_scores(const Model& model,
                                               AdapterSet& adapters,
                                               const std::vector<Batch>& batches) {
  adapters.enable_all();
  const double base = validation_loss(model, batches);
  std::map<ModuleId, double> out;
  for (const auto& id : adapters.ids()) {
    adapters.set_masks({id});
    out[id] = validation_loss(model, batches) - base;
  }
  adapters.enable_all();
  return out;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman: need two equal-length vectors");
  auto avg_ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
      i = j + 1;
    }
    return ranks;
  };
  const auto ra = avg_ranks(a);
  const auto rb = avg_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace hlora
