#include "hlora/allocator.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace hlora {

std::string direction_name(AllocationDirection d) {
  return d == AllocationDirection::AscendingFromLora ? "ascending-from-lora"
                                                     : "descending-from-fft";
}

AllocationDirection direction_from_name(const std::string& name) {
  if (name == "ascending-from-lora") return AllocationDirection::AscendingFromLora;
  if (name == "descending-from-fft") return AllocationDirection::DescendingFromFft;
  throw std::invalid_argument("unknown allocation direction \"" + name + "\"");
}

namespace {

struct Entry {
  ModuleId id;
  double score;
  std::size_t params;
};

std::vector<Entry> checked_entries(const HybridScoreReport& report,
                                   const std::map<ModuleId, std::size_t>& params,
                                   double r_fft) {
  if (r_fft <= 0.0 || r_fft >= 1.0)
    throw std::invalid_argument("allocate: R_fft must lie in (0,1), got " +
                                std::to_string(r_fft));
  if (report.modules.size() != params.size())
    throw std::invalid_argument("allocate: report covers " +
                                std::to_string(report.modules.size()) +
                                " modules but universe has " +
                                std::to_string(params.size()));
  std::vector<Entry> entries;
  entries.reserve(report.modules.size());
  for (const auto& ms : report.modules) {
    auto it = params.find(ms.module);
    if (it == params.end())
      throw std::invalid_argument("allocate: report module " + ms.module.str() +
                                  " not in universe");
    if (it->second == 0)
      throw std::invalid_argument("allocate: module " + ms.module.str() +
                                  " has zero parameters");
    entries.push_back({ms.module, ms.score, it->second});
  }
  // ascending score; ties by canonical (layer, kind) order
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score < b.score;
    return a.id < b.id;
  });
  return entries;
}

std::size_t total_param_count(const std::map<ModuleId, std::size_t>& params) {
  std::size_t total = 0;
  for (const auto& [_, p] : params) total += p;
  return total;
}

AllocationPlan finish(std::set<ModuleId> fft, const std::map<ModuleId, std::size_t>& params,
                      double r_fft, AllocationDirection dir) {
  AllocationPlan plan;
  plan.direction = dir;
  plan.budget_ratio = r_fft;
  plan.total_params = total_param_count(params);
  std::size_t used = 0;
  for (const auto& [id, p] : params) {
    if (fft.count(id)) {
      used += p;
    } else {
      plan.lora_set.insert(id);
    }
  }
  plan.fft_set = std::move(fft);
  plan.used_ratio = static_cast<double>(used) / static_cast<double>(plan.total_params);
  return plan;
}

}  // namespace

AllocationPlan allocate(const HybridScoreReport& report,
                        const std::map<ModuleId, std::size_t>& params,
                        double r_fft) {
  auto entries = checked_entries(report, params, r_fft);
  const std::size_t total = total_param_count(params);
  const double budget = r_fft * static_cast<double>(total);
  std::set<ModuleId> fft;
  std::size_t used = 0;
  for (const auto& e : entries) {
    if (static_cast<double>(used + e.params) > budget) break;  // prefix stop
    fft.insert(e.id);
    used += e.params;
  }
  return finish(std::move(fft), params, r_fft,
                AllocationDirection::AscendingFromLora);
}

AllocationPlan allocate_from_full(const HybridScoreReport& report,
                                  const std::map<ModuleId, std::size_t>& params,
                                  double r_fft) {
  auto entries = checked_entries(report, params, r_fft);
  const std::size_t total = total_param_count(params);
  const double budget = r_fft * static_cast<double>(total);
  std::set<ModuleId> fft;
  std::size_t used = total;
  for (const auto& e : entries) fft.insert(e.id);
  // move highest-scored modules out until the budget holds
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (static_cast<double>(used) <= budget) break;
    fft.erase(it->id);
    used -= it->params;
  }
  return finish(std::move(fft), params, r_fft,
                AllocationDirection::DescendingFromFft);
}

PlanCheck validate_plan(const AllocationPlan& plan,
                        const std::set<ModuleId>& universe,
                        const std::map<ModuleId, std::size_t>& params) {
  for (const auto& id : plan.fft_set) {
    if (plan.lora_set.count(id)) {
      return {false, "partition not disjoint: " + id.str() + " in both sets"};
    }
  }
  std::set<ModuleId> joined = plan.fft_set;
  joined.insert(plan.lora_set.begin(), plan.lora_set.end());
  if (joined != universe) {
    return {false, "partition not exhaustive: union has " +
                       std::to_string(joined.size()) + " of " +
                       std::to_string(universe.size()) + " modules"};
  }
  std::size_t total = 0, used = 0;
  for (const auto& [id, p] : params) {
    total += p;
    if (plan.fft_set.count(id)) used += p;
  }
  const double ratio = static_cast<double>(used) / static_cast<double>(total);
  if (ratio > plan.budget_ratio + 1e-12) {
    std::ostringstream os;
    os << "budget constraint violated: used ratio " << ratio
       << " exceeds R_fft " << plan.budget_ratio;
    return {false, os.str()};
  }
  return {true, ""};
}

}  // namespace hlora
