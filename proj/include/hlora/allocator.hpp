#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "hlora/scoring.hpp"

namespace hlora {

enum class AllocationDirection { AscendingFromLora, DescendingFromFft };

std::string direction_name(AllocationDirection d);
AllocationDirection direction_from_name(const std::string& name);

struct AllocationPlan {
  std::set<ModuleId> fft_set;
  std::set<ModuleId> lora_set;
  double budget_ratio = 0.0;  // R_fft
  double used_ratio = 0.0;
  std::size_t total_params = 0;
  AllocationDirection direction = AllocationDirection::AscendingFromLora;
  std::string report_digest;
};

// Greedy prefix rule: ascending by score, take the longest prefix whose
// cumulative parameter ratio stays within R_fft.
AllocationPlan allocate(const HybridScoreReport& report,
                        const std::map<ModuleId, std::size_t>& params,
                        double r_fft);

// Pruning-from-Full-FT direction: start all-FFT, move the highest-scored
// modules to LoRA until the budget holds.
AllocationPlan allocate_from_full(const HybridScoreReport& report,
                                  const std::map<ModuleId, std::size_t>& params,
                                  double r_fft);

struct PlanCheck {
  bool ok = true;
  std::string diagnostic;
};

PlanCheck validate_plan(const AllocationPlan& plan,
                        const std::set<ModuleId>& universe,
                        const std::map<ModuleId, std::size_t>& params);

}  // namespace hlora
