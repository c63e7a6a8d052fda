#pragma once

#include <array>
#include <string>
#include <tuple>

namespace hlora {

// The seven adaptable linear projections per layer, in canonical order.
enum class ModuleKind { Query = 0, Key, Value, Output, Gate, Up, Down };

inline constexpr std::array<ModuleKind, 7> kAllKinds = {
    ModuleKind::Query, ModuleKind::Key,  ModuleKind::Value, ModuleKind::Output,
    ModuleKind::Gate,  ModuleKind::Up,   ModuleKind::Down};

std::string kind_name(ModuleKind k);
ModuleKind kind_from_name(const std::string& name);

struct ModuleId {
  int layer = 1;  // 1-based
  ModuleKind kind = ModuleKind::Query;

  auto operator<=>(const ModuleId&) const = default;
  std::string str() const;
};

}  // namespace hlora
