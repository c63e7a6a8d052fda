#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "hlora/model.hpp"

namespace hlora {

// Single binary container: model config, all named parameter tensors, and
// attached LoRA state. Round-trips are bitwise-stable on values.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const AdapterSet* adapters = nullptr);

struct LoadedCheckpoint {
  Model model;
  std::optional<AdapterSet> adapters;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t file_digest(const std::filesystem::path& path);
std::string digest_hex(std::uint64_t digest);

}  // namespace hlora
