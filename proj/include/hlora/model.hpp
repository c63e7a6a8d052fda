#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hlora/lora.hpp"
#include "hlora/module_id.hpp"
#include "hlora/tensor.hpp"

namespace hlora {

struct ModelConfig {
  int num_layers = 2;
  int d_model = 32;
  int num_heads = 4;
  int d_ff = 64;
  int vocab_size = 32;
  int max_seq_len = 32;
  std::uint64_t seed = 0;

  void validate() const;  // throws with field-level diagnostics
  bool operator==(const ModelConfig&) const = default;
};

struct LinearModule {
  ModuleId id;
  Tensor weight;  // d_in x d_out
  Tensor bias;    // d_out
  bool trainable = false;
  std::shared_ptr<LoraBranch> branch;

  // x W + b, plus the LoRA branch contribution when one is attached.
  Tensor apply(const Tensor& x) const;
  std::size_t param_count() const;
  void set_trainable(bool t);
};

// Decoder-only pre-LN transformer. Embedding, positional table, unembedding
// and layer norms are frozen; only the seven projections per layer are
// candidates for adaptation.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return cfg_; }
  int num_layers() const { return cfg_.num_layers; }

  LinearModule& module(const ModuleId& id);
  const LinearModule& module(const ModuleId& id) const;

  std::size_t param_count(const ModuleId& id) const;
  // All 7*L candidates in canonical order with their FFT parameter counts.
  std::vector<std::pair<ModuleId, std::size_t>> candidate_modules() const;
  std::set<ModuleId> universe() const;

  // Logits of shape len x vocab_size for one token sequence.
  Tensor forward(std::span<const int> tokens) const;

  // Base weights and biases of the candidate modules, canonical order.
  std::vector<Tensor> base_parameters() const;
  void set_all_base_trainable(bool t);
  // FNV-1a digest over all base parameter bytes; detects any mutation.
  std::uint64_t base_digest() const;
  std::uint64_t base_digest(const std::set<ModuleId>& subset) const;

  Tensor& token_embedding() { return tok_embed_; }
  const Tensor& token_embedding() const { return tok_embed_; }
  Tensor& position_embedding() { return pos_embed_; }
  const Tensor& position_embedding() const { return pos_embed_; }
  Tensor& unembedding() { return unembed_; }
  const Tensor& unembedding() const { return unembed_; }

 private:
  struct Layer {
    LinearModule query, key, value, output, gate, up, down;
  };

  ModelConfig cfg_;
  Tensor tok_embed_;  // vocab x d_model, frozen
  Tensor pos_embed_;  // max_seq_len x d_model, frozen
  Tensor unembed_;    // d_model x vocab, frozen
  std::vector<Layer> layers_;
};

Model build_model(const ModelConfig& config);

// Attaches fresh SVD-style branches (A,B ~ N(0, 0.02^2), e = 0, alpha = 1)
// to the target modules and freezes their base weights.
AdapterSet attach_lora(Model& model, const std::set<ModuleId>& targets,
                       int rank, std::uint64_t seed);

// Folds an enabled branch into the base weight (W += alpha * A diag(e) B)
// and detaches it.
void merge_branch(LinearModule& module);

std::uint64_t fnv1a(const void* data, std::size_t len,
                    std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t tensor_digest(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ull);

}  // namespace hlora
