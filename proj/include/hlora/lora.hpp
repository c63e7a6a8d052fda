#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>

#include "hlora/module_id.hpp"
#include "hlora/tensor.hpp"

namespace hlora {

class Model;

// SVD-style low-rank branch: delta(x) = alpha * (x A) diag(e) B, gated by the
// mask bit z. e starts at zero so a fresh branch is a functional no-op.
struct LoraBranch {
  Tensor A;      // d_in x r
  Tensor e;      // r, diagonal coefficients
  Tensor B;      // r x d_out
  Tensor alpha;  // trainable scalar, init 1.0
  int rank = 0;
  bool enabled = true;  // the mask bit z

  // Branch contribution for input x (n x d_in); zero matrix when disabled.
  Tensor delta(const Tensor& x) const;

  std::size_t param_count() const;
  void set_trainable(bool trainable);
  std::vector<Tensor> parameters() const;
};

// One branch per adapted module, all at the same rank.
class AdapterSet {
 public:
  AdapterSet() = default;

  int rank() const { return rank_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return branches_.size(); }
  bool has(const ModuleId& id) const;
  LoraBranch& at(const ModuleId& id);
  const LoraBranch& at(const ModuleId& id) const;
  std::vector<ModuleId> ids() const;  // canonical (layer, kind) order

  // Masks off exactly the listed branches; all others are enabled.
  void set_masks(const std::set<ModuleId>& disabled);
  void enable_all();

  std::vector<Tensor> parameters() const;
  void zero_grads();

  friend AdapterSet attach_lora(Model& model, const std::set<ModuleId>& targets,
                                int rank, std::uint64_t seed);

 private:
  std::map<ModuleId, std::shared_ptr<LoraBranch>> branches_;
  int rank_ = 0;
  std::uint64_t seed_ = 0;
};

}  // namespace hlora
