#include "hlora/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace hlora {

std::string kind_name(ModuleKind k) {
  switch (k) {
    case ModuleKind::Query: return "query";
    case ModuleKind::Key: return "key";
    case ModuleKind::Value: return "value";
    case ModuleKind::Output: return "output";
    case ModuleKind::Gate: return "gate";
    case ModuleKind::Up: return "up";
    case ModuleKind::Down: return "down";
  }
  throw std::invalid_argument("kind_name: bad enum value");
}

ModuleKind kind_from_name(const std::string& name) {
  for (ModuleKind k : kAllKinds)
    if (kind_name(k) == name) return k;
  throw std::invalid_argument("unknown module kind \"" + name + "\"");
}

std::string ModuleId::str() const {
  return "layer" + std::to_string(layer) + "." + kind_name(kind);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("ModelConfig: " + msg);
  };
  if (num_layers < 1) fail("num_layers must be >= 1, got " + std::to_string(num_layers));
  if (d_model < 1) fail("d_model must be >= 1, got " + std::to_string(d_model));
  if (num_heads < 1) fail("num_heads must be >= 1, got " + std::to_string(num_heads));
  if (d_model % num_heads != 0)
    fail("d_model (" + std::to_string(d_model) + ") not divisible by num_heads (" +
         std::to_string(num_heads) + ")");
  if (d_ff < 1) fail("d_ff must be >= 1, got " + std::to_string(d_ff));
  if (vocab_size < 1) fail("vocab_size must be >= 1, got " + std::to_string(vocab_size));
  if (max_seq_len < 1) fail("max_seq_len must be >= 1, got " + std::to_string(max_seq_len));
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t tensor_digest(const Tensor& t, std::uint64_t h) {
  return fnv1a(t.values().data(), t.values().size() * sizeof(double), h);
}

// ---- LinearModule ---------------------------------------------------------

Tensor LinearModule::apply(const Tensor& x) const {
  Tensor base = add_rowvec(matmul(x, weight), bias);
  if (branch) return add(base, branch->delta(x));
  return base;
}

std::size_t LinearModule::param_count() const {
  return weight.size() + bias.size();
}

void LinearModule::set_trainable(bool t) {
  trainable = t;
  weight.set_requires_grad(t);
  bias.set_requires_grad(t);
}

// ---- LoraBranch -----------------------------------------------------------

Tensor LoraBranch::delta(const Tensor& x) const {
  // z is applied as a 0/1 multiplier so a disabled branch stays on the tape
  // with exactly zero forward value and zero gradient.
  Tensor low = matmul(col_scale(matmul(x, A), e), B);
  return scale(scalar_mul(low, alpha), enabled ? 1.0 : 0.0);
}

std::size_t LoraBranch::param_count() const {
  return A.size() + e.size() + B.size() + alpha.size();
}

void LoraBranch::set_trainable(bool t) {
  A.set_requires_grad(t);
  e.set_requires_grad(t);
  B.set_requires_grad(t);
  alpha.set_requires_grad(t);
}

std::vector<Tensor> LoraBranch::parameters() const { return {A, e, B, alpha}; }

// ---- AdapterSet -----------------------------------------------------------

bool AdapterSet::has(const ModuleId& id) const { return branches_.count(id) > 0; }

LoraBranch& AdapterSet::at(const ModuleId& id) {
  auto it = branches_.find(id);
  if (it == branches_.end())
    throw std::invalid_argument("AdapterSet: no branch for " + id.str());
  return *it->second;
}

const LoraBranch& AdapterSet::at(const ModuleId& id) const {
  auto it = branches_.find(id);
  if (it == branches_.end())
    throw std::invalid_argument("AdapterSet: no branch for " + id.str());
  return *it->second;
}

std::vector<ModuleId> AdapterSet::ids() const {
  std::vector<ModuleId> out;
  out.reserve(branches_.size());
  for (const auto& [id, _] : branches_) out.push_back(id);
  return out;
}

void AdapterSet::set_masks(const std::set<ModuleId>& disabled) {
  for (const auto& id : disabled) {
    if (!branches_.count(id))
      throw std::invalid_argument("set_masks: no branch for " + id.str());
  }
  for (auto& [id, br] : branches_) br->enabled = disabled.count(id) == 0;
}

void AdapterSet::enable_all() { set_masks({}); }

std::vector<Tensor> AdapterSet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [id, br] : branches_)
    for (const auto& p : br->parameters()) out.push_back(p);
  return out;
}

void AdapterSet::zero_grads() {
  for (auto& p : parameters()) p.zero_grad();
}

// ---- Model ----------------------------------------------------------------

namespace {

LinearModule make_linear(ModuleId id, std::size_t d_in, std::size_t d_out,
                         std::mt19937_64& rng) {
  LinearModule m;
  m.id = id;
  m.weight = Tensor::randn({d_in, d_out}, rng, 1.0 / std::sqrt(double(d_in)));
  m.bias = Tensor::zeros({d_out});
  return m;
}

}  // namespace

Model::Model(const ModelConfig& config) : cfg_(config) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto ff = static_cast<std::size_t>(cfg_.d_ff);
  const auto v = static_cast<std::size_t>(cfg_.vocab_size);
  tok_embed_ = Tensor::randn({v, d}, rng, 1.0 / std::sqrt(double(d)));
  pos_embed_ = Tensor::randn({static_cast<std::size_t>(cfg_.max_seq_len), d},
                             rng, 1.0 / std::sqrt(double(d)));
  unembed_ = Tensor::randn({d, v}, rng, 1.0 / std::sqrt(double(d)));
  layers_.reserve(static_cast<std::size_t>(cfg_.num_layers));
  for (int l = 1; l <= cfg_.num_layers; ++l) {
    Layer layer{
        make_linear({l, ModuleKind::Query}, d, d, rng),
        make_linear({l, ModuleKind::Key}, d, d, rng),
        make_linear({l, ModuleKind::Value}, d, d, rng),
        make_linear({l, ModuleKind::Output}, d, d, rng),
        make_linear({l, ModuleKind::Gate}, d, ff, rng),
        make_linear({l, ModuleKind::Up}, d, ff, rng),
        make_linear({l, ModuleKind::Down}, ff, d, rng),
    };
    layers_.push_back(std::move(layer));
  }
}

Model build_model(const ModelConfig& config) { return Model(config); }

LinearModule& Model::module(const ModuleId& id) {
  if (id.layer < 1 || id.layer > cfg_.num_layers)
    throw std::invalid_argument("module: layer " + std::to_string(id.layer) +
                                " outside [1," + std::to_string(cfg_.num_layers) + "]");
  Layer& l = layers_[static_cast<std::size_t>(id.layer - 1)];
  switch (id.kind) {
    case ModuleKind::Query: return l.query;
    case ModuleKind::Key: return l.key;
    case ModuleKind::Value: return l.value;
    case ModuleKind::Output: return l.output;
    case ModuleKind::Gate: return l.gate;
    case ModuleKind::Up: return l.up;
    case ModuleKind::Down: return l.down;
  }
  throw std::invalid_argument("module: bad kind");
}

const LinearModule& Model::module(const ModuleId& id) const {
  return const_cast<Model*>(this)->module(id);
}

std::size_t Model::param_count(const ModuleId& id) const {
  return module(id).param_count();
}

std::vector<std::pair<ModuleId, std::size_t>> Model::candidate_modules() const {
  std::vector<std::pair<ModuleId, std::size_t>> out;
  out.reserve(static_cast<std::size_t>(cfg_.num_layers) * kAllKinds.size());
  for (int l = 1; l <= cfg_.num_layers; ++l)
    for (ModuleKind k : kAllKinds) {
      ModuleId id{l, k};
      out.emplace_back(id, param_count(id));
    }
  return out;
}

std::set<ModuleId> Model::universe() const {
  std::set<ModuleId> out;
  for (const auto& [id, _] : candidate_modules()) out.insert(id);
  return out;
}

Tensor Model::forward(std::span<const int> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg_.max_seq_len))
    throw std::invalid_argument("forward: sequence length " +
                                std::to_string(tokens.size()) + " exceeds max " +
                                std::to_string(cfg_.max_seq_len));
  std::vector<int> ids(tokens.begin(), tokens.end());
  for (int t : ids)
    if (t < 0 || t >= cfg_.vocab_size)
      throw std::invalid_argument("forward: token " + std::to_string(t) +
                                  " outside vocab of size " +
                                  std::to_string(cfg_.vocab_size));

  const std::size_t n = ids.size();
  std::vector<int> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<int>(i);

  Tensor x = add(embed_rows(tok_embed_, ids), embed_rows(pos_embed_, pos));

  const std::size_t heads = static_cast<std::size_t>(cfg_.num_heads);
  const std::size_t dh = static_cast<std::size_t>(cfg_.d_model) / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (const Layer& layer : layers_) {
    // attention block, pre-LN
    Tensor h = layer_norm_rows(x);
    Tensor q = layer.query.apply(h);
    Tensor k = layer.key.apply(h);
    Tensor v = layer.value.apply(h);
    std::vector<Tensor> ctx;
    ctx.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
      Tensor probs = causal_softmax_rows(scores);
      ctx.push_back(matmul(probs, vh));
    }
    x = add(x, layer.output.apply(concat_cols(ctx)));

    // gated FFN block, pre-LN
    Tensor f = layer_norm_rows(x);
    Tensor gated = mul(silu(layer.gate.apply(f)), layer.up.apply(f));
    x = add(x, layer.down.apply(gated));
  }

  return matmul(layer_norm_rows(x), unembed_);
}

std::vector<Tensor> Model::base_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [id, _] : candidate_modules()) {
    const LinearModule& m = module(id);
    out.push_back(m.weight);
    out.push_back(m.bias);
  }
  return out;
}

void Model::set_all_base_trainable(bool t) {
  for (const auto& [id, _] : candidate_modules())
    const_cast<LinearModule&>(module(id)).set_trainable(t);
}

std::uint64_t Model::base_digest() const { return base_digest(universe()); }

std::uint64_t Model::base_digest(const std::set<ModuleId>& subset) const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& id : subset) {
    const LinearModule& m = module(id);
    h = tensor_digest(m.weight, h);
    h = tensor_digest(m.bias, h);
  }
  return h;
}

// ---- attach / merge -------------------------------------------------------

AdapterSet attach_lora(Model& model, const std::set<ModuleId>& targets,
                       int rank, std::uint64_t seed) {
  if (rank < 1) throw std::invalid_argument("attach_lora: rank must be >= 1");
  const auto universe = model.universe();
  for (const auto& id : targets) {
    if (!universe.count(id))
      throw std::invalid_argument("attach_lora: unknown target " + id.str());
    if (model.module(id).branch)
      throw std::invalid_argument("attach_lora: branch already attached to " +
                                  id.str());
  }
  AdapterSet set;
  set.rank_ = rank;
  set.seed_ = seed;
  std::mt19937_64 rng(seed);
  const auto r = static_cast<std::size_t>(rank);
  for (const auto& id : targets) {
    LinearModule& m = model.module(id);
    auto br = std::make_shared<LoraBranch>();
    br->rank = rank;
    br->A = Tensor::randn({m.weight.rows(), r}, rng, 0.02, true);
    br->B = Tensor::randn({r, m.weight.cols()}, rng, 0.02, true);
    br->e = Tensor::zeros({r}, true);
    br->alpha = Tensor::scalar(1.0, true);
    br->enabled = true;
    m.branch = br;
    m.set_trainable(false);
    set.branches_[id] = br;
  }
  return set;
}

void merge_branch(LinearModule& module) {
  if (!module.branch)
    throw std::invalid_argument("merge_branch: no branch on " + module.id.str());
  const LoraBranch& br = *module.branch;
  if (!br.enabled)
    throw std::invalid_argument("merge_branch: branch on " + module.id.str() +
                                " is masked off");
  const std::size_t din = module.weight.rows(), dout = module.weight.cols();
  const auto r = static_cast<std::size_t>(br.rank);
  const double alpha = br.alpha.item();
  auto& w = module.weight.values();
  for (std::size_t i = 0; i < din; ++i)
    for (std::size_t p = 0; p < r; ++p) {
      const double ae = br.A.values()[i * r + p] * br.e.values()[p] * alpha;
      for (std::size_t j = 0; j < dout; ++j)
        w[i * dout + j] += ae * br.B.values()[p * dout + j];
    }
  module.branch.reset();
}

}  // namespace hlora
