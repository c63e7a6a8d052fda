#include "hlora/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

namespace hlora {

namespace {

constexpr char kMagic[8] = {'H', 'L', 'C', 'K', '0', '0', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(os, static_cast<std::uint32_t>(t.shape().size()));
  for (auto d : t.shape()) write_u64(os, d);
  os.write(reinterpret_cast<const char*>(t.values().data()),
           static_cast<std::streamsize>(t.values().size() * sizeof(double)));
}

struct RawTensor {
  Shape shape;
  std::vector<double> values;
};

std::pair<std::string, RawTensor> read_tensor(std::istream& is) {
  const std::uint32_t name_len = read_u32(is);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  RawTensor t;
  const std::uint32_t ndim = read_u32(is);
  for (std::uint32_t i = 0; i < ndim; ++i) t.shape.push_back(read_u64(is));
  t.values.resize(numel(t.shape));
  is.read(reinterpret_cast<char*>(t.values.data()),
          static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  return {std::move(name), std::move(t)};
}

std::string tensor_key(const ModuleId& id, const char* leaf) {
  return id.str() + "." + leaf;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const AdapterSet* adapters) {
  nlohmann::ordered_json meta;
  const ModelConfig& c = model.config();
  meta["model"] = {{"num_layers", c.num_layers}, {"d_model", c.d_model},
                   {"num_heads", c.num_heads},   {"d_ff", c.d_ff},
                   {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                   {"seed", c.seed}};
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  tensors.emplace_back("tok_embed", &model.token_embedding());
  tensors.emplace_back("pos_embed", &model.position_embedding());
  tensors.emplace_back("unembed", &model.unembedding());
  for (const auto& [id, _] : model.candidate_modules()) {
    const LinearModule& m = model.module(id);
    tensors.emplace_back(tensor_key(id, "weight"), &m.weight);
    tensors.emplace_back(tensor_key(id, "bias"), &m.bias);
  }
  if (adapters && adapters->size() > 0) {
    nlohmann::ordered_json targets = nlohmann::ordered_json::array();
    for (const auto& id : adapters->ids()) {
      targets.push_back({{"layer", id.layer}, {"kind", kind_name(id.kind)}});
      const LoraBranch& br = adapters->at(id);
      tensors.emplace_back(tensor_key(id, "lora.A"), &br.A);
      tensors.emplace_back(tensor_key(id, "lora.e"), &br.e);
      tensors.emplace_back(tensor_key(id, "lora.B"), &br.B);
      tensors.emplace_back(tensor_key(id, "lora.alpha"), &br.alpha);
    }
    meta["adapters"] = {{"rank", adapters->rank()},
                        {"seed", adapters->seed()},
                        {"targets", std::move(targets)}};
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  os.write(kMagic, sizeof(kMagic));
  const std::string meta_str = meta.dump();
  write_u32(os, static_cast<std::uint32_t>(meta_str.size()));
  os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) write_tensor(os, name, *t);
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_checkpoint: " + path.string() +
                             " is not a checkpoint container");
  const std::uint32_t meta_len = read_u32(is);
  std::string meta_str(meta_len, '\0');
  is.read(meta_str.data(), meta_len);
  const auto meta = nlohmann::json::parse(meta_str);

  ModelConfig cfg;
  const auto& mj = meta.at("model");
  cfg.num_layers = mj.at("num_layers").get<int>();
  cfg.d_model = mj.at("d_model").get<int>();
  cfg.num_heads = mj.at("num_heads").get<int>();
  cfg.d_ff = mj.at("d_ff").get<int>();
  cfg.vocab_size = mj.at("vocab_size").get<int>();
  cfg.max_seq_len = mj.at("max_seq_len").get<int>();
  cfg.seed = mj.at("seed").get<std::uint64_t>();

  const std::uint32_t n_tensors = read_u32(is);
  std::map<std::string, RawTensor> raw;
  for (std::uint32_t i = 0; i < n_tensors; ++i) raw.insert(read_tensor(is));
  if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path.string());

  LoadedCheckpoint out{Model(cfg), std::nullopt};
  auto fill = [&](const std::string& name, Tensor t) {
    auto it = raw.find(name);
    if (it == raw.end())
      throw std::runtime_error("load_checkpoint: missing tensor \"" + name + "\"");
    if (it->second.shape != t.shape())
      throw std::runtime_error("load_checkpoint: tensor \"" + name +
                               "\" has shape " + shape_str(it->second.shape) +
                               ", expected " + shape_str(t.shape()));
    t.values() = it->second.values;
  };
  fill("tok_embed", out.model.token_embedding());
  fill("pos_embed", out.model.position_embedding());
  fill("unembed", out.model.unembedding());
  for (const auto& [id, _] : out.model.candidate_modules()) {
    fill(tensor_key(id, "weight"), out.model.module(id).weight);
    fill(tensor_key(id, "bias"), out.model.module(id).bias);
  }

  if (meta.contains("adapters")) {
    const auto& aj = meta.at("adapters");
    std::set<ModuleId> targets;
    for (const auto& t : aj.at("targets"))
      targets.insert({t.at("layer").get<int>(),
                      kind_from_name(t.at("kind").get<std::string>())});
    AdapterSet adapters =
        attach_lora(out.model, targets, aj.at("rank").get<int>(),
                    aj.at("seed").get<std::uint64_t>());
    for (const auto& id : targets) {
      LoraBranch& br = adapters.at(id);
      fill(tensor_key(id, "lora.A"), br.A);
      fill(tensor_key(id, "lora.e"), br.e);
      fill(tensor_key(id, "lora.B"), br.B);
      fill(tensor_key(id, "lora.alpha"), br.alpha);
    }
    out.adapters = std::move(adapters);
  }
  return out;
}

std::uint64_t file_digest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("file_digest: cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<std::size_t>(is.gcount()), h);
  }
  return h;
}

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(digest));
  return std::string(buf);
}

}  // namespace hlora
