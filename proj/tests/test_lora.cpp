#include <random>

#include "doctest.h"
#include "hlora/model.hpp"

using namespace hlora;

namespace {
ModelConfig tiny() {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 16;
  c.num_heads = 2;
  c.d_ff = 24;
  c.vocab_size = 20;
  c.max_seq_len = 16;
  c.seed = 7;
  return c;
}
}  // namespace

TEST_CASE("fresh attach is a functional identity") {
  Model base(tiny()), adapted(tiny());
  std::vector<int> toks{1, 2, 3, 4};
  Tensor ref = base.forward(toks);
  attach_lora(adapted, adapted.universe(), 4, 99);
  Tensor got = adapted.forward(toks);
  CHECK(got.values() == ref.values());
}

TEST_CASE("attach covers the target set") {
  Model m(tiny());
  AdapterSet set = attach_lora(m, m.universe(), 4, 1);
  CHECK(set.size() == 14);
  CHECK(set.rank() == 4);
  for (auto& id : set.ids()) CHECK(set.has(id));
}

TEST_CASE("rank-16 branch parameter count on a 32x32 module") {
  ModelConfig c = tiny();
  c.d_model = 32;
  c.num_heads = 4;
  Model m(c);
  AdapterSet set = attach_lora(m, {ModuleId{1, ModuleKind::Query}}, 16, 1);
  const LoraBranch& br = set.at({1, ModuleKind::Query});
  CHECK(br.param_count() == 32 * 16 + 16 + 16 * 32 + 1);
  CHECK(br.param_count() ==
        br.A.size() + br.e.size() + br.B.size() + br.alpha.size());
}

TEST_CASE("branch arithmetic by hand, r=1") {
  LoraBranch br;
  br.A = Tensor::from({2, 1}, {1, 0});
  br.e = Tensor::from({1}, {2});
  br.B = Tensor::from({1, 2}, {0, 3});
  br.alpha = Tensor::scalar(1.0);
  br.rank = 1;
  Tensor x = Tensor::from({1, 2}, {1, 0});
  LinearModule mod;
  mod.id = {1, ModuleKind::Query};
  mod.weight = Tensor::from({2, 2}, {1, 0, 0, 1});
  mod.bias = Tensor::zeros({2});
  mod.branch = std::make_shared<LoraBranch>(br);
  Tensor out = mod.apply(x);
  CHECK(out.values()[0] == doctest::Approx(1.0));
  CHECK(out.values()[1] == doctest::Approx(6.0));

  mod.branch->enabled = false;  // z = 0
  Tensor off = mod.apply(x);
  CHECK(off.values() == std::vector<double>{1.0, 0.0});
}

TEST_CASE("alpha zero disables the branch output") {
  std::mt19937_64 rng(4);
  LoraBranch br;
  br.A = Tensor::randn({3, 2}, rng, 1.0);
  br.e = Tensor::randn({2}, rng, 1.0);
  br.B = Tensor::randn({2, 3}, rng, 1.0);
  br.alpha = Tensor::scalar(0.0);
  br.rank = 2;
  Tensor x = Tensor::randn({2, 3}, rng, 1.0);
  Tensor d = br.delta(x);
  for (double v : d.values()) CHECK(v == 0.0);
}

TEST_CASE("mask application semantics") {
  Model m(tiny());
  AdapterSet set = attach_lora(m, m.universe(), 2, 3);
  set.set_masks({});
  for (auto& id : set.ids()) CHECK(set.at(id).enabled);

  const auto id_list = set.ids();
  std::set<ModuleId> all(id_list.begin(), id_list.end());
  set.set_masks(all);
  for (auto& id : set.ids()) CHECK_FALSE(set.at(id).enabled);

  // all branches off: forward equals the unadapted model
  Model base(tiny());
  std::vector<int> toks{5, 6, 7};
  // move e off zero first so the mask is what matters
  for (auto& id : set.ids())
    for (double& v : set.at(id).e.values()) v = 0.5;
  set.set_masks(all);
  CHECK(m.forward(toks).values() == base.forward(toks).values());

  // idempotence
  std::set<ModuleId> half{ModuleId{1, ModuleKind::Query},
                          ModuleId{2, ModuleKind::Down}};
  set.set_masks(half);
  auto snap = [&] {
    std::vector<bool> bits;
    for (auto& id : set.ids()) bits.push_back(set.at(id).enabled);
    return bits;
  };
  auto first = snap();
  set.set_masks(half);
  CHECK(snap() == first);
}

TEST_CASE("disabled branch blocks gradients through e") {
  Model m(tiny());
  AdapterSet set = attach_lora(m, m.universe(), 2, 8);
  std::mt19937_64 rng(1);
  for (auto& id : set.ids())
    for (double& v : set.at(id).e.values())
      v = std::normal_distribution<double>(0, 0.1)(rng);
  for (auto& id : set.ids()) set.at(id).set_trainable(true);

  ModuleId off{1, ModuleKind::Gate};
  set.set_masks({off});
  std::vector<int> toks{1, 2, 3, 4, 5};
  backward(mean(m.forward(toks)));
  for (double g : set.at(off).e.grad()) CHECK(g == 0.0);
  for (double g : set.at(off).A.grad()) CHECK(g == 0.0);
  // at least one enabled branch sees gradient
  double mass = 0;
  for (auto& id : set.ids())
    for (double g : set.at(id).e.grad()) mass += std::abs(g);
  CHECK(mass > 0.0);
}

TEST_CASE("merge folds the branch into the base weight") {
  ModelConfig c = tiny();
  Model m(c);
  ModuleId id{1, ModuleKind::Value};
  AdapterSet set = attach_lora(m, {id}, 2, 12);
  std::mt19937_64 rng(2);
  for (double& v : set.at(id).e.values())
    v = std::normal_distribution<double>(0, 0.5)(rng);

  // zero e: merge must leave W bit-identical
  {
    Model m2(c);
    AdapterSet s2 = attach_lora(m2, {id}, 2, 12);
    auto w_before = m2.module(id).weight.values();
    merge_branch(m2.module(id));
    CHECK(m2.module(id).weight.values() == w_before);
  }

  std::vector<std::vector<int>> inputs;
  std::mt19937_64 trng(9);
  for (int i = 0; i < 100; ++i) {
    std::vector<int> t(5);
    for (int& v : t) v = static_cast<int>(trng() % c.vocab_size);
    inputs.push_back(t);
  }
  std::vector<Tensor> unmerged;
  for (auto& t : inputs) unmerged.push_back(m.forward(t));

  merge_branch(m.module(id));
  double max_dev = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor merged = m.forward(inputs[i]);
    for (std::size_t j = 0; j < merged.size(); ++j)
      max_dev = std::max(max_dev,
                         std::abs(merged.values()[j] - unmerged[i].values()[j]));
  }
  CHECK(max_dev < 1e-12);

  CHECK_THROWS_AS(merge_branch(m.module(id)), std::logic_error);
}

TEST_CASE("merge of a masked branch rejected") {
  Model m(tiny());
  ModuleId id{2, ModuleKind::Up};
  AdapterSet set = attach_lora(m, {id}, 2, 5);
  set.set_masks({id});
  CHECK_THROWS_AS(merge_branch(m.module(id)), std::logic_error);
}
