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
  c.seed = 42;
  return c;
}
}  // namespace

TEST_CASE("candidate universe size is 7 per layer") {
  ModelConfig c = tiny();
  CHECK(Model(c).universe().size() == 14);
  c.num_layers = 1;
  Model one(c);
  auto mods = one.candidate_modules();
  REQUIRE(mods.size() == 7);
  CHECK(mods.front().first == ModuleId{1, ModuleKind::Query});
  std::set<ModuleId> dedup;
  for (auto& [id, p] : mods) dedup.insert(id);
  CHECK(dedup.size() == mods.size());
}

TEST_CASE("same seed gives bitwise-identical parameters and logits") {
  Model a(tiny()), b(tiny());
  CHECK(a.base_digest() == b.base_digest());
  std::vector<int> toks{1, 2, 3, 4, 5};
  CHECK(a.forward(toks).values() == b.forward(toks).values());
}

TEST_CASE("forward shape contract") {
  ModelConfig c = tiny();
  c.num_layers = 4;
  c.d_model = 32;
  c.num_heads = 4;
  c.vocab_size = 18;
  Model m(c);
  std::vector<int> toks{0, 1, 2, 3, 4, 5, 6, 7};
  Tensor logits = m.forward(toks);
  CHECK(logits.rows() == 8);
  CHECK(logits.cols() == 18);
}

TEST_CASE("causality: later tokens do not affect earlier logits") {
  Model m(tiny());
  std::vector<int> toks{3, 1, 4, 1, 5};
  Tensor full = m.forward(toks);
  std::vector<int> changed = toks;
  changed.back() = 9;
  Tensor other = m.forward(changed);
  for (std::size_t i = 0; i + 1 < toks.size(); ++i)
    for (std::size_t j = 0; j < full.cols(); ++j)
      CHECK(full(i, j) == other(i, j));
}

TEST_CASE("empty sequence rejected") {
  Model m(tiny());
  std::vector<int> none;
  CHECK_THROWS_AS((void)m.forward(none), std::invalid_argument);
}

TEST_CASE("parameter counts by enumeration") {
  ModelConfig c = tiny();
  c.d_model = 32;
  c.d_ff = 64;
  c.num_heads = 4;
  Model m(c);
  CHECK(m.param_count({1, ModuleKind::Query}) == 32 * 32 + 32);
  CHECK(m.param_count({1, ModuleKind::Query}) == 1056);
  CHECK(m.param_count({1, ModuleKind::Gate}) == 32 * 64 + 64);
  CHECK(m.param_count({1, ModuleKind::Gate}) == 2112);

  std::size_t total = 0, by_enum = 0;
  for (auto& [id, p] : m.candidate_modules()) total += p;
  for (auto& [id, p] : m.candidate_modules()) {
    const LinearModule& mod = m.module(id);
    by_enum += mod.weight.size() + mod.bias.size();
  }
  CHECK(total == by_enum);
}

TEST_CASE("config validation names the offending field") {
  ModelConfig c = tiny();
  c.d_model = 15;  // not divisible by heads
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("d_model"),
                       std::invalid_argument);
  c = tiny();
  c.num_layers = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("num_layers"),
                       std::invalid_argument);
}

TEST_CASE("base digest detects single-element mutation") {
  Model m(tiny());
  auto before = m.base_digest();
  m.module({2, ModuleKind::Down}).weight.values()[7] += 1e-9;
  CHECK(m.base_digest() != before);
}
