#include "hlora/tasks.hpp"

#include <algorithm>
#include <stdexcept>

namespace hlora {

std::string task_name(TaskKind k) {
  switch (k) {
    case TaskKind::ModularAddition: return "modular-addition";
    case TaskKind::SequenceCopy: return "sequence-copy";
    case TaskKind::SequenceReverse: return "sequence-reverse";
  }
  throw std::invalid_argument("task_name: bad enum value");
}

TaskKind task_from_name(const std::string& name) {
  if (name == "modular-addition") return TaskKind::ModularAddition;
  if (name == "sequence-copy") return TaskKind::SequenceCopy;
  if (name == "sequence-reverse") return TaskKind::SequenceReverse;
  throw std::invalid_argument("unknown task kind \"" + name + "\"");
}

void TaskConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("TaskConfig: " + msg);
  };
  if (modulus < 2 || modulus > 10) fail("modulus must lie in [2,10]");
  if (alphabet < 2 || alphabet > 10) fail("alphabet must lie in [2,10]");
  if (min_len < 1) fail("min_len must be >= 1");
  if (max_len < min_len) fail("max_len must be >= min_len");
}

TaskGenerator::TaskGenerator(const TaskConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
}

namespace {

// Deterministic uniform integer in [0, n) independent of library
// distribution implementations.
int draw(std::mt19937_64& rng, int n) {
  return static_cast<int>(rng() % static_cast<std::uint64_t>(n));
}

}  // namespace

TaskExample TaskGenerator::sample(std::mt19937_64& rng) const {
  TaskExample ex;
  if (cfg_.kind == TaskKind::ModularAddition) {
    const int a = draw(rng, cfg_.modulus);
    const int b = draw(rng, cfg_.modulus);
    ex.prompt = {tok::kBos, a, tok::kPlus, b, tok::kEq};
  } else {
    const int len = cfg_.min_len + draw(rng, cfg_.max_len - cfg_.min_len + 1);
    ex.prompt.push_back(tok::kBos);
    for (int i = 0; i < len; ++i) ex.prompt.push_back(draw(rng, cfg_.alphabet));
    ex.prompt.push_back(tok::kEq);
  }
  ex.answer = solve(ex.prompt);
  return ex;
}

std::vector<int> TaskGenerator::solve(const std::vector<int>& prompt) const {
  if (prompt.size() < 3 || prompt.front() != tok::kBos || prompt.back() != tok::kEq)
    throw std::invalid_argument("solve: prompt not produced by this task");
  std::vector<int> answer;
  switch (cfg_.kind) {
    case TaskKind::ModularAddition: {
      if (prompt.size() != 5 || prompt[2] != tok::kPlus)
        throw std::invalid_argument("solve: malformed modular-addition prompt");
      answer.push_back((prompt[1] + prompt[3]) % cfg_.modulus);
      break;
    }
    case TaskKind::SequenceCopy:
      answer.assign(prompt.begin() + 1, prompt.end() - 1);
      break;
    case TaskKind::SequenceReverse:
      answer.assign(prompt.rbegin() + 1, prompt.rend() - 1);
      break;
  }
  answer.push_back(tok::kEos);
  return answer;
}

double TaskGenerator::reward(const std::vector<int>& prompt,
                             const std::vector<int>& response) const {
  // RL must tolerate arbitrary generations: any malformed response is 0.
  std::vector<int> expected;
  try {
    expected = solve(prompt);
  } catch (const std::exception&) {
    return 0.0;
  }
  if (response.empty()) return 0.0;
  return response == expected ? 1.0 : 0.0;
}

Batch TaskGenerator::make_batch(std::size_t batch_size,
                                std::mt19937_64& rng) const {
  if (batch_size == 0) throw std::invalid_argument("make_batch: empty batch");
  Batch batch;
  for (std::size_t i = 0; i < batch_size; ++i) {
    TaskExample ex = sample(rng);
    std::vector<int> seq = ex.prompt;
    seq.insert(seq.end(), ex.answer.begin(), ex.answer.end());
    std::vector<int> input(seq.begin(), seq.end() - 1);
    std::vector<int> target(input.size(), -1);
    // supervise answer tokens only; position p-1 predicts the first one
    const std::size_t p = ex.prompt.size();
    for (std::size_t j = p - 1; j < input.size(); ++j) target[j] = seq[j + 1];
    batch.inputs.push_back(std::move(input));
    batch.targets.push_back(std::move(target));
  }
  return batch;
}

std::vector<Batch> TaskGenerator::make_batches(std::size_t count,
                                               std::size_t batch_size,
                                               std::mt19937_64& rng) const {
  std::vector<Batch> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_batch(batch_size, rng));
  return out;
}

int TaskGenerator::max_sequence_len() const {
  if (cfg_.kind == TaskKind::ModularAddition) return 5 + 2;
  return (cfg_.max_len + 2) + (cfg_.max_len + 1);
}

}  // namespace hlora
