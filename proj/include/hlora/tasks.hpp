#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hlora/scoring.hpp"

namespace hlora {

// Fixed symbol vocabulary shared by all tasks. Digits are their own ids.
namespace tok {
inline constexpr int kPlus = 10;
inline constexpr int kEq = 11;
inline constexpr int kEos = 12;
inline constexpr int kBos = 13;
inline constexpr int kMinVocab = 14;
}  // namespace tok

enum class TaskKind { ModularAddition, SequenceCopy, SequenceReverse };

std::string task_name(TaskKind k);
TaskKind task_from_name(const std::string& name);

struct TaskConfig {
  TaskKind kind = TaskKind::ModularAddition;
  std::uint64_t seed = 0;
  int modulus = 7;    // modular addition
  int alphabet = 8;   // copy/reverse symbol range, <= 10
  int min_len = 2;    // copy/reverse sequence length range
  int max_len = 5;

  void validate() const;
};

struct TaskExample {
  std::vector<int> prompt;  // starts with BOS, ends with EQ
  std::vector<int> answer;  // correct answer tokens, ends with EOS
};

// Deterministic generator of prompts with a unique programmatically
// verifiable answer.
class TaskGenerator {
 public:
  explicit TaskGenerator(const TaskConfig& cfg);

  const TaskConfig& config() const { return cfg_; }

  TaskExample sample(std::mt19937_64& rng) const;

  // 1 iff the response (tokens up to and including EOS) exactly matches the
  // unique answer for this prompt; any malformed response scores 0.
  double reward(const std::vector<int>& prompt,
                const std::vector<int>& response) const;

  // Correct answer tokens (with trailing EOS) for a generated prompt.
  std::vector<int> solve(const std::vector<int>& prompt) const;

  // Supervised next-token batch over prompt+answer sequences; loss is taken
  // on the answer region only (prompt positions carry ignore targets).
  Batch make_batch(std::size_t batch_size, std::mt19937_64& rng) const;
  std::vector<Batch> make_batches(std::size_t count, std::size_t batch_size,
                                  std::mt19937_64& rng) const;

  // Longest prompt+answer sequence this config can emit.
  int max_sequence_len() const;
  int min_vocab() const { return tok::kMinVocab; }

 private:
  TaskConfig cfg_;
};

}  // namespace hlora
