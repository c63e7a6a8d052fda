#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "hlora/serialize.hpp"
#include "hlora/trainer.hpp"

namespace hlora {

// Maps to process exit code 1.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Maps to process exit code 2.
struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Maps to process exit code 3.
struct InvariantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  int rank = 16;
  ScoreVariant variant = ScoreVariant::Product;
  double r_fft = 0.10;
  int partitions = 20;  // K; one validation batch per partition
  std::uint64_t partition_seed = 0;
  AllocationDirection direction = AllocationDirection::AscendingFromLora;
  TaskConfig task;
  TrainConfig train;
  GrpoConfig grpo;

  void validate() const;  // throws ValidationError naming the field

  // Parses a JSON config file and optional JSON override object; missing
  // fields take the documented defaults.
  static RunConfig parse_file(const std::filesystem::path& path,
                              const std::string& overrides_json = "");
  static RunConfig parse_json(const std::string& text);
  std::string to_json() const;  // fully-resolved form
};

// Serialized artifact helpers; all outputs are deterministic functions of
// (config, seeds).
void write_score_report(const std::filesystem::path& path,
                        const HybridScoreReport& report);
HybridScoreReport read_score_report(const std::filesystem::path& path);
void write_plan(const std::filesystem::path& path, const AllocationPlan& plan);
AllocationPlan read_plan(const std::filesystem::path& path);
void write_grid_csv(const std::filesystem::path& path, const AllocationPlan& plan,
                    int num_layers);
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricRecord>& log);

// One pipeline run rooted at an output directory; every stage is resumable
// from its predecessor's files alone.
class Run {
 public:
  Run(const std::filesystem::path& config_path, const std::string& overrides_json,
      const std::filesystem::path& output_dir, bool overwrite);

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }

  void probe();     // m0.ckpt + probe.ckpt
  void score();     // score_report.json + alpha_report.json
  void allocate();  // plan.json + grid.csv
  void train();     // final.ckpt + metrics.csv
  void oracle();    // oracle.json
  void pipeline();  // probe -> score -> allocate -> train
  std::string report() const;

  std::filesystem::path path(const std::string& artifact) const;

 private:
  void require_artifact(const std::string& artifact) const;
  void record_artifact(const std::string& stage, const std::string& artifact);

  RunConfig cfg_;
  std::filesystem::path dir_;
  bool overwrite_ = false;
};

}  // namespace hlora
