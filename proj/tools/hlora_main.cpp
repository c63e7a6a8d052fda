// Pipeline driver CLI; all work happens behind the C shared-library API.

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hybrid_lora.h"

namespace {

// Builds a JSON merge-patch object from "a.b.c=value" override strings.
std::string overrides_to_json(const std::vector<std::string>& sets) {
  if (sets.empty()) return "";
  std::ostringstream os;
  auto emit_value = [&](const std::string& v) {
    // numbers and booleans pass through bare; everything else is a string
    if (v == "true" || v == "false") {
      os << v;
      return;
    }
    char* end = nullptr;
    std::strtod(v.c_str(), &end);
    if (end && *end == '\0' && !v.empty()) {
      os << v;
    } else {
      os << '"' << v << '"';
    }
  };
  os << "{";
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const std::string& s = sets[i];
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw CLI::ValidationError("--set", "expected key=value, got \"" + s + "\"");
    }
    if (i) os << ",";
    const std::string key = s.substr(0, eq);
    std::size_t depth = 0, pos = 0;
    while (true) {
      const auto dot = key.find('.', pos);
      os << '"' << key.substr(pos, dot - pos) << "\":";
      if (dot == std::string::npos) break;
      os << "{";
      ++depth;
      pos = dot + 1;
    }
    emit_value(s.substr(eq + 1));
    for (std::size_t d = 0; d < depth; ++d) os << "}";
  }
  os << "}";
  return os.str();
}

struct RunHandle {
  hlora_run_t* run = nullptr;
  ~RunHandle() { hlora_run_close(run); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid FFT/LoRA post-training pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  bool overwrite = false;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "JSON config file")->required();
  app.add_option("-o,--out", out_dir,
                 "output directory (relative paths resolve under "
                 "$HLORA_OUTPUT_ROOT when set)")
      ->required();
  app.add_flag("--overwrite", overwrite, "allow redoing completed stages");
  app.add_option("--set", sets, "config override, key=value (repeatable)");

  auto* probe = app.add_subcommand("probe", "pre-train the base checkpoint, attach LoRA everywhere, run the probing warmup");
  auto* score = app.add_subcommand("score", "estimate per-module sensitivity scores from the probed checkpoint");
  auto* allocate = app.add_subcommand("allocate", "partition modules into FFT and LoRA sets under the parameter budget");
  auto* train = app.add_subcommand("train", "final hybrid training from the base checkpoint and the plan");
  auto* oracle = app.add_subcommand("oracle", "perturbation scores and rank agreement against the sensitivity ranking");
  auto* pipeline = app.add_subcommand("pipeline", "probe, score, allocate and train in sequence");
  auto* report = app.add_subcommand("report", "summarize a run directory");

  // let global options appear after the subcommand name
  for (auto* sub : {probe, score, allocate, train, oracle, pipeline, report})
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  std::string resolved_out = out_dir;
  if (const char* root = std::getenv("HLORA_OUTPUT_ROOT");
      root && *root && !out_dir.empty() && out_dir.front() != '/') {
    resolved_out = std::string(root) + "/" + out_dir;
  }

  std::string overrides;
  try {
    overrides = overrides_to_json(sets);
  } catch (const CLI::Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  char err[1024] = {0};
  RunHandle h;
  h.run = hlora_run_open(config_path.c_str(),
                         overrides.empty() ? nullptr : overrides.c_str(),
                         resolved_out.c_str(), overwrite ? 1 : 0, err,
                         sizeof(err));
  if (!h.run) {
    std::cerr << "error: " << err << "\n";
    return 1;
  }

  hlora_status_t st = HLORA_OK;
  if (probe->parsed()) st = hlora_run_probe(h.run);
  else if (score->parsed()) st = hlora_run_score(h.run);
  else if (allocate->parsed()) st = hlora_run_allocate(h.run);
  else if (train->parsed()) st = hlora_run_train(h.run);
  else if (oracle->parsed()) st = hlora_run_oracle(h.run);
  else if (pipeline->parsed()) st = hlora_run_pipeline(h.run);
  else if (report->parsed()) {
    size_t needed = 0;
    st = hlora_run_report(h.run, nullptr, 0, &needed);
    if (st == HLORA_OK) {
      std::string buf(needed + 1, '\0');
      st = hlora_run_report(h.run, buf.data(), buf.size(), nullptr);
      if (st == HLORA_OK) std::cout << buf.c_str();
    }
  }

  if (st != HLORA_OK) {
    std::cerr << "error: " << hlora_run_error(h.run) << "\n";
    return static_cast<int>(st);
  }
  return 0;
}
