#include "hybrid_lora.h"

#include <cstring>
#include <functional>
#include <memory>
#include <string>

#include "hlora/pipeline.hpp"

struct hlora_run_s {
  std::unique_ptr<hlora::Run> run;
  std::string last_error;
};

namespace {

hlora_status_t guard(hlora_run_s* run, const std::function<void()>& body) {
  if (!run) return HLORA_ERR_VALIDATION;
  try {
    run->last_error.clear();
    body();
    return HLORA_OK;
  } catch (const hlora::MissingArtifactError& e) {
    run->last_error = e.what();
    return HLORA_ERR_MISSING_ARTIFACT;
  } catch (const hlora::ValidationError& e) {
    run->last_error = e.what();
    return HLORA_ERR_VALIDATION;
  } catch (const hlora::InvariantError& e) {
    run->last_error = e.what();
    return HLORA_ERR_INVARIANT;
  } catch (const std::exception& e) {
    run->last_error = e.what();
    return HLORA_ERR_INVARIANT;
  }
}

}  // namespace

extern "C" {

const char* hlora_version(void) { return "1.0.0"; }

hlora_run_t* hlora_run_open(const char* config_path, const char* overrides_json,
                            const char* output_dir, int overwrite,
                            char* err_buf, size_t err_cap) {
  auto fail = [&](const std::string& msg) -> hlora_run_t* {
    if (err_buf && err_cap > 0) {
      std::strncpy(err_buf, msg.c_str(), err_cap - 1);
      err_buf[err_cap - 1] = '\0';
    }
    return nullptr;
  };
  if (!config_path) return fail("config_path is null");
  if (!output_dir) return fail("output_dir is null");
  try {
    auto run = std::make_unique<hlora_run_s>();
    run->run = std::make_unique<hlora::Run>(
        config_path, overrides_json ? overrides_json : "", output_dir,
        overwrite != 0);
    return run.release();
  } catch (const std::exception& e) {
    return fail(e.what());
  }
}

void hlora_run_close(hlora_run_t* run) { delete run; }

const char* hlora_run_error(const hlora_run_t* run) {
  return run ? run->last_error.c_str() : "null run handle";
}

hlora_status_t hlora_run_probe(hlora_run_t* run) {
  return guard(run, [&] { run->run->probe(); });
}

hlora_status_t hlora_run_score(hlora_run_t* run) {
  return guard(run, [&] { run->run->score(); });
}

hlora_status_t hlora_run_allocate(hlora_run_t* run) {
  return guard(run, [&] { run->run->allocate(); });
}

hlora_status_t hlora_run_train(hlora_run_t* run) {
  return guard(run, [&] { run->run->train(); });
}

hlora_status_t hlora_run_oracle(hlora_run_t* run) {
  return guard(run, [&] { run->run->oracle(); });
}

hlora_status_t hlora_run_pipeline(hlora_run_t* run) {
  return guard(run, [&] { run->run->pipeline(); });
}

hlora_status_t hlora_run_report(hlora_run_t* run, char* buf, size_t cap,
                                size_t* needed) {
  std::string text;
  const hlora_status_t st = guard(run, [&] { text = run->run->report(); });
  if (st != HLORA_OK) return st;
  if (needed) *needed = text.size();
  if (buf && cap > 0) {
    const size_t n = std::min(cap - 1, text.size());
    std::memcpy(buf, text.data(), n);
    buf[n] = '\0';
  }
  return HLORA_OK;
}

}  // extern "C"
