/* C interface to the hybrid LoRA/FFT post-training pipeline.
 *
 * A run is an opaque handle bound to a config file and an output directory.
 * Stage functions return HLORA_OK (0) on success; on failure they return a
 * nonzero status and leave a human-readable message retrievable with
 * hlora_run_error(). Statuses double as process exit codes.
 */
#ifndef HYBRID_LORA_H
#define HYBRID_LORA_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef struct hlora_run_s hlora_run_t;

typedef enum {
  HLORA_OK = 0,
  HLORA_ERR_VALIDATION = 1,       /* bad config or arguments */
  HLORA_ERR_MISSING_ARTIFACT = 2, /* a predecessor stage has not run */
  HLORA_ERR_INVARIANT = 3         /* runtime invariant violation */
} hlora_status_t;

const char* hlora_version(void);

/* Opens a run. config_path must name a JSON config file; overrides_json may
 * be NULL or a JSON object merged over the file. The resolved config is
 * written into output_dir. Returns NULL on failure and, if err_buf is given,
 * fills it with the reason. */
hlora_run_t* hlora_run_open(const char* config_path, const char* overrides_json,
                            const char* output_dir, int overwrite,
                            char* err_buf, size_t err_cap);

void hlora_run_close(hlora_run_t* run);

/* Message from the most recent failed call on this run; empty on success. */
const char* hlora_run_error(const hlora_run_t* run);

hlora_status_t hlora_run_probe(hlora_run_t* run);
hlora_status_t hlora_run_score(hlora_run_t* run);
hlora_status_t hlora_run_allocate(hlora_run_t* run);
hlora_status_t hlora_run_train(hlora_run_t* run);
hlora_status_t hlora_run_oracle(hlora_run_t* run);
hlora_status_t hlora_run_pipeline(hlora_run_t* run);

/* Writes a text summary of the run into buf (always NUL-terminated). If the
 * summary does not fit, it is truncated; *needed receives the full length. */
hlora_status_t hlora_run_report(hlora_run_t* run, char* buf, size_t cap,
                                size_t* needed);

#ifdef __cplusplus
}
#endif

#endif /* HYBRID_LORA_H */
