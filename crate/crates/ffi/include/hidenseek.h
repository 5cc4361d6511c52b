/* C interface for the hidenseek federated-learning simulator.
 *
 * Kept in sync with src/lib.rs by hand (regenerate with `cbindgen --crate
 * hidenseek-ffi --output include/hidenseek.h` where cbindgen is available).
 *
 * All functions returning HnsStatus set a thread-local error message
 * retrievable via hns_last_error on failure.
 */

#ifndef HIDENSEEK_H
#define HIDENSEEK_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum HnsStatus {
  HNS_STATUS_OK = 0,
  /* Invalid or inconsistent configuration. */
  HNS_STATUS_CONFIG = 1,
  /* Dataset missing or malformed. */
  HNS_STATUS_DATA = 2,
  /* Numeric failure (non-finite loss, dimension or protocol violation). */
  HNS_STATUS_NUMERIC = 3,
  /* Null pointer or non-UTF-8 string argument. */
  HNS_STATUS_INVALID_ARGUMENT = 4,
  /* An internal panic was caught at the boundary. */
  HNS_STATUS_PANIC = 5,
} HnsStatus;

/* Opaque experiment handle. */
typedef struct HnsExperiment HnsExperiment;

/* Library version as a static NUL-terminated string. */
const char *hns_version(void);

/* Copies the calling thread's last error message into buf (cap bytes,
 * NUL-terminated, truncated as needed) and returns the full length. Pass a
 * null buf to query the length. */
size_t hns_last_error(char *buf, size_t cap);

/* Creates an experiment from a TOML config file; a null path selects the
 * built-in defaults. On success *out owns the handle. */
HnsStatus hns_experiment_new(const char *config_path, HnsExperiment **out);

/* Applies one key=value override, re-validating the configuration. */
HnsStatus hns_experiment_set(HnsExperiment *exp, const char *key,
                             const char *value);

/* Copies the resolved output directory into buf (cap bytes) and returns the
 * full length. */
size_t hns_experiment_output_dir(const HnsExperiment *exp, char *buf,
                                 size_t cap);

/* Runs all repetitions; writes metrics CSVs, summary.csv and the resolved
 * config into the output directory. */
HnsStatus hns_experiment_run(HnsExperiment *exp);

/* Initializes and server-prunes only; writes pruned.hns and
 * kept_units.csv. */
HnsStatus hns_experiment_prune_only(HnsExperiment *exp);

/* Writes cost.csv and, when the pointers are non-null, fills the byte-model
 * upload/download sizes of the configured algorithm. */
HnsStatus hns_experiment_cost(HnsExperiment *exp, uint64_t *upload_bytes,
                              uint64_t *download_bytes);

/* Releases a handle; null is a no-op. */
void hns_experiment_free(HnsExperiment *exp);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* HIDENSEEK_H */
