#ifndef TMAG_H
#define TMAG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum TmagStatus {
  TMAG_STATUS_OK = 0,
  /**
   * Bad configuration key or value, or an out-of-range argument.
   */
  TMAG_STATUS_USAGE = 1,
  /**
   * Unreadable or inconsistent input data, or a missing file.
   */
  TMAG_STATUS_DATA = 2,
  /**
   * NaN or divergence during training or scoring.
   */
  TMAG_STATUS_NUMERIC = 3,
  /**
   * A required pointer argument was null or a string was not UTF-8.
   */
  TMAG_STATUS_INVALID_ARGUMENT = 4,
  /**
   * An internal panic was caught.
   */
  TMAG_STATUS_INTERNAL = 5,
} TmagStatus;

/**
 * Ranking metric selector for [`tmag_model_metric`].
 */
typedef enum TmagMetric {
  TMAG_METRIC_RECALL = 0,
  TMAG_METRIC_NDCG = 1,
  TMAG_METRIC_MAP = 2,
} TmagMetric;

/**
 * Run configuration.
 */
typedef struct TmagConfig TmagConfig;

/**
 * A trained recommender with its evaluation results.
 */
typedef struct TmagModel TmagModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tmag_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tmag_version(void);

/**
 * New configuration holding the defaults.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum TmagStatus tmag_config_new(struct TmagConfig **out);

/**
 * Configuration read from a `key = value` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as for [`tmag_config_new`].
 */
enum TmagStatus tmag_config_load(const char *path, struct TmagConfig **out);

/**
 * Set one key; the configuration is unchanged if the value is rejected.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` NUL-terminated.
 */
enum TmagStatus tmag_config_set(struct TmagConfig *cfg, const char *key, const char *value);

/**
 * Canonical text of the configuration. The returned string must be released
 * with [`tmag_string_free`].
 *
 * # Safety
 * `cfg` must come from this library; `out` must be writable.
 */
enum TmagStatus tmag_config_to_text(const struct TmagConfig *cfg, char **out);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void tmag_string_free(char *s);

/**
 * # Safety
 * `cfg` must come from [`tmag_config_new`] or [`tmag_config_load`] or be null.
 */
void tmag_config_free(struct TmagConfig *cfg);

/**
 * Write the synthetic dataset (400 users, 200 items, 4 planted clusters)
 * and a matching `tmag.conf` into `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string.
 */
enum TmagStatus tmag_synth_write(const char *dir, uint64_t seed);

/**
 * Ingest, pretrain, cluster, meta-train and evaluate in memory.
 *
 * # Safety
 * `cfg` must come from this library; `out` must be writable.
 */
enum TmagStatus tmag_model_train(const struct TmagConfig *cfg, struct TmagModel **out);

/**
 * Number of users and items known to the model.
 *
 * # Safety
 * `model` must come from [`tmag_model_train`]; outputs must be writable.
 */
enum TmagStatus tmag_model_counts(const struct TmagModel *model,
                                  uintptr_t *n_users,
                                  uintptr_t *n_items);

/**
 * Mean metric at the configured cutoff for evaluation task 1, 2 or 3.
 *
 * # Safety
 * `model` must come from [`tmag_model_train`]; `out` must be writable.
 */
enum TmagStatus tmag_model_metric(const struct TmagModel *model,
                                  uint8_t task,
                                  enum TmagMetric metric,
                                  double *out);

/**
 * Preference score of a user for an item, both given by raw id, before
 * any per-cluster adaptation.
 *
 * # Safety
 * `model` must come from [`tmag_model_train`]; ids NUL-terminated; `out`
 * writable.
 */
enum TmagStatus tmag_model_score(const struct TmagModel *model,
                                 const char *user,
                                 const char *item,
                                 double *out);

/**
 * # Safety
 * `model` must come from [`tmag_model_train`] or be null.
 */
void tmag_model_free(struct TmagModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMAG_H */
