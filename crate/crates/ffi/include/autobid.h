#ifndef AUTOBID_H
#define AUTOBID_H

#pragma once

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum AbStatus {
  AB_STATUS_OK = 0,
  AB_STATUS_NULL_POINTER = 1,
  AB_STATUS_INVALID_ARGUMENT = 2,
  AB_STATUS_CONFIG = 3,
  AB_STATUS_IO = 4,
  AB_STATUS_PARSE = 5,
  AB_STATUS_COMPATIBILITY = 6,
  AB_STATUS_NUMERIC = 7,
  AB_STATUS_INFERENCE = 8,
  AB_STATUS_INTERNAL = 9,
  AB_STATUS_PANIC = 10,
} AbStatus;

typedef enum AbPenaltyMode {
  AB_PENALTY_MODE_LITERAL = 0,
  AB_PENALTY_MODE_CLAMPED = 1,
} AbPenaltyMode;

/**
 * Opaque behaviour dataset.
 */
typedef struct AbDataset AbDataset;

/**
 * Opaque trained model.
 */
typedef struct AbModel AbModel;

/**
 * Campaign constants for a rollout. Mirrors the core campaign config.
 */
typedef struct AbCampaign {
  double budget;
  double cpa_threshold;
  size_t horizon;
  size_t impressions_per_step;
  double value_log_mu;
  double value_log_sigma;
  double competition_log_mu;
  double competition_log_sigma;
  uint64_t seed;
} AbCampaign;

/**
 * Outcome of one simulated campaign.
 */
typedef struct AbEpisodeSummary {
  double score;
  double total_value;
  double total_cost;
  double min_penalty;
  size_t steps;
} AbEpisodeSummary;

typedef struct AbPenalty {
  double cpa_t;
  double bc_t;
  double p_cpa;
  double p_bc;
  double p_total;
} AbPenalty;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread, without the NUL.
 */
size_t ab_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * `len - 1` bytes). Returns the number of bytes written, excluding the NUL.
 *
 * # Safety
 * `buf` must be valid for `len` bytes of writes, or null.
 */
size_t ab_last_error_message(char *buf, size_t len);

/**
 * Fills `out` with the default campaign constants.
 *
 * # Safety
 * `out` must be a valid, writable pointer.
 */
enum AbStatus ab_campaign_default(struct AbCampaign *out);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AbStatus ab_model_load(const char *path, struct AbModel **out);

/**
 * # Safety
 * `model` must come from [`ab_model_load`] and not be freed yet, or be null.
 */
void ab_model_free(struct AbModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum AbStatus ab_model_num_parameters(const struct AbModel *model, size_t *out);

/**
 * Highest episode return in the training data; rollout targets scale from it.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum AbStatus ab_model_max_return(const struct AbModel *model, double *out);

/**
 * Runs one campaign with the model bidding, scored against the campaign's
 * CPA constraint with exponent `beta`. If `actions` is non-null, up to
 * `actions_len` per-step actions are copied there.
 *
 * # Safety
 * `model` must be a live handle, `summary` writable, and `actions` valid for
 * `actions_len` writes when non-null.
 */
enum AbStatus ab_model_rollout(const struct AbModel *model,
                               struct AbCampaign campaign,
                               double target_rtg,
                               double beta,
                               struct AbEpisodeSummary *summary,
                               double *actions,
                               size_t actions_len);

/**
 * One second-price auction for a single impression.
 *
 * # Safety
 * `won` and `cost` must be writable.
 */
enum AbStatus ab_gsp_auction(double bid,
                             double value,
                             double competing_bid,
                             bool *won,
                             double *cost);

/**
 * Trajectory penalty from episode totals.
 *
 * # Safety
 * `out` must be writable.
 */
enum AbStatus ab_penalty(double total_cost,
                         double total_value,
                         double budget,
                         double cpa_threshold,
                         double alpha1,
                         double alpha2,
                         enum AbPenaltyMode mode,
                         struct AbPenalty *out);

/**
 * Reads a dataset file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AbStatus ab_dataset_read(const char *path, struct AbDataset **out);

/**
 * # Safety
 * `ds` must come from [`ab_dataset_read`] and not be freed yet, or be null.
 */
void ab_dataset_free(struct AbDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum AbStatus ab_dataset_len(const struct AbDataset *ds, size_t *out);

/**
 * Total cost, total value and stored penalty of episode `index`.
 *
 * # Safety
 * `ds` must be a live handle; the out pointers must be writable.
 */
enum AbStatus ab_dataset_episode(const struct AbDataset *ds,
                                 size_t index,
                                 double *total_cost,
                                 double *total_value,
                                 struct AbPenalty *penalty);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOBID_H */
