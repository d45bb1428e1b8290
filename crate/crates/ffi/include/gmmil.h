#ifndef GMMIL_H
#define GMMIL_H

/* Generated by cbindgen from gmmil-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  GMMIL_STATUS_OK = 0,
  GMMIL_STATUS_NULL_POINTER = 1,
  GMMIL_STATUS_INVALID_ARGUMENT = 2,
  GMMIL_STATUS_UTF8 = 3,
  GMMIL_STATUS_IO = 4,
  GMMIL_STATUS_PARSE_ERROR = 5,
  GMMIL_STATUS_SCHEMA_ERROR = 6,
  GMMIL_STATUS_DATA_ERROR = 7,
  GMMIL_STATUS_FIT_ERROR = 8,
  GMMIL_STATUS_CONFIG_ERROR = 9,
} GmmilStatus;

/**
 * Estimator selector for [`gmmil_fit`].
 */
typedef enum {
  GMMIL_ESTIMATOR_IMLE = 0,
  GMMIL_ESTIMATOR_BMLE = 1,
  GMMIL_ESTIMATOR_SMLE = 2,
} GmmilEstimator;

/**
 * Opaque dataset handle.
 */
typedef struct GmmilDataset GmmilDataset;

/**
 * Opaque fit handle.
 */
typedef struct GmmilFit GmmilFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gmmil_version(void);

/**
 * Message of the last error on this thread. Valid until the next
 * failing call on the same thread; never NULL.
 */
const char *gmmil_last_error_message(void);

/**
 * Reads a dataset CSV into a new handle.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must point to writable storage.
 */
GmmilStatus gmmil_dataset_read_csv(const char *path, GmmilDataset **out);

/**
 * Writes a dataset handle back to CSV.
 *
 * # Safety
 * `ds` must be a live handle from this library; `path` NUL-terminated.
 */
GmmilStatus gmmil_dataset_write_csv(const GmmilDataset *ds, const char *path);

/**
 * Simulates a dataset from dotted `key=value` configuration text
 * (same keys as the CLI: `sim.n_bags`, `sim.pi`, `sim.regime`, ...).
 *
 * # Safety
 * `config_text` must be NUL-terminated; `out` must be writable.
 */
GmmilStatus gmmil_dataset_simulate(const char *config_text, GmmilDataset **out);

/**
 * Draws a posterior-guided subsampling plan and returns the masked
 * dataset an annotation pipeline would see (indicators set, hidden
 * labels removed). `pilot_fraction = 0` selects the uniform scheme.
 *
 * # Safety
 * `ds` must be a live handle; `options_text` may be NULL; `out` must be
 * writable.
 */
GmmilStatus gmmil_dataset_subsample(const GmmilDataset *ds,
                                    double pilot_fraction,
                                    double target_fraction,
                                    uint64_t seed,
                                    const char *options_text,
                                    GmmilDataset **out);

/**
 * # Safety
 * `ds` must be a live handle or NULL.
 */
size_t gmmil_dataset_n_bags(const GmmilDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle or NULL.
 */
size_t gmmil_dataset_n_instances(const GmmilDataset *ds);

/**
 * Feature dimension of the dataset.
 *
 * # Safety
 * `ds` must be a live handle or NULL.
 */
size_t gmmil_dataset_dim(const GmmilDataset *ds);

/**
 * Releases a dataset handle. NULL is ignored.
 *
 * # Safety
 * `ds` must have come from this library and not be freed twice.
 */
void gmmil_dataset_free(GmmilDataset *ds);

/**
 * Fits an estimator. `options_text` uses the CLI's `em.*` keys and may
 * be NULL for defaults.
 *
 * # Safety
 * `ds` must be a live handle; `options_text` NULL or NUL-terminated;
 * `out` writable.
 */
GmmilStatus gmmil_fit(const GmmilDataset *ds,
                      GmmilEstimator estimator,
                      const char *options_text,
                      GmmilFit **out);

/**
 * Length of the flattened parameter vector
 * `(pi, mu1, mu0, vech(Omega))`.
 *
 * # Safety
 * `fit` must be a live handle or NULL.
 */
size_t gmmil_fit_param_len(const GmmilFit *fit);

/**
 * Feature dimension of the fitted model.
 *
 * # Safety
 * `fit` must be a live handle or NULL.
 */
size_t gmmil_fit_dim(const GmmilFit *fit);

/**
 * Copies the flattened parameters into `buf` (length must be
 * `gmmil_fit_param_len`).
 *
 * # Safety
 * `fit` live handle; `buf` must point to at least `len` doubles.
 */
GmmilStatus gmmil_fit_params_flat(const GmmilFit *fit, double *buf, size_t len);

/**
 * Estimated bag prevalence (mean bag label).
 *
 * # Safety
 * `fit` must be a live handle or NULL.
 */
double gmmil_fit_alpha(const GmmilFit *fit);

/**
 * 1 when the EM converged (always 1 for the closed-form estimator).
 *
 * # Safety
 * `fit` must be a live handle or NULL.
 */
int gmmil_fit_converged(const GmmilFit *fit);

/**
 * Number of EM updates performed.
 *
 * # Safety
 * `fit` must be a live handle or NULL.
 */
size_t gmmil_fit_iterations(const GmmilFit *fit);

/**
 * Final objective value, or NaN when no trace exists.
 *
 * # Safety
 * `fit` must be a live handle or NULL.
 */
double gmmil_fit_final_loglik(const GmmilFit *fit);

/**
 * Writes the fitted parameters as the CLI-compatible CSV.
 *
 * # Safety
 * `fit` live handle; `path` NUL-terminated.
 */
GmmilStatus gmmil_fit_write_params_csv(const GmmilFit *fit, const char *path);

/**
 * Releases a fit handle. NULL is ignored.
 *
 * # Safety
 * `fit` must have come from this library and not be freed twice.
 */
void gmmil_fit_free(GmmilFit *fit);

/**
 * Posterior positive probability of one feature vector.
 *
 * # Safety
 * `fit` live handle; `x` must point to `p` doubles; `out` writable.
 */
GmmilStatus gmmil_posterior(const GmmilFit *fit, const double *x, size_t p, double *out);

/**
 * Scores every instance and bag of a dataset. `instance_probs` gets one
 * posterior per instance in bag order; `bag_probs` one positive
 * probability per bag. Either output may be NULL to skip it.
 *
 * # Safety
 * Handles must be live; non-NULL buffers must hold `n_instances` and
 * `n_bags` doubles respectively.
 */
GmmilStatus gmmil_predict_dataset(const GmmilFit *fit,
                                  const GmmilDataset *ds,
                                  double *instance_probs,
                                  double *bag_probs);

/**
 * Bag positive probability from instance posteriors (log-domain
 * complement product).
 *
 * # Safety
 * `posteriors` must point to `len` doubles.
 */
double gmmil_bag_positive_prob(const double *posteriors, size_t len);

/**
 * Estimator kind recorded on a fit handle.
 *
 * # Safety
 * `fit` must be a live handle or NULL.
 */
GmmilEstimator gmmil_fit_estimator(const GmmilFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GMMIL_H */
