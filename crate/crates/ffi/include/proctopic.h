#ifndef PROCTOPIC_H
#define PROCTOPIC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ProctopicStatus {
  PROCTOPIC_STATUS_OK = 0,
  PROCTOPIC_STATUS_NULL_POINTER = 1,
  PROCTOPIC_STATUS_INVALID_ARGUMENT = 2,
  PROCTOPIC_STATUS_INVALID_CONFIG = 3,
  PROCTOPIC_STATUS_INVALID_PARAMS = 4,
  PROCTOPIC_STATUS_INVALID_DATA = 5,
  PROCTOPIC_STATUS_IO = 6,
  PROCTOPIC_STATUS_NUMERIC = 7,
  PROCTOPIC_STATUS_FIT_FAILED = 8,
  PROCTOPIC_STATUS_BUFFER_TOO_SMALL = 9,
  PROCTOPIC_STATUS_PANIC = 10,
} ProctopicStatus;

// Which parameter block to copy.
typedef enum ProctopicField {
  // K×V emission matrix.
  PROCTOPIC_FIELD_B = 0,
  // K×K log intensities.
  PROCTOPIC_FIELD_G = 1,
  // Initial distribution, K values.
  PROCTOPIC_FIELD_P0 = 2,
  // K×K Dirichlet hyperparameters.
  PROCTOPIC_FIELD_R = 3,
  // R with rows normalized.
  PROCTOPIC_FIELD_NORM_R = 4,
  // Frailty shape and rate, 2 values.
  PROCTOPIC_FIELD_FRAILTY = 5,
} ProctopicField;

// A list of event sequences.
typedef struct ProctopicCorpus ProctopicCorpus;

// Result of a fit.
typedef struct ProctopicFit ProctopicFit;

// Model parameters.
typedef struct ProctopicParams ProctopicParams;

// Stop rule for simulation; zero fields are unset.
typedef struct ProctopicStopRule {
  // 1-based terminal event id, 0 for none.
  size_t terminal_event;
  size_t max_events;
  // Values <= 0 mean no time limit.
  double max_time;
} ProctopicStopRule;

// Fit settings. Obtain defaults from [`proctopic_fit_options_default`].
typedef struct ProctopicFitOptions {
  size_t k;
  size_t max_iters;
  double rel_tol;
  size_t restarts;
  uint64_t seed;
  // 0 means all cores.
  size_t threads;
  // Non-zero drops gap times from the model.
  int32_t ignore_time;
} ProctopicFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next call into the library on the same thread.
const char *proctopic_last_error(void);

// Library version as a static nul-terminated string.
const char *proctopic_version(void);

// Empty corpus.
struct ProctopicCorpus *proctopic_corpus_new(void);

// Appends one sequence of `n` events with 1-based ids and strictly
// increasing positive times.
//
// # Safety
// `corpus` must be a live handle, `id` a nul-terminated string, and
// `events`/`times` must point to `n` readable values.
enum ProctopicStatus proctopic_corpus_push(struct ProctopicCorpus *corpus,
                                           const char *id,
                                           const uint32_t *events,
                                           const double *times,
                                           size_t n);

// Reads a corpus file.
//
// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum ProctopicStatus proctopic_corpus_load(const char *path, struct ProctopicCorpus **out);

// Writes a corpus file with numeric labels.
//
// # Safety
// `corpus` must be a live handle and `path` a nul-terminated string.
enum ProctopicStatus proctopic_corpus_save(const struct ProctopicCorpus *corpus, const char *path);

// Number of sequences; 0 for a null handle.
//
// # Safety
// `corpus` must be null or a live handle.
size_t proctopic_corpus_len(const struct ProctopicCorpus *corpus);

// Total number of events; 0 for a null handle.
//
// # Safety
// `corpus` must be null or a live handle.
size_t proctopic_corpus_total_events(const struct ProctopicCorpus *corpus);

// # Safety
// `corpus` must be null or a handle not yet freed.
void proctopic_corpus_free(struct ProctopicCorpus *corpus);

// Builds parameters from row-major arrays: `b` is K×V, `g` and `r` are
// K×K, `p0` has K entries.
//
// # Safety
// Each pointer must reference the stated number of readable values and
// `out` must be writable.
enum ProctopicStatus proctopic_params_new(size_t k,
                                          size_t v,
                                          const double *b,
                                          const double *g,
                                          const double *p0,
                                          const double *r,
                                          double a,
                                          double d,
                                          struct ProctopicParams **out);

// Reads a parameter file.
//
// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum ProctopicStatus proctopic_params_load(const char *path, struct ProctopicParams **out);

// Writes a parameter file.
//
// # Safety
// `params` must be a live handle and `path` a nul-terminated string.
enum ProctopicStatus proctopic_params_save(const struct ProctopicParams *params, const char *path);

// # Safety
// `params` must be null or a live handle.
size_t proctopic_params_k(const struct ProctopicParams *params);

// # Safety
// `params` must be null or a live handle.
size_t proctopic_params_v(const struct ProctopicParams *params);

// Copies a parameter block, row-major, into `out` of capacity `len`.
//
// # Safety
// `params` must be a live handle and `out` must have room for `len`
// values.
enum ProctopicStatus proctopic_params_get(const struct ProctopicParams *params,
                                          enum ProctopicField field,
                                          double *out,
                                          size_t len);

// # Safety
// `params` must be null or a handle not yet freed.
void proctopic_params_free(struct ProctopicParams *params);

// Simulates `m` examinees. Deterministic in `seed`.
//
// # Safety
// `params` must be a live handle and `out` writable.
enum ProctopicStatus proctopic_simulate(const struct ProctopicParams *params,
                                        struct ProctopicStopRule stop,
                                        size_t m,
                                        uint64_t seed,
                                        struct ProctopicCorpus **out);

// Default fit options for `k` topics.
struct ProctopicFitOptions proctopic_fit_options_default(size_t k);

// Fits the model. `init` may be null; otherwise it seeds the first
// restart.
//
// # Safety
// `corpus` must be a live handle, `init` null or a live handle, and
// `out` writable.
enum ProctopicStatus proctopic_fit(const struct ProctopicCorpus *corpus,
                                   struct ProctopicFitOptions options,
                                   const struct ProctopicParams *init,
                                   struct ProctopicFit **out);

// Copies the fitted parameters into a new handle.
//
// # Safety
// `fit` must be a live handle and `out` writable.
enum ProctopicStatus proctopic_fit_params(const struct ProctopicFit *fit,
                                          struct ProctopicParams **out);

// Final ELBO of the best restart; NaN for a null handle.
//
// # Safety
// `fit` must be null or a live handle.
double proctopic_fit_elbo(const struct ProctopicFit *fit);

// Iterations run by the best restart.
//
// # Safety
// `fit` must be null or a live handle.
size_t proctopic_fit_iterations(const struct ProctopicFit *fit);

// 1 if the best restart met the tolerance, else 0.
//
// # Safety
// `fit` must be null or a live handle.
int32_t proctopic_fit_converged(const struct ProctopicFit *fit);

// Copies examinee `i`'s normalized γ (K×K, row-major) into `out`.
//
// # Safety
// `fit` must be a live handle and `out` must have room for `len` values.
enum ProctopicStatus proctopic_fit_gamma(const struct ProctopicFit *fit,
                                         size_t i,
                                         double *out,
                                         size_t len);

// # Safety
// `fit` must be null or a handle not yet freed.
void proctopic_fit_free(struct ProctopicFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROCTOPIC_H */
