/* C interface to the otface library.
 *
 * Every function returns an otface_status. On failure the message for the
 * calling thread is available from otface_last_error() until the next call
 * from that thread. Handles are opaque; free them with the matching _free
 * function (passing NULL is a no-op).
 *
 * Variable-length outputs use a two-call convention: pass a NULL buffer to
 * learn the required count, then call again with enough room. A buffer
 * that is too small yields OTFACE_ERR_SIZE with the count still reported.
 */
#ifndef OTFACE_H
#define OTFACE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(OTFACE_BUILDING)
#    define OTFACE_API __declspec(dllexport)
#  else
#    define OTFACE_API __declspec(dllimport)
#  endif
#else
#  define OTFACE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum otface_status {
  OTFACE_OK = 0,
  OTFACE_ERR_DIMENSION = 1,
  OTFACE_ERR_CONFIG = 2,
  OTFACE_ERR_DEGENERATE_INPUT = 3,
  OTFACE_ERR_NUMERICAL_REGIME = 4,
  OTFACE_ERR_CONTRACT = 5,
  OTFACE_ERR_SIZE = 6,
  OTFACE_ERR_PARSE = 7,
  OTFACE_ERR_IO = 8,
  OTFACE_ERR_NON_FINITE = 9,
  OTFACE_ERR_INVALID_ARGUMENT = 10, /* NULL handle or pointer */
  OTFACE_ERR_INTERNAL = 99
} otface_status;

OTFACE_API const char* otface_version(void);
OTFACE_API const char* otface_status_name(otface_status status);
/* Message of the last failed call on this thread; "" after a success. */
OTFACE_API const char* otface_last_error(void);

/* ---- Run configuration ------------------------------------------------ */

typedef struct otface_config otface_config;

OTFACE_API otface_status otface_config_new(otface_config** out);
OTFACE_API otface_status otface_config_load(const char* path, otface_config** out);
OTFACE_API otface_status otface_config_parse(const char* text, otface_config** out);
/* "section.key=value"; unknown keys are rejected. */
OTFACE_API otface_status otface_config_set(otface_config* cfg, const char* assignment);
/* Writes a NUL-terminated string; *needed includes the terminator. */
OTFACE_API otface_status otface_config_get(const otface_config* cfg, const char* key, char* buf,
                                           size_t capacity, size_t* needed);
OTFACE_API otface_status otface_config_to_text(const otface_config* cfg, char* buf,
                                               size_t capacity, size_t* needed);
OTFACE_API otface_status otface_config_validate(const otface_config* cfg);
OTFACE_API otface_status otface_config_save(const otface_config* cfg, const char* path);
OTFACE_API void otface_config_free(otface_config* cfg);

/* ---- Optimal transport ------------------------------------------------- */

typedef struct otface_ot_result {
  double value; /* <C, P> */
  size_t iterations;
  double marginal_violation;
  int converged;
} otface_ot_result;

/* Bit flags for otface_ot_solve. */
#define OTFACE_OT_LOG_DOMAIN 1u
#define OTFACE_OT_EPSILON_SCALING 2u

/* cost is n*n row-major with entries in [0, 2]. flags is a combination of
 * OTFACE_OT_* bits. plan may be NULL, otherwise it receives n*n values. */
OTFACE_API otface_status otface_ot_solve(const double* cost, size_t n, double epsilon,
                                         unsigned flags, size_t max_iters, double marginal_tol,
                                         double* plan, otface_ot_result* result);
/* Exact uniform-marginal OT by enumeration; n <= 8. */
OTFACE_API otface_status otface_ot_exact(const double* cost, size_t n, double* value);

/* ---- Hard-group mining ------------------------------------------------- */

typedef struct otface_group {
  size_t anchor;
  size_t positive;
  size_t negative;
} otface_group;

/* embeddings is n*d row-major. cap_per_anchor 0 means uncapped. */
OTFACE_API otface_status otface_mine(const double* embeddings, size_t n, size_t d,
                                     const int64_t* labels, size_t cap_per_anchor,
                                     otface_group* groups, size_t capacity, size_t* count);

/* ---- Data ------------------------------------------------------------- */

typedef struct otface_synthetic_spec {
  size_t num_classes;
  size_t per_class;
  double hardness; /* [0, 1] */
  uint64_t seed;
  size_t image_size;
  int uint8_encoding; /* 0 = raw float32 planes, 1 = 8-bit */
} otface_synthetic_spec;

OTFACE_API void otface_synthetic_spec_default(otface_synthetic_spec* spec);
OTFACE_API otface_status otface_generate_synthetic(const otface_synthetic_spec* spec,
                                                   const char* root);

/* Numeric CSV; a non-numeric first row is skipped as a header. */
OTFACE_API otface_status otface_read_csv(const char* path, double* values, size_t capacity,
                                         size_t* rows, size_t* cols);

/* ---- Training ---------------------------------------------------------- */

typedef struct otface_epoch_metrics {
  size_t epoch;
  double margin_loss;
  double ot_loss;
  double total;
  size_t hard_groups;
  double lr;
} otface_epoch_metrics;

typedef void (*otface_epoch_callback)(const otface_epoch_metrics* metrics, void* user);

/* Writes metrics.csv and model.ckpt (plus periodic epoch<k>.ckpt) to out_dir.
 * OTFACE_SEED, when set, overrides the configured seeds. */
OTFACE_API otface_status otface_train(const otface_config* cfg, const char* data_root,
                                      const char* out_dir, otface_epoch_callback callback,
                                      void* user);

/* ---- Models ------------------------------------------------------------ */

typedef struct otface_model otface_model;

OTFACE_API otface_status otface_model_load(const char* checkpoint, otface_model** out);
OTFACE_API otface_status otface_model_save(const otface_model* model, const char* checkpoint);
/* New config handle holding the checkpoint's configuration. */
OTFACE_API otface_status otface_model_config(const otface_model* model, otface_config** out);
OTFACE_API otface_status otface_model_epoch(const otface_model* model, uint64_t* epoch);
OTFACE_API otface_status otface_model_embedding_dim(const otface_model* model, size_t* dim);
/* images: count * c * s * s planar values; out: count * embedding_dim. */
OTFACE_API otface_status otface_model_embed(const otface_model* model, const double* images,
                                            size_t count, double* embeddings);
OTFACE_API void otface_model_free(otface_model* model);

/* ---- Verification ------------------------------------------------------ */

typedef struct otface_report otface_report;

/* Embeds the dataset at data_root and runs the checkpoint's eval settings.
 * eval_cfg may be NULL; when given, its eval.* keys replace the model's. */
OTFACE_API otface_status otface_eval_model(const otface_model* model, const char* data_root,
                                           const otface_config* eval_cfg, otface_report** out);
/* Scores pairs (columns a,b,same,fold) over embedding rows. labels_csv may
 * be NULL; when given, rank-1 identification is added with the first row of
 * each label as gallery. */
OTFACE_API otface_status otface_eval_embeddings(const char* embeddings_csv,
                                                const char* pairs_csv, const char* labels_csv,
                                                size_t folds, const double* far_targets,
                                                size_t num_targets, otface_report** out);
OTFACE_API otface_status otface_report_mean_accuracy(const otface_report* rep, double* out);
OTFACE_API otface_status otface_report_rank1(const otface_report* rep, double* out,
                                             int* available);
/* Any path may be NULL to skip that file. */
OTFACE_API otface_status otface_report_write(const otface_report* rep, const char* jsonl_path,
                                             const char* csv_path, const char* roc_path);
OTFACE_API void otface_report_free(otface_report* rep);

/* Pair-level protocol on caller-held scores; same[i] is 0 or 1. */
OTFACE_API otface_status otface_kfold_accuracy(const double* scores, const int* same,
                                               const size_t* folds, size_t n, size_t k,
                                               double* mean_accuracy, double* fold_accuracy);
OTFACE_API otface_status otface_tar_at_far(const double* scores, const int* same, size_t n,
                                           const double* far_targets, size_t num_targets,
                                           double* tar, int* attainable);
OTFACE_API otface_status otface_rank1(const double* probes, const size_t* probe_labels,
                                      size_t num_probes, const double* gallery,
                                      const size_t* gallery_labels, size_t num_gallery,
                                      size_t d, double* accuracy);

#ifdef __cplusplus
}
#endif

#endif /* OTFACE_H */
