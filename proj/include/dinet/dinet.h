/* C interface to the dinet training engine.
 *
 * Every function returns a dinet_status. On failure the message of the most
 * recent error on the calling thread is available from dinet_last_error().
 * Objects are opaque handles released with the matching *_free function;
 * passing NULL to a *_free function is a no-op. */
#ifndef DINET_DINET_H
#define DINET_DINET_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DINET_API __declspec(dllexport)
#else
#define DINET_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dinet_status {
  DINET_OK = 0,
  DINET_ERR_INVALID_ARGUMENT = 1,
  DINET_ERR_SHAPE_MISMATCH = 2,
  DINET_ERR_IO = 3,
  DINET_ERR_CORRUPT_FILE = 4,
  DINET_ERR_VERSION_MISMATCH = 5,
  DINET_ERR_DETACHED = 6,
  DINET_ERR_NON_FINITE = 7,
  DINET_ERR_DIVERGED = 8,
  DINET_ERR_ALREADY_EXISTS = 9,
  DINET_ERR_GRAD_CHECK_FAILED = 10,
  DINET_ERR_INTERNAL = 11
} dinet_status;

typedef struct dinet_config dinet_config;
typedef struct dinet_dataset dinet_dataset;
typedef struct dinet_run dinet_run; /* trained model plus training progress */

DINET_API const char* dinet_last_error(void);
DINET_API const char* dinet_status_name(dinet_status status);
DINET_API const char* dinet_version(void);

/* Configuration. Overrides take "dotted.key=value" with a JSON value. */
DINET_API dinet_status dinet_config_create(dinet_config** out);
DINET_API dinet_status dinet_config_load(const char* path, dinet_config** out);
DINET_API dinet_status dinet_config_from_json(const char* json, dinet_config** out);
DINET_API dinet_status dinet_config_set(dinet_config* config, const char* assignment);
DINET_API dinet_status dinet_config_set_seed(dinet_config* config, uint64_t seed);
DINET_API dinet_status dinet_config_seed(const dinet_config* config, uint64_t* seed);
DINET_API dinet_status dinet_config_hash(const dinet_config* config, uint64_t* hash);
/* Copies the JSON text (NUL-terminated) into buf when it fits; *needed
 * receives the full size including the terminator. buf may be NULL. */
DINET_API dinet_status dinet_config_to_json(const dinet_config* config, char* buf, size_t capacity, size_t* needed);
DINET_API dinet_status dinet_config_save(const dinet_config* config, const char* path);
DINET_API void dinet_config_free(dinet_config* config);

/* Datasets. */
typedef struct dinet_dataset_counts {
  size_t train_source;
  size_t train_target;
  size_t test_source;
  size_t test_target;
  size_t num_classes;
} dinet_dataset_counts;

DINET_API dinet_status dinet_dataset_generate(const dinet_config* config, dinet_dataset** out);
DINET_API dinet_status dinet_dataset_save(const dinet_dataset* dataset, const char* dir);
DINET_API dinet_status dinet_dataset_load(const char* dir, dinet_dataset** out);
DINET_API dinet_status dinet_dataset_counts_get(const dinet_dataset* dataset, dinet_dataset_counts* out);
/* Checks that the dataset's class count and clip shape fit the config. */
DINET_API dinet_status dinet_dataset_check(const dinet_dataset* dataset, const dinet_config* config);
DINET_API void dinet_dataset_free(dinet_dataset* dataset);

/* Training. */
typedef struct dinet_step_info {
  size_t step;
  size_t total_steps;
  size_t epoch;
  double p;
  double lambda;
  double lr;
  double loss_action;
  double loss_domain;
  double objective;
} dinet_step_info;

typedef void (*dinet_step_callback)(const dinet_step_info* info, void* user);
typedef void (*dinet_epoch_callback)(size_t epoch, uint64_t batch_hash, void* user);

typedef struct dinet_train_options {
  /* Checkpoint to continue from; its stored run configuration is used and
   * the config argument of dinet_train may be NULL. */
  const char* resume_path;
  /* Written after every epoch and when training stops. May be NULL. */
  const char* checkpoint_path;
  /* Stop once this many steps are complete (0 = run to the end). */
  size_t stop_after_step;
  dinet_step_callback on_step;
  dinet_epoch_callback on_epoch;
  void* user;
} dinet_train_options;

DINET_API void dinet_train_options_init(dinet_train_options* options);
DINET_API dinet_status dinet_train(const dinet_config* config, const dinet_dataset* dataset,
                                   const dinet_train_options* options, dinet_run** out);

DINET_API dinet_status dinet_run_load(const char* checkpoint_path, dinet_run** out);
DINET_API dinet_status dinet_run_save(const dinet_run* run, const char* checkpoint_path);
DINET_API dinet_status dinet_run_progress(const dinet_run* run, size_t* step, size_t* total_steps);
/* A copy of the run configuration stored with the model. */
DINET_API dinet_status dinet_run_config(const dinet_run* run, dinet_config** out);
DINET_API dinet_status dinet_run_last_step(const dinet_run* run, dinet_step_info* out);
DINET_API dinet_status dinet_run_write_history(const dinet_run* run, const char* csv_path);
DINET_API dinet_status dinet_run_write_batch_hashes(const dinet_run* run, const char* csv_path);
DINET_API dinet_status dinet_run_input_shape(const dinet_run* run, size_t shape[4]);
DINET_API void dinet_run_free(dinet_run* run);

/* Evaluation. */
typedef struct dinet_metrics {
  double source_top1;
  double target_top1;
  double domain_probe; /* valid when has_domain_probe != 0 */
  int has_domain_probe;
  size_t num_classes;
} dinet_metrics;

/* Writes metrics.json and the confusion CSVs into out_dir when it is not
 * NULL. The model is not modified. */
DINET_API dinet_status dinet_evaluate(dinet_run* run, const dinet_dataset* dataset, int run_probe, const char* out_dir,
                                      dinet_metrics* out);
/* clips: n row-major [C,T,H,W] clips matching dinet_run_input_shape. */
DINET_API dinet_status dinet_predict(dinet_run* run, const float* clips, size_t n, int* labels);

/* Finite-difference gradient checks in double precision. scope is "ops" or
 * "model". Returns DINET_ERR_GRAD_CHECK_FAILED when any op exceeds the
 * tolerance; the callback receives every op either way. */
typedef void (*dinet_grad_check_callback)(const char* op, size_t configs, double max_error, int passed, void* user);

typedef struct dinet_grad_check_options {
  size_t configs_per_op;
  uint64_t seed;
  int inject_conv_fault;
  dinet_grad_check_callback on_result;
  void* user;
} dinet_grad_check_options;

DINET_API void dinet_grad_check_options_init(dinet_grad_check_options* options);
DINET_API dinet_status dinet_grad_check(const char* scope, const dinet_grad_check_options* options);

#ifdef __cplusplus
}
#endif

#endif
