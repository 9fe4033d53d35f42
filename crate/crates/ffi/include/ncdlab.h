#ifndef NCDLAB_H
#define NCDLAB_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NcdStatus {
  NCD_STATUS_OK = 0,
  NCD_STATUS_NULL_POINTER = 1,
  NCD_STATUS_INVALID_ARGUMENT = 2,
  NCD_STATUS_IO = 3,
  NCD_STATUS_PARSE = 4,
  NCD_STATUS_CONFIG = 5,
  NCD_STATUS_SHAPE = 6,
  NCD_STATUS_NUMERIC = 7,
  NCD_STATUS_DIVERGED = 8,
  NCD_STATUS_CHECKPOINT = 9,
  NCD_STATUS_PANIC = 10,
} NcdStatus;

typedef struct NcdConfig NcdConfig;

typedef struct NcdDataset NcdDataset;

typedef struct NcdModel NcdModel;

typedef struct NcdEvalReport {
  double known_acc;
  double novel_cluster_acc;
  double all_acc;
  size_t n_known;
  size_t n_novel;
} NcdEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`) and returns the full message length in
 * bytes, excluding the terminator. `buf` may be null to query the length.
 */
size_t ncd_last_error_message(char *buf, size_t len);

/**
 * A config holding the defaults.
 */
struct NcdConfig *ncd_config_new(void);

void ncd_config_free(struct NcdConfig *cfg);

/**
 * Sets one `key=value` config entry, e.g. `("beta", "0.2")`.
 */
enum NcdStatus ncd_config_set(struct NcdConfig *cfg, const char *key, const char *value);

/**
 * Parses a whole `key=value` config text on top of the defaults.
 */
enum NcdStatus ncd_config_parse(const char *text_in, struct NcdConfig **out);

/**
 * Writes the 16 hex digit config hash plus a NUL into `buf`, which must
 * hold at least 17 bytes.
 */
enum NcdStatus ncd_config_hash(const struct NcdConfig *cfg, char *buf, size_t len);

/**
 * Generates a synthetic dataset from `key=value` spec text; null or empty
 * text selects the default spec.
 */
enum NcdStatus ncd_dataset_generate(const char *spec_text, struct NcdDataset **out);

enum NcdStatus ncd_dataset_load(const char *path, struct NcdDataset **out);

enum NcdStatus ncd_dataset_save(const struct NcdDataset *dataset, const char *path);

void ncd_dataset_free(struct NcdDataset *dataset);

/**
 * Number of samples, or 0 for a null handle.
 */
size_t ncd_dataset_len(const struct NcdDataset *dataset);

size_t ncd_dataset_dim(const struct NcdDataset *dataset);

size_t ncd_dataset_num_known(const struct NcdDataset *dataset);

size_t ncd_dataset_num_novel(const struct NcdDataset *dataset);

/**
 * Supervised pretraining; writes a new model handle to `out`.
 */
enum NcdStatus ncd_pretrain(const struct NcdDataset *dataset,
                            const struct NcdConfig *cfg,
                            struct NcdModel **out);

/**
 * Discovery training from `pretrained`, which is left untouched.
 */
enum NcdStatus ncd_discover(const struct NcdDataset *dataset,
                            const struct NcdModel *pretrained,
                            const struct NcdConfig *cfg,
                            struct NcdModel **out);

enum NcdStatus ncd_model_load(const char *path, struct NcdModel **out);

enum NcdStatus ncd_model_save(const struct NcdModel *model, const char *path);

void ncd_model_free(struct NcdModel *model);

/**
 * Task-agnostic evaluation on the test splits.
 */
enum NcdStatus ncd_evaluate(const struct NcdModel *model,
                            const struct NcdDataset *dataset,
                            const struct NcdConfig *cfg,
                            struct NcdEvalReport *out);

/**
 * Clustering accuracy of the novel head on the unlabeled training split.
 */
enum NcdStatus ncd_train_novel_acc(const struct NcdModel *model,
                                   const struct NcdDataset *dataset,
                                   const struct NcdConfig *cfg,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCDLAB_H */
