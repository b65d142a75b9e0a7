#ifndef KGREASON_H
#define KGREASON_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values match the CLI exit codes.
 */
typedef enum KgStatus {
  KG_STATUS_OK = 0,
  /**
   * A required pointer argument was null or a string was not UTF-8.
   */
  KG_STATUS_INVALID_ARGUMENT = 1,
  KG_STATUS_CONFIG = 2,
  KG_STATUS_DATA = 3,
  KG_STATUS_NUMERIC = 4,
  /**
   * The engine panicked; the handle involved should be discarded.
   */
  KG_STATUS_INTERNAL = 5,
} KgStatus;

typedef enum KgDirection {
  /**
   * The query entity is the head; tails are predicted.
   */
  KG_DIRECTION_OUT = 0,
  /**
   * The query entity is the tail; heads are predicted.
   */
  KG_DIRECTION_IN = 1,
} KgDirection;

/**
 * Query set for [`kg_model_evaluate`].
 */
typedef enum KgQuerySet {
  KG_QUERY_SET_TEST = 0,
  KG_QUERY_SET_DEV = 1,
  /**
   * Test triples of the split's target relation.
   */
  KG_QUERY_SET_TARGET = 2,
} KgQuerySet;

typedef enum KgProtocol {
  KG_PROTOCOL_RAW = 0,
  KG_PROTOCOL_FILTERED = 1,
} KgProtocol;

typedef enum KgSide {
  KG_SIDE_HEAD = 0,
  KG_SIDE_TAIL = 1,
  KG_SIDE_BOTH = 2,
} KgSide;

/**
 * A loaded dataset directory.
 */
typedef struct KgDataset KgDataset;

/**
 * A checkpoint bound to the dataset it was loaded against.
 */
typedef struct KgModel KgModel;

/**
 * Aggregate ranking metrics.
 */
typedef struct KgMetrics {
  double mr;
  double mrr;
  double hit1;
  double hit3;
  double hit10;
  size_t n_queries;
} KgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread (empty if none). The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *kg_last_error(void);

/**
 * Loads `triples.tsv`, optional `texts.jsonl` and `split.json` from `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KgStatus kg_dataset_load(const char *dir, struct KgDataset **out);

/**
 * # Safety
 * `ds` must come from [`kg_dataset_load`] and not be used afterwards. Null is ignored.
 */
void kg_dataset_free(struct KgDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle or null (which yields 0).
 */
size_t kg_dataset_num_entities(const struct KgDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle or null (which yields 0).
 */
size_t kg_dataset_num_relations(const struct KgDataset *ds);

/**
 * # Safety
 * `ds` live, `name` NUL-terminated, `out` valid.
 */
enum KgStatus kg_dataset_entity_id(const struct KgDataset *ds, const char *name, uint32_t *out);

/**
 * # Safety
 * `ds` live, `name` NUL-terminated, `out` valid.
 */
enum KgStatus kg_dataset_relation_id(const struct KgDataset *ds, const char *name, uint32_t *out);

/**
 * Copies the entity's name (NUL-terminated) into `buf` when it fits and
 * stores the required size including the NUL in `needed`.
 *
 * # Safety
 * `ds` live; `buf` writable for `cap` bytes (may be null when `cap` is 0); `needed` valid.
 */
enum KgStatus kg_dataset_entity_name(const struct KgDataset *ds,
                                     uint32_t id,
                                     char *buf,
                                     size_t cap,
                                     size_t *needed);

/**
 * Loads a checkpoint and computes final entity vectors over the dataset's
 * training graph.
 *
 * # Safety
 * `ds` live, `path` NUL-terminated, `out` valid.
 */
enum KgStatus kg_model_load(const struct KgDataset *ds, const char *path, struct KgModel **out);

/**
 * # Safety
 * `model` must come from [`kg_model_load`] and not be used afterwards. Null is ignored.
 */
void kg_model_free(struct KgModel *model);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live model handle or null.
 */
size_t kg_model_dim(const struct KgModel *model);

/**
 * 1 when lower scores are more plausible (TransE), 0 otherwise.
 *
 * # Safety
 * `model` must be a live model handle or null (which yields 0).
 */
int32_t kg_model_lower_is_better(const struct KgModel *model);

/**
 * # Safety
 * `model` live, `out` valid.
 */
enum KgStatus kg_model_score(const struct KgModel *model,
                             uint32_t head,
                             uint32_t relation,
                             uint32_t tail,
                             double *out);

/**
 * Copies the final vector of `entity` into `out` (`cap` doubles at least `dim`).
 *
 * # Safety
 * `model` live; `out` writable for `cap` doubles.
 */
enum KgStatus kg_model_entity_vector(const struct KgModel *model,
                                     uint32_t entity,
                                     double *out,
                                     size_t cap);

/**
 * Top-`k` candidates for the open side of a query, most plausible first.
 * Writes up to `k` ids and scores and stores the count in `out_len`.
 * With `exclude_known` nonzero, candidates forming a training triple are skipped.
 *
 * # Safety
 * `model`, `ds` live; `out_ids` and `out_scores` writable for `k` values; `out_len` valid.
 */
enum KgStatus kg_model_predict(const struct KgModel *model,
                               const struct KgDataset *ds,
                               uint32_t entity,
                               uint32_t relation,
                               enum KgDirection direction,
                               size_t k,
                               int32_t exclude_known,
                               uint32_t *out_ids,
                               double *out_scores,
                               size_t *out_len);

/**
 * Ranks a query set of the dataset's split under one protocol and side.
 *
 * # Safety
 * `model`, `ds` live; `out` valid.
 */
enum KgStatus kg_model_evaluate(const struct KgModel *model,
                                const struct KgDataset *ds,
                                enum KgQuerySet set,
                                enum KgProtocol protocol,
                                enum KgSide side,
                                struct KgMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGREASON_H */
