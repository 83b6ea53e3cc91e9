#ifndef VOCMERGE_H
#define VOCMERGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Filter candidates by Hamming distance (needs an index with signatures).
 */
#define VM_FLAG_HAMMING 1

/*
 Burstiness weighting of difference-set votes (B1 and Bayes).
 */
#define VM_FLAG_BURSTINESS 2

/*
 Status code of every fallible call.
 */
typedef enum VmStatus {
  VM_STATUS_OK = 0,
  VM_STATUS_NULL_ARGUMENT = 1,
  VM_STATUS_INVALID_ARGUMENT = 2,
  VM_STATUS_IO = 3,
  VM_STATUS_FORMAT = 4,
  VM_STATUS_INVALID_INDEX = 5,
  VM_STATUS_INVALID_CONFIG = 6,
  VM_STATUS_DIM_MISMATCH = 7,
  VM_STATUS_OUT_OF_RANGE = 8,
  VM_STATUS_PANIC = 9,
} VmStatus;

/*
 Scoring method selector.
 */
typedef enum VmMethod {
  /*
   Single vocabulary; pick it with `b0_vocab`.
   */
  VM_METHOD_B0 = 0,
  VM_METHOD_B1 = 1,
  VM_METHOD_B2 = 2,
  VM_METHOD_BAYES = 3,
  VM_METHOD_RANK_AGGREGATION = 4,
} VmMethod;

/*
 Merge configuration.
 */
typedef struct VmConfig VmConfig;

/*
 A loaded index with its vocabularies.
 */
typedef struct VmIndex VmIndex;

/*
 A ranking, best first.
 */
typedef struct VmResults VmResults;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null if none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *vm_last_error(void);

/*
 Loads an index and the `n_vocab` vocabularies it was built with.

 # Safety
 `index_path` and every `vocab_paths[i]` must be valid nul-terminated
 strings; `vocab_paths` must point to `n_vocab` of them.
 */
enum VmStatus vm_index_load(const char *index_path,
                            const char *const *vocab_paths,
                            uintptr_t n_vocab,
                            struct VmIndex **out);

/*
 # Safety
 `index` must come from [`vm_index_load`] and not be used afterwards.
 */
void vm_index_free(struct VmIndex *index);

/*
 Database size, or 0 for a null handle.

 # Safety
 `index` must be null or a live handle.
 */
uint32_t vm_index_num_images(const struct VmIndex *index);

/*
 Number of vocabularies `K`, or 0 for a null handle.

 # Safety
 `index` must be null or a live handle.
 */
uintptr_t vm_index_num_vocabularies(const struct VmIndex *index);

/*
 Descriptor dimension, or 0 for a null handle.

 # Safety
 `index` must be null or a live handle.
 */
uintptr_t vm_index_dim(const struct VmIndex *index);

/*
 The shipped configuration.

 # Safety
 `out` must be a valid pointer.
 */
enum VmStatus vm_config_default(struct VmConfig **out);

/*
 Reads a `key=value` configuration file.

 # Safety
 `config_path` must be a nul-terminated string and `out` a valid pointer.
 */
enum VmStatus vm_config_load(const char *config_path, struct VmConfig **out);

/*
 # Safety
 `config` must come from a `vm_config_*` constructor and not be used
 afterwards.
 */
void vm_config_free(struct VmConfig *config);

/*
 # Safety
 `config` must be a live handle.
 */
enum VmStatus vm_config_set_c(struct VmConfig *config, double c);

/*
 Sets the term-2 line `a * r + b`.

 # Safety
 `config` must be a live handle.
 */
enum VmStatus vm_config_set_term2(struct VmConfig *config, double a, double b);

/*
 # Safety
 `config` must be a live handle.
 */
enum VmStatus vm_config_set_he_threshold(struct VmConfig *config, uint32_t threshold);

/*
 Nonzero pins every Bayes weight to 1.

 # Safety
 `config` must be a live handle.
 */
enum VmStatus vm_config_set_force_unit_weight(struct VmConfig *config, bool on);

/*
 Weight of an intersection-set feature with the given cardinalities in a
 database of `n_images`.

 # Safety
 `config` must be a live handle and `out` a valid pointer.
 */
enum VmStatus vm_bayes_weight(uintptr_t inter_card,
                              uintptr_t union_card,
                              uint64_t n_images,
                              const struct VmConfig *config,
                              double *out);

/*
 Scores one query image given as `n_features` row-major descriptors of
 `dim` floats. `method` is a `VmMethod` value; `flags` combines
 `VM_FLAG_*` values.

 # Safety
 `index` and `config` must be live handles, `descriptors` must point to
 `n_features * dim` floats and `out` must be a valid pointer.
 */
enum VmStatus vm_query(const struct VmIndex *index,
                       const struct VmConfig *config,
                       uint32_t method,
                       uintptr_t b0_vocab,
                       uint32_t flags,
                       const float *descriptors,
                       uintptr_t n_features,
                       uintptr_t dim,
                       struct VmResults **out);

/*
 Number of ranked images, or 0 for a null handle.

 # Safety
 `results` must be null or a live handle.
 */
uintptr_t vm_results_len(const struct VmResults *results);

/*
 Entry `rank` (0 = best).

 # Safety
 `results` must be a live handle; `image_id` and `score` valid pointers.
 */
enum VmStatus vm_results_get(const struct VmResults *results,
                             uintptr_t rank,
                             uint32_t *image_id,
                             double *score);

/*
 # Safety
 `results` must come from [`vm_query`] and not be used afterwards.
 */
void vm_results_free(struct VmResults *results);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOCMERGE_H */
