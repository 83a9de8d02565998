#ifndef IDMLAB_H
#define IDMLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IdmlabStatus {
  IDMLAB_STATUS_OK = 0,
  IDMLAB_STATUS_NULL_POINTER = 1,
  IDMLAB_STATUS_INVALID_ARGUMENT = 2,
  IDMLAB_STATUS_DOMAIN_ERROR = 3,
  IDMLAB_STATUS_IO_ERROR = 4,
  IDMLAB_STATUS_PARSE_ERROR = 5,
  IDMLAB_STATUS_VERIFICATION_FAILED = 6,
  IDMLAB_STATUS_PANIC = 7,
} IdmlabStatus;

/**
 * A grid together with its expert.
 */
typedef struct IdmlabGrid IdmlabGrid;

/**
 * A trained or analytic classifier.
 */
typedef struct IdmlabModel IdmlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *idmlab_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *idmlab_last_error(void);

const char *idmlab_status_name(enum IdmlabStatus status);

/**
 * Seeded maze of side `size` with its shortest-path expert.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum IdmlabStatus idmlab_maze_new(size_t size, uint64_t seed, struct IdmlabGrid **out_grid);

/**
 * Open `n`×`n` grid with the right-or-down expert.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum IdmlabStatus idmlab_open_grid_new(size_t n, double p_right, struct IdmlabGrid **out_grid);

/**
 * # Safety
 * `grid` must come from this library and not be used afterwards.
 */
void idmlab_grid_free(struct IdmlabGrid *grid);

/**
 * # Safety
 * Pointers must be valid.
 */
enum IdmlabStatus idmlab_grid_size(const struct IdmlabGrid *grid, size_t *width, size_t *height);

/**
 * Start and goal cells.
 *
 * # Safety
 * Pointers must be valid.
 */
enum IdmlabStatus idmlab_grid_endpoints(const struct IdmlabGrid *grid,
                                        int32_t *start_xy,
                                        int32_t *goal_xy);

/**
 * Applies action `a` (0 right, 1 left, 2 up, 3 down) at `(x, y)`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum IdmlabStatus idmlab_grid_step(const struct IdmlabGrid *grid,
                                   int32_t x,
                                   int32_t y,
                                   uint32_t action,
                                   int32_t *out_x,
                                   int32_t *out_y);

/**
 * Expert action distribution at `(x, y)` into `probs[4]`.
 *
 * # Safety
 * `probs` must hold 4 doubles.
 */
enum IdmlabStatus idmlab_grid_expert_probs(const struct IdmlabGrid *grid,
                                           int32_t x,
                                           int32_t y,
                                           double *probs);

/**
 * Text map of the grid. Writes at most `len` bytes including the NUL and
 * always stores the required size in `needed`.
 *
 * # Safety
 * `buf` must hold `len` bytes or be null with `len == 0`.
 */
enum IdmlabStatus idmlab_grid_to_text(const struct IdmlabGrid *grid,
                                      char *buf,
                                      size_t len,
                                      size_t *needed);

/**
 * LC inverse dynamics model with logits `W(s' − s)/τ`.
 *
 * # Safety
 * `out_model` must be valid.
 */
enum IdmlabStatus idmlab_model_analytic_pos(double temperature, struct IdmlabModel **out_model);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_model` valid.
 */
enum IdmlabStatus idmlab_model_load(const char *path, struct IdmlabModel **out_model);

/**
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum IdmlabStatus idmlab_model_save(const struct IdmlabModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void idmlab_model_free(struct IdmlabModel *model);

/**
 * Whether the model reads `(s, s')` pairs.
 *
 * # Safety
 * Pointers must be valid.
 */
enum IdmlabStatus idmlab_model_is_idm(const struct IdmlabModel *model, bool *is_idm);

/**
 * Action probabilities for `n` pos-format records. `states` and
 * `next_states` hold `2n` ints as `x, y` pairs; `next_states` may be null
 * for policies. `goals` (`2n` ints) is required only by goal-conditioned
 * models. Writes `4n` doubles into `probs`.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum IdmlabStatus idmlab_model_predict_pos(const struct IdmlabModel *model,
                                           const int32_t *states,
                                           const int32_t *next_states,
                                           const int32_t *goals,
                                           size_t n,
                                           double *probs);

/**
 * Analytic-IDM argmax accuracy (pos and image) on one seeded maze.
 *
 * # Safety
 * Pointers must be valid.
 */
enum IdmlabStatus idmlab_oracle(size_t size,
                                uint64_t seed,
                                double *pos_accuracy,
                                double *img_accuracy);

/**
 * Runs the tabular identity suite; `failures` receives the failed trials.
 *
 * # Safety
 * `failures` must be valid.
 */
enum IdmlabStatus idmlab_verify(size_t trials, uint64_t seed, size_t *failures);

/**
 * Runs a TOML experiment config and writes its CSVs to `out_dir`, or to
 * the config's own output directory when `out_dir` is null.
 *
 * # Safety
 * Strings must be NUL-terminated; `rows` valid.
 */
enum IdmlabStatus idmlab_run_config(const char *config_path,
                                    const char *out_dir,
                                    size_t jobs,
                                    uint64_t seed_offset,
                                    size_t *rows);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IDMLAB_H */
