#ifndef APNET_H
#define APNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  APNET_STATUS_OK = 0,
  APNET_STATUS_NULL_POINTER = 1,
  APNET_STATUS_INVALID_ARGUMENT = 2,
  APNET_STATUS_IO = 3,
  APNET_STATUS_FORMAT = 4,
  APNET_STATUS_SHAPE = 5,
  APNET_STATUS_INTERNAL = 6,
} ApnetStatus;

/**
 * A trained network loaded from a checkpoint.
 */
typedef struct ApnetModel ApnetModel;

typedef struct {
  uint64_t params_train;
  uint64_t params_infer;
  /**
   * Inference multiply-accumulates; zero when `has_macs` is false.
   */
  uint64_t macs;
  bool has_macs;
} ApnetAccount;

typedef struct {
  uint64_t total;
  /**
   * Parameters saved relative to the dense convolution.
   */
  uint64_t delta;
} ApnetParamCount;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next `apnet_*` call on the same thread.
 */
const char *apnet_last_error(void);

/**
 * Loads a checkpoint written by the training harness.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
ApnetStatus apnet_model_load(const char *path, ApnetModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`apnet_model_load`] and not be freed twice.
 */
void apnet_model_free(ApnetModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
ApnetStatus apnet_model_num_classes(const ApnetModel *model, size_t *out);

/**
 * Number of pathways the model was trained with.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
ApnetStatus apnet_model_pathways(const ApnetModel *model, size_t *out);

/**
 * Class probabilities for one channel-major image with values in `[0, 1]`.
 * `probs` must hold `probs_len >= num_classes` values.
 *
 * # Safety
 * `data` must point to `channels * height * width` values and `probs` to
 * `probs_len` writable values.
 */
ApnetStatus apnet_model_infer(const ApnetModel *model,
                              const double *data,
                              size_t channels,
                              size_t height,
                              size_t width,
                              double *probs,
                              size_t probs_len);

/**
 * Parameter and MAC accounting for an experiment config given as TOML text.
 *
 * # Safety
 * `config_toml` must be NUL-terminated and `out` valid.
 */
ApnetStatus apnet_account_config(const char *config_toml,
                                 size_t height,
                                 size_t width,
                                 ApnetAccount *out);

/**
 * Parameter count of a pathway convolution with `k` nested widths per side.
 *
 * # Safety
 * `pathway_in` and `pathway_out` must each point to `k` values.
 */
ApnetStatus apnet_apconv_param_count(const size_t *pathway_in,
                                     const size_t *pathway_out,
                                     size_t k,
                                     size_t kernel_h,
                                     size_t kernel_w,
                                     bool bias,
                                     ApnetParamCount *out);

/**
 * Applies a policy, given as JSON (`{"kind": "flip"}` or a list of such
 * objects), to a channel-major image. The same seed gives the same output.
 *
 * # Safety
 * `data` and `out` must each point to `channels * height * width` values.
 */
ApnetStatus apnet_apply_policy(const char *policy_json,
                               uint64_t seed,
                               const double *data,
                               size_t channels,
                               size_t height,
                               size_t width,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APNET_H */
