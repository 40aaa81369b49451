#ifndef MOTILITY3D_H
#define MOTILITY3D_H

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every `m3d_*` call.
 */
typedef enum {
  M3D_STATUS_OK = 0,
  /*
   A required pointer was null.
   */
  M3D_STATUS_NULL_POINTER = 1,
  /*
   Bad argument, unknown architecture, wrong shape.
   */
  M3D_STATUS_INVALID_ARGUMENT = 2,
  /*
   Unreadable or malformed input files.
   */
  M3D_STATUS_DATA = 3,
  /*
   Checkpoint could not be read or does not match its architecture.
   */
  M3D_STATUS_CHECKPOINT = 4,
  /*
   A computation produced NaN or infinity.
   */
  M3D_STATUS_NUMERIC = 5,
  /*
   Internal panic; the handle involved should be freed.
   */
  M3D_STATUS_INTERNAL = 6,
} M3dStatus;

/*
 Grayscale clip of shape (1, T, H, W) with values in [0, 1].
 */
typedef struct M3dClip M3dClip;

/*
 Trained or freshly initialized network.
 */
typedef struct M3dModel M3dModel;

/*
 Output of [`m3d_model_predict`].
 */
typedef struct {
  /*
   0 progressive, 1 non-progressive, 2 immotile.
   */
  uint32_t class_index;
  double probabilities[3];
} M3dPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Owned by the library.
 */
const char *m3d_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *m3d_version(void);

/*
 Randomly initialized model. `arch` is one of `resnet18_3d`, `resnet18_3d_tab`, `resnet34_3d_tab`.

 # Safety
 `arch` must be a NUL-terminated string and `out` a valid pointer.
 */
M3dStatus m3d_model_build(const char *arch, uint64_t seed, M3dModel **out);

/*
 Model from a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
M3dStatus m3d_model_load(const char *path, M3dModel **out);

/*
 Writes the model as a checkpoint. Models that were built rather than loaded are saved with
 epoch 0, uniform class weights, no validation score and the default frame settings.

 # Safety
 `model` must come from this library and `path` be a NUL-terminated string.
 */
M3dStatus m3d_model_save(const M3dModel *model, const char *path);

/*
 Releases a model. NULL is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void m3d_model_free(M3dModel *model);

/*
 Number of trainable scalars.

 # Safety
 `model` must come from this library and `out` be a valid pointer.
 */
M3dStatus m3d_model_param_count(const M3dModel *model, uint64_t *out);

/*
 1 when predictions need a row of 19 standardized tabular features, else 0.

 # Safety
 `model` must come from this library and `out` be a valid pointer.
 */
M3dStatus m3d_model_uses_tabular(const M3dModel *model, int32_t *out);

/*
 Architecture name of the model as a static string, or NULL for a NULL model.

 # Safety
 `model` must be NULL or come from this library.
 */
const char *m3d_model_arch(const M3dModel *model);

/*
 Reads `frame_count` frames from a directory of binary PGM/PPM files. With `height` and
 `width` both 0 the native frame size is kept; otherwise frames must match it exactly.

 # Safety
 `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
M3dStatus m3d_clip_load(const char *dir,
                        size_t frame_count,
                        size_t height,
                        size_t width,
                        M3dClip **out);

/*
 Clip from `t * h * w` caller-owned values, copied.

 # Safety
 `values` must point to `t * h * w` floats and `out` be a valid pointer.
 */
M3dStatus m3d_clip_from_values(const float *values, size_t t, size_t h, size_t w, M3dClip **out);

/*
 Writes `[1, T, H, W]` into `shape`.

 # Safety
 `clip` must come from this library and `shape` point to 4 writable `size_t`.
 */
M3dStatus m3d_clip_shape(const M3dClip *clip, size_t *shape);

/*
 Pointer to the clip values in (T, H, W) row-major order, valid while the clip lives.

 # Safety
 `clip` must be NULL or come from this library.
 */
const float *m3d_clip_data(const M3dClip *clip);

/*
 Releases a clip. NULL is ignored.

 # Safety
 `clip` must come from this library and not be used afterwards.
 */
void m3d_clip_free(M3dClip *clip);

/*
 Class probabilities for one clip. `tabular` holds `tabular_len` standardized features
 and must be NULL with length 0 for models without tabular input.

 # Safety
 `model` and `clip` must come from this library, `tabular` must point to `tabular_len`
 floats when non-NULL, and `out` must be a valid pointer.
 */
M3dStatus m3d_model_predict(const M3dModel *model,
                            const M3dClip *clip,
                            const float *tabular,
                            size_t tabular_len,
                            M3dPrediction *out);

/*
 One-cycle learning rate at `step` (0-based) of a `total_steps` schedule.

 # Safety
 `out` must be a valid pointer.
 */
M3dStatus m3d_one_cycle_lr(double max_lr, size_t total_steps, size_t step, double *out);

/*
 Inverse-frequency class weights `N / (K * n_i)` for `k` class counts.

 # Safety
 `counts` must point to `k` values and `out` to `k` writable doubles.
 */
M3dStatus m3d_class_weights(const size_t *counts, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTILITY3D_H */
