#ifndef VOXLESION_H
#define VOXLESION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VlStatus {
  VL_STATUS_OK = 0,
  VL_STATUS_NULL_POINTER = 1,
  VL_STATUS_INVALID_ARGUMENT = 2,
  VL_STATUS_SHAPE_MISMATCH = 3,
  VL_STATUS_IO = 4,
  VL_STATUS_FORMAT = 5,
  VL_STATUS_RUNTIME = 6,
  VL_STATUS_PANIC = 7,
} VlStatus;

// A loaded checkpoint with its decision threshold.
typedef struct VlModel VlModel;

// A generated phantom case.
typedef struct VlPhantom VlPhantom;

// Whole-volume prediction.
typedef struct VlPrediction VlPrediction;

typedef struct VlCandidate {
  double score;
  size_t size;
  double volume_mm3;
  double centroid[3];
} VlCandidate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *vl_last_error(void);

// Library version as a static NUL-terminated string.
const char *vl_version(void);

// Generate a phantom with the default 64³ specification.
//
// # Safety
// `out` must be a valid pointer.
enum VlStatus vl_phantom_generate(uint64_t seed, struct VlPhantom **out);

// Writes the three dimensions of the phantom grid into `shape`.
//
// # Safety
// `p` must come from [`vl_phantom_generate`]; `shape` must hold 3 elements.
enum VlStatus vl_phantom_shape(const struct VlPhantom *p, size_t *shape);

// Copies the image (C order) into `buf` of `len` floats.
//
// # Safety
// `p` must be a live phantom and `buf` must hold `len` floats.
enum VlStatus vl_phantom_image(const struct VlPhantom *p, float *buf, size_t len);

// Copies the prostate mask (0/1) into `buf`.
//
// # Safety
// `p` must be a live phantom and `buf` must hold `len` bytes.
enum VlStatus vl_phantom_prostate(const struct VlPhantom *p, uint8_t *buf, size_t len);

// Copies the lesion label (0/1) into `buf`.
//
// # Safety
// `p` must be a live phantom and `buf` must hold `len` bytes.
enum VlStatus vl_phantom_label(const struct VlPhantom *p, uint8_t *buf, size_t len);

// # Safety
// `p` must come from [`vl_phantom_generate`] or be null.
void vl_phantom_free(struct VlPhantom *p);

// Mean Shannon entropy of `n_voxels` class distributions stored voxel-major.
//
// # Safety
// `probs` must hold `n_voxels * n_classes` doubles; `out` must be valid.
enum VlStatus vl_entropy_loss(const double *probs, size_t n_voxels, size_t n_classes, double *out);

// Soft Dice loss of lesion probabilities `p` against binary labels `y`.
//
// # Safety
// `p` and `y` must hold `n` elements; `out` must be valid.
enum VlStatus vl_dice_loss(const double *p, const uint8_t *y, size_t n, double smooth, double *out);

// ROC-AUC of `scores` against 0/1 `labels`; fails when one class is absent.
//
// # Safety
// `scores` and `labels` must hold `n` elements; `out` must be valid.
enum VlStatus vl_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Load a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum VlStatus vl_model_load(const char *path, struct VlModel **out);

// # Safety
// `m` must be a live model; `out` must be valid.
enum VlStatus vl_model_num_parameters(const struct VlModel *m, size_t *out);

// # Safety
// `m` must come from [`vl_model_load`] or be null.
void vl_model_free(struct VlModel *m);

// Predict a C-order volume of shape `dims` with voxel `spacing` (mm).
//
// # Safety
// `image` must hold `dims[0]*dims[1]*dims[2]` floats and `mask` as many
// bytes; `dims` and `spacing` must hold 3 elements; `out` must be valid.
enum VlStatus vl_predict(const struct VlModel *m,
                         const float *image,
                         const uint8_t *mask,
                         const size_t *dims,
                         const double *spacing,
                         struct VlPrediction **out);

// # Safety
// `p` must be a live prediction and `buf` must hold `len` floats.
enum VlStatus vl_prediction_probability(const struct VlPrediction *p, float *buf, size_t len);

// # Safety
// `p` must be a live prediction and `buf` must hold `len` floats.
enum VlStatus vl_prediction_entropy(const struct VlPrediction *p, float *buf, size_t len);

// # Safety
// `p` must be a live prediction; `out` must be valid.
enum VlStatus vl_prediction_patient_score(const struct VlPrediction *p, double *out);

// # Safety
// `p` must be a live prediction; `out` must be valid.
enum VlStatus vl_prediction_num_candidates(const struct VlPrediction *p, size_t *out);

// Candidate `index`, in descending score order.
//
// # Safety
// `p` must be a live prediction; `out` must be valid.
enum VlStatus vl_prediction_candidate(const struct VlPrediction *p,
                                      size_t index,
                                      struct VlCandidate *out);

// # Safety
// `p` must come from [`vl_predict`] or be null.
void vl_prediction_free(struct VlPrediction *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXLESION_H */
