#ifndef MDM_H
#define MDM_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; the non-zero values match the `mdm` exit codes.
 */
typedef enum MdmStatus {
  MDM_STATUS_OK = 0,
  /**
   * A null pointer, bad UTF-8 or an out-of-range index.
   */
  MDM_STATUS_INVALID_ARGUMENT = 1,
  MDM_STATUS_VALIDATION = 2,
  MDM_STATUS_NUMERICAL = 3,
  /**
   * An internal panic was caught at the boundary.
   */
  MDM_STATUS_PANIC = 4,
} MdmStatus;

/**
 * An orthogonal basis built by sequential admission.
 */
typedef struct MdmBasis MdmBasis;

/**
 * A merge state: base, orthogonal members, coefficients and ledger.
 */
typedef struct MdmState MdmState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mdm_last_error(void);

/**
 * Library version as a static string.
 */
const char *mdm_version(void);

/**
 * Creates an empty state over a base vector of `len` doubles.
 *
 * # Safety
 * `base` must point to `len` readable doubles, `op` must be a NUL-terminated
 * string and `out` a writable handle slot.
 */
enum MdmStatus mdm_state_new(const double *base, size_t len, const char *op, struct MdmState **out);

/**
 * Loads a state directory written by [`mdm_state_save`] or the `mdm` tool.
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a writable handle slot.
 */
enum MdmStatus mdm_state_load(const char *dir, bool recompute, struct MdmState **out);

/**
 * # Safety
 * `state` must be a live handle and `dir` a NUL-terminated path.
 */
enum MdmStatus mdm_state_save(const struct MdmState *state, const char *dir);

/**
 * Releases a state; null is ignored.
 *
 * # Safety
 * `state` must be null or a handle not yet freed.
 */
void mdm_state_free(struct MdmState *state);

/**
 * Parameter count, or 0 for a null handle.
 *
 * # Safety
 * `state` must be null or a live handle.
 */
size_t mdm_state_dim(const struct MdmState *state);

/**
 * Number of current members, or 0 for a null handle.
 *
 * # Safety
 * `state` must be null or a live handle.
 */
size_t mdm_state_member_count(const struct MdmState *state);

/**
 * Projects a raw delta onto the null space of the members and adds it with
 * coefficient `alpha`. `accepted` is set to false when the residual was
 * degenerate and the delta was logged as rejected.
 *
 * # Safety
 * `state` must be a live handle, `id` a NUL-terminated string, `delta` must
 * point to `len` doubles and `accepted` must be writable.
 */
enum MdmStatus mdm_state_integrate(struct MdmState *state,
                                   const char *id,
                                   const double *delta,
                                   size_t len,
                                   double alpha,
                                   bool *accepted);

/**
 * Removes a member; `purge` also deletes its archived delta.
 *
 * # Safety
 * `state` must be a live handle and `id` a NUL-terminated string.
 */
enum MdmStatus mdm_state_unmerge(struct MdmState *state, const char *id, bool purge);

/**
 * # Safety
 * `state` must be a live handle and `id` a NUL-terminated string.
 */
enum MdmStatus mdm_state_reweight(struct MdmState *state, const char *id, double alpha);

/**
 * Coefficient of member `id`.
 *
 * # Safety
 * `state` must be a live handle, `id` a NUL-terminated string and `out`
 * writable.
 */
enum MdmStatus mdm_state_alpha(const struct MdmState *state, const char *id, double *out);

/**
 * Copies the merged parameters into `out`, which must hold exactly
 * [`mdm_state_dim`] doubles.
 *
 * # Safety
 * `state` must be a live handle and `out` must point to `len` writable
 * doubles.
 */
enum MdmStatus mdm_state_merged(const struct MdmState *state, double *out, size_t len);

/**
 * Replays the ledger from the base and compares with the current state.
 *
 * # Safety
 * `state` must be a live handle.
 */
enum MdmStatus mdm_state_check_replay(const struct MdmState *state, double rel_tol);

/**
 * Largest absolute cosine between two members.
 *
 * # Safety
 * `state` must be a live handle and `out` writable.
 */
enum MdmStatus mdm_state_max_abs_cosine(const struct MdmState *state, double *out);

/**
 * Creates an empty basis; residuals no longer than `eps_drop` times the
 * input norm are dropped.
 *
 * # Safety
 * `out` must be a writable handle slot.
 */
enum MdmStatus mdm_basis_new(double eps_drop, struct MdmBasis **out);

/**
 * # Safety
 * `basis` must be null or a handle not yet freed.
 */
void mdm_basis_free(struct MdmBasis *basis);

/**
 * Projects a delta onto the null space of the members and admits the
 * residual; `accepted` is false when it was dropped as degenerate.
 *
 * # Safety
 * `basis` must be a live handle, `id` a NUL-terminated string, `delta` must
 * point to `len` doubles and `accepted` must be writable.
 */
enum MdmStatus mdm_basis_admit(struct MdmBasis *basis,
                               const char *id,
                               const double *delta,
                               size_t len,
                               bool *accepted);

/**
 * Number of members, or 0 for a null handle.
 *
 * # Safety
 * `basis` must be null or a live handle.
 */
size_t mdm_basis_len(const struct MdmBasis *basis);

/**
 * Copies member `index` into `out`, which must hold `len` doubles.
 *
 * # Safety
 * `basis` must be a live handle and `out` must point to `len` writable
 * doubles.
 */
enum MdmStatus mdm_basis_member(const struct MdmBasis *basis,
                                size_t index,
                                double *out,
                                size_t len);

/**
 * Largest absolute cosine between two members.
 *
 * # Safety
 * `basis` must be a live handle and `out` writable.
 */
enum MdmStatus mdm_basis_max_abs_cosine(const struct MdmBasis *basis, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDM_H */
