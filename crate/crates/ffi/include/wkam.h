#ifndef WKAM_H
#define WKAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum WkamStatus {
  WKAM_STATUS_OK = 0,
  WKAM_STATUS_NULL_POINTER = 1,
  WKAM_STATUS_INVALID_UTF8 = 2,
  WKAM_STATUS_INVALID_SYSTEM = 3,
  WKAM_STATUS_INVALID_ARGUMENT = 4,
  WKAM_STATUS_NO_CONVERGENCE = 5,
  WKAM_STATUS_PRECONDITION = 6,
  // The caller's buffer is too small; the needed length is still reported.
  WKAM_STATUS_BUFFER_TOO_SMALL = 7,
  WKAM_STATUS_NUMERICAL = 8,
  WKAM_STATUS_PANIC = 9,
} WkamStatus;

// Weak KAM solution `u_c` with its `α(c)` and the system it was solved for.
typedef struct WkamSolution WkamSolution;

// A mechanical system `H = ½⟨A(x)p, p⟩ + V(x)` on the torus.
typedef struct WkamSystem WkamSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the message of the last failed call on this thread into `buf` as a
// NUL-terminated string, truncated to `cap` bytes, and returns the full
// message length without the terminator.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t wkam_last_error(char *buf, size_t cap);

// Parses a system from its JSON description.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum WkamStatus wkam_system_from_json(const char *json, struct WkamSystem **out);

// Releases a system. Null is accepted.
//
// # Safety
// `sys` must come from [`wkam_system_from_json`] and not be used afterwards.
void wkam_system_free(struct WkamSystem *sys);

// Dimension of the torus, 1 or 2; 0 for a null handle.
//
// # Safety
// `sys` must be null or a live system handle.
size_t wkam_system_dim(const struct WkamSystem *sys);

// `H(x, p)`; `x` and `p` hold `dim` entries each.
//
// # Safety
// Pointers must be valid for `dim` reads, `out` for one write.
enum WkamStatus wkam_hamiltonian(const struct WkamSystem *sys,
                                 const double *x,
                                 const double *p,
                                 double *out);

// Solves for `u_c` and `α(c)` on an `n`-point-per-axis grid. `c` holds `dim`
// entries; `dt ≤ 0` selects the default time step.
//
// # Safety
// `c` must be valid for `dim` reads and `out` for one write.
enum WkamStatus wkam_solve(const struct WkamSystem *sys,
                           const double *c,
                           size_t n,
                           double dt,
                           double tol_fp,
                           struct WkamSolution **out);

// Releases a solution. Null is accepted.
//
// # Safety
// `sol` must come from [`wkam_solve`] and not be used afterwards.
void wkam_solution_free(struct WkamSolution *sol);

// `α(c)`; NaN for a null handle.
//
// # Safety
// `sol` must be null or a live solution handle.
double wkam_solution_alpha(const struct WkamSolution *sol);

// Number of power iterations the solve took; 0 for a null handle.
//
// # Safety
// `sol` must be null or a live solution handle.
size_t wkam_solution_iterations(const struct WkamSolution *sol);

// Node values of `u_c` in row-major order (first axis slowest).
//
// # Safety
// `buf` must be valid for `cap` writes and `len_out` for one write.
enum WkamStatus wkam_solution_values(const struct WkamSolution *sol,
                                     double *buf,
                                     size_t cap,
                                     size_t *len_out);

// Indices of the estimated singular nodes of `v = c·x + u_c`, with default
// estimator parameters.
//
// # Safety
// `buf` must be valid for `cap` writes and `len_out` for one write.
enum WkamStatus wkam_solution_singular_nodes(const struct WkamSolution *sol,
                                             size_t *buf,
                                             size_t cap,
                                             size_t *len_out);

// Vertices of the estimated superdifferential of `v` at `x`, as `dim`
// doubles per vertex. `len_out` receives the number of doubles.
//
// # Safety
// `x` must be valid for `dim` reads, `buf` for `cap` writes and `len_out`
// for one write.
enum WkamStatus wkam_solution_superdifferential(const struct WkamSolution *sol,
                                                const double *x,
                                                double *buf,
                                                size_t cap,
                                                size_t *len_out);

// Integrates the Hamiltonian flow from `(x0, p0)` to `t_end` (negative runs
// backward) with step `dt`, energy projection on. Writes the final state to
// `x_out`, `p_out` (`dim` entries each) and the energy drift to `drift_out`.
//
// # Safety
// Vector pointers must be valid for `dim` reads or writes, `drift_out` for
// one write.
enum WkamStatus wkam_flow(const struct WkamSystem *sys,
                          const double *x0,
                          const double *p0,
                          double t_end,
                          double dt,
                          double *x_out,
                          double *p_out,
                          double *drift_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WKAM_H */
