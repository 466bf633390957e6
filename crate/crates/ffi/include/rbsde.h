/* C interface to the rbsde solver library. Regenerated by the build script; do not edit. */

#ifndef RBSDE_H
#define RBSDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call succeeded.
 */
#define RBSDE_OK 0

/**
 * Invalid input: malformed JSON, failed validation, out-of-range argument.
 */
#define RBSDE_ERR_INPUT 1

/**
 * Numerical failure while solving.
 */
#define RBSDE_ERR_NUMERICAL 2

/**
 * A required pointer argument was NULL (or not valid UTF-8).
 */
#define RBSDE_ERR_NULL 3

/**
 * Backward kernel selector.
 */
typedef enum RbsdeScheme {
  RbsdeSchemeImplicitPenalization = 0,
  RbsdeSchemeImplicitExplicitPenalization = 1,
  RbsdeSchemeImplicitReflected = 2,
  RbsdeSchemeExplicitReflected = 3,
} RbsdeScheme;

/**
 * Which per-node quantity to read from a solution.
 */
typedef enum RbsdeField {
  /**
   * Solution value; defined on layers `0..=n`.
   */
  RbsdeFieldY = 0,
  /**
   * Integrand; defined on layers `0..n`.
   */
  RbsdeFieldZ = 1,
  /**
   * Upward reflection increment; defined on layers `0..n`.
   */
  RbsdeFieldLowerForce = 2,
  /**
   * Downward reflection increment; defined on layers `0..n`.
   */
  RbsdeFieldUpperForce = 3,
} RbsdeField;

/**
 * Opaque problem handle.
 */
typedef struct RbsdeProblem RbsdeProblem;

/**
 * Opaque solution handle.
 */
typedef struct RbsdeSolution RbsdeSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Most recent error message on this thread, or NULL if none was recorded.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *rbsde_last_error_message(void);

/**
 * Parse a JSON problem configuration (the CLI schema, `"version": 1`).
 *
 * On success writes a handle to `out`; release it with
 * [`rbsde_problem_free`].
 *
 * # Safety
 * `json` must be a valid NUL-terminated string and `out` a valid pointer.
 */
int rbsde_problem_parse(const char *json, struct RbsdeProblem **out);

/**
 * Release a problem handle. NULL is ignored.
 *
 * # Safety
 * `problem` must have come from [`rbsde_problem_parse`] and must not be
 * used afterwards.
 */
void rbsde_problem_free(struct RbsdeProblem *problem);

/**
 * Check a problem/discretization/scheme combination without solving.
 *
 * Returns `RBSDE_OK` when there are no validation errors; warnings are not
 * reported here.
 *
 * # Safety
 * `problem` must be a live handle from [`rbsde_problem_parse`].
 */
int rbsde_validate(const struct RbsdeProblem *problem,
                   unsigned int steps,
                   enum RbsdeScheme scheme,
                   double penalty);

/**
 * Solve with the two-layer sweep and write the root value `y0` to `out`.
 *
 * `penalty` is ignored by the reflected schemes.
 *
 * # Safety
 * `problem` must be a live handle; `out` must be a valid pointer.
 */
int rbsde_solve_root(const struct RbsdeProblem *problem,
                     unsigned int steps,
                     enum RbsdeScheme scheme,
                     double penalty,
                     double *out);

/**
 * Solve keeping the whole grid; writes a handle to `out`.
 *
 * Release the handle with [`rbsde_solution_free`].
 *
 * # Safety
 * `problem` must be a live handle; `out` must be a valid pointer.
 */
int rbsde_solve(const struct RbsdeProblem *problem,
                unsigned int steps,
                enum RbsdeScheme scheme,
                double penalty,
                struct RbsdeSolution **out);

/**
 * Release a solution handle. NULL is ignored.
 *
 * # Safety
 * `solution` must have come from [`rbsde_solve`] and must not be used
 * afterwards.
 */
void rbsde_solution_free(struct RbsdeSolution *solution);

/**
 * Number of time steps of a solved grid.
 *
 * # Safety
 * `solution` must be a live handle from [`rbsde_solve`].
 */
unsigned int rbsde_solution_steps(const struct RbsdeSolution *solution);

/**
 * Root value `y0` of a solved grid.
 *
 * # Safety
 * `solution` must be a live handle from [`rbsde_solve`].
 */
double rbsde_solution_root(const struct RbsdeSolution *solution);

/**
 * Read one per-node quantity at layer `layer`, up-move count `up_moves`.
 *
 * `y` is defined for `layer <= n`, the other fields for `layer < n`;
 * `up_moves <= layer` always.
 *
 * # Safety
 * `solution` must be a live handle; `out` must be a valid pointer.
 */
int rbsde_solution_value(const struct RbsdeSolution *solution,
                         unsigned int layer,
                         unsigned int up_moves,
                         enum RbsdeField field,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RBSDE_H */
