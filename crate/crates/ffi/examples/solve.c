/* Minimal C consumer: parse a config, solve, print the root value.
 *
 * Build (from the workspace root, after `cargo build --release -p rbsde-ffi`):
 *   cc crates/ffi/examples/solve.c -Icrates/ffi/include \
 *      target/release/librbsde_ffi.a -lpthread -ldl -lm -o solve_example
 */
#include <stdio.h>

#include "rbsde.h"

static const char *CONFIG =
    "{"
    "\"version\": 1, \"horizon\": 1.0, \"mu\": 5.0,"
    "\"generator\": \"-5*abs(y+z)-1\","
    "\"terminal\": \"abs(x)\","
    "\"lower\": {\"kind\": \"functional\", \"expr\": \"-3*(x-2)^2+3\"},"
    "\"upper\": {\"kind\": \"functional\", \"expr\": \"(x+1)^2+3*t-2.5\"}"
    "}";

int main(void) {
  RbsdeProblem *problem = NULL;
  double root = 0.0;
  int status = rbsde_problem_parse(CONFIG, &problem);
  if (status != RBSDE_OK) {
    fprintf(stderr, "parse failed: %s\n", rbsde_last_error_message());
    return status;
  }
  status = rbsde_solve_root(problem, 400, RbsdeSchemeExplicitReflected, 0.0, &root);
  if (status != RBSDE_OK) {
    fprintf(stderr, "solve failed: %s\n", rbsde_last_error_message());
    rbsde_problem_free(problem);
    return status;
  }
  printf("y0 = %.6f\n", root);
  rbsde_problem_free(problem);
  return 0;
}
