#include <stdio.h>
#include "dualfl.h"

int run_smoke(void) {
    DualflProblem *problem = NULL;
    if (dualfl_problem_synthetic_quadratic(4, 5, 1.0, 10.0, 1.0, 7, &problem) != DUALFL_STATUS_OK) {
        fprintf(stderr, "%s\n", dualfl_last_error());
        return 1;
    }
    DualflEngineConfig cfg = {1.0, 0.1, DUALFL_STOP_GAP_SMOOTH, 0.1, 10000, 0, 0};
    DualflEngine *engine = NULL;
    if (dualfl_engine_new(problem, &cfg, 1, &engine) != DUALFL_STATUS_OK) {
        dualfl_problem_free(problem);
        return 1;
    }
    DualflRoundInfo info;
    for (int i = 0; i < 10; ++i) {
        dualfl_engine_step(engine, &info);
    }
    double theta[5];
    dualfl_engine_theta(engine, theta, 5);
    dualfl_engine_free(engine);
    dualfl_problem_free(problem);
    return 0;
}
