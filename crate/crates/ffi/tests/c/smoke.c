#include <math.h>
#include <stdio.h>
#include <string.h>

#include "nsmix.h"

#define CHECK(cond)                                                \
    do {                                                           \
        if (!(cond)) {                                             \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                              \
        }                                                          \
    } while (0)

int main(void) {
    NsmixModel *model = NULL;
    NsmixNoise *noise = NULL;
    NsmixTrajectory *traj = NULL;
    NsmixCoupling *rec = NULL;
    char msg[256];

    CHECK(strlen(nsmix_version()) > 0);
    CHECK(nsmix_model_shell_new(4, 1.0, 1.0, 2.0, &model) == NSMIX_STATUS_OK);
    CHECK(nsmix_model_dim(model) == 4);
    CHECK(nsmix_noise_constant_new(model, 2.75, &noise) == NSMIX_STATUS_OK);

    double x0[4] = {0.1, 0.0, 0.0, 0.0};
    CHECK(nsmix_simulate(model, noise, x0, 4, 0.1, 1e-3, 7, 0, &traj) == NSMIX_STATUS_OK);
    CHECK(nsmix_trajectory_len(traj) == 101);
    double x[4], t;
    CHECK(nsmix_trajectory_state(traj, 100, x, 4, &t) == NSMIX_STATUS_OK);
    CHECK(fabs(t - 0.1) < 1e-12);
    CHECK(nsmix_trajectory_state(traj, 101, x, 4, &t) == NSMIX_STATUS_OUT_OF_RANGE);
    CHECK(nsmix_last_error_message(msg, sizeof msg) > 0);

    NsmixCouplingParams p = {0.1, 1e-3, 1e-3, 2.0, 5, 0.0, NSMIX_PROXIMITY_MIN_SCALE};
    double a[4] = {0.001, 0, 0, 0}, b[4] = {-0.001, 0, 0, 0};
    CHECK(nsmix_couple(model, noise, &p, a, b, 4, 7, 1, &rec) == NSMIX_STATUS_OK);
    CHECK(nsmix_coupling_steps(rec) <= 5);

    CHECK(nsmix_model_shell_new(0, 1.0, 1.0, 2.0, NULL) == NSMIX_STATUS_NULL_POINTER);
    NsmixModel *bad = NULL;
    CHECK(nsmix_model_shell_new(0, 1.0, 1.0, 2.0, &bad) == NSMIX_STATUS_INVALID_ARGUMENT);
    CHECK(bad == NULL);

    nsmix_coupling_free(rec);
    nsmix_trajectory_free(traj);
    nsmix_noise_free(noise);
    nsmix_model_free(model);
    puts("ok");
    return 0;
}
