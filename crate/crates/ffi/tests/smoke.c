#include <stdio.h>
#include <stdlib.h>
#include "scalegrpo.h"

#define CHECK(call)                                                             \
    do {                                                                        \
        SgStatus s_ = (call);                                                   \
        if (s_ != SG_STATUS_OK) {                                               \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, sg_last_error()); \
            return 1;                                                           \
        }                                                                       \
    } while (0)

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    SgModel *model = NULL;
    CHECK(sg_model_load(argv[1], &model));
    SgModelInfo info;
    CHECK(sg_model_info(model, &info));
    size_t n = info.height * info.width * 3;
    float *rgb = malloc(n * sizeof(float));
    SgSamplerSettings cfg = sg_sampler_default();
    CHECK(sg_model_sample(model, 0, cfg, rgb, n));
    double b = 0.0;
    CHECK(sg_brightness(rgb, info.height, info.width, &b));

    double rewards[4] = {1, 0, 0, 0};
    double adv[4];
    CHECK(sg_compute_advantages(rewards, 4, adv));

    SgModel *missing = NULL;
    SgStatus s = sg_model_load("/nonexistent.ckpt", &missing);
    if (s == SG_STATUS_OK || sg_last_error() == NULL) return 3;

    printf("classes=%zu size=%zux%zu brightness=%.6f adv0=%.4f version=%s\n", info.n_classes, info.height,
           info.width, b, adv[0], sg_version());
    free(rgb);
    sg_model_free(model);
    return 0;
}
