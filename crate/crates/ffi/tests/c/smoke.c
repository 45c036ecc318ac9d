#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "augseg.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            const char *e = augseg_last_error();                      \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__,   \
                    #cond, e ? e : "no error");                       \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke CHECKPOINT\n");
        return 2;
    }

    AugsegModel *model = NULL;
    CHECK(augseg_model_load("/nonexistent/base.ckpt", &model) == AUGSEG_STATUS_IO);
    CHECK(augseg_last_error() != NULL);
    CHECK(augseg_model_load(argv[1], &model) == AUGSEG_STATUS_OK);
    CHECK(augseg_last_error() == NULL);

    size_t s = 0;
    CHECK(augseg_model_image_size(model, &s) == AUGSEG_STATUS_OK);
    char fp[65];
    CHECK(augseg_model_fingerprint(model, fp, 8) == AUGSEG_STATUS_BUFFER_TOO_SMALL);
    CHECK(augseg_model_fingerprint(model, fp, sizeof fp) == AUGSEG_STATUS_OK);
    CHECK(strlen(fp) == 64);

    double *image = calloc(3 * s * s, sizeof *image);
    unsigned char *mask = malloc(s * s);
    uint32_t prompts[2] = {(uint32_t)(s / 2), (uint32_t)(s / 2)};
    double iou = -1.0;
    CHECK(augseg_predict(model, NULL, image, 3 * s * s, prompts, 1, mask, s * s, &iou) == AUGSEG_STATUS_OK);
    for (size_t i = 0; i < s * s; i++) CHECK(mask[i] <= 1);
    CHECK(iou >= 0.0 && iou <= 1.0);
    CHECK(augseg_predict(model, NULL, image, 5, prompts, 1, mask, s * s, &iou) == AUGSEG_STATUS_OTHER);
    CHECK(augseg_predict(NULL, NULL, image, 3 * s * s, prompts, 1, mask, s * s, &iou) == AUGSEG_STATUS_NULL_ARGUMENT);

    CHECK(augseg_per_task_bytes(300, 768, 4) == 921600);

    double row[5] = {0.869, 0.738, 0.907, 0.879, 0.769};
    double cells[25];
    for (int i = 0; i < 25; i++) cells[i] = NAN;
    for (int i = 0; i < 5; i++) {
        cells[i * 5 + i] = row[i];
        cells[4 * 5 + i] = row[i];
    }
    AugsegSummary sum;
    CHECK(augseg_matrix_summary(cells, 5, &sum) == AUGSEG_STATUS_OK);
    CHECK(fabs(sum.aa - 0.832) < 0.0005);
    CHECK(sum.fm == 0.0);
    CHECK(isnan(sum.ft));

    size_t outs[12];
    for (int i = 0; i < 12; i++) outs[i] = 64;
    AugsegParamCount pc;
    CHECK(augseg_count_params("augmodule", 4, 64, outs, 12, &pc) == AUGSEG_STATUS_OK);
    CHECK(pc.stored_count == 3528 && pc.stored_bytes == 3528 * 8);
    CHECK(augseg_count_params("lora", 4, 64, outs, 12, &pc) == AUGSEG_STATUS_VALIDATION);

    free(image);
    free(mask);
    augseg_model_free(model);
    printf("ok %s\n", augseg_version());
    return 0;
}
