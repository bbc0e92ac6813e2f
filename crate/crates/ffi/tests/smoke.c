#include <stdio.h>
#include <string.h>

#include "salfit.h"

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: smoke <classifier.bin>\n");
        return 64;
    }
    printf("version %s\n", sf_version());

    SfClassifier *cls = NULL;
    if (sf_classifier_load("/nonexistent/classifier.bin", &cls) != SF_STATUS_IO) return 1;
    char msg[256];
    if (sf_last_error(msg, sizeof msg) == 0) return 2;

    if (sf_classifier_load(argv[1], &cls) != SF_STATUS_OK) return 3;
    size_t k = sf_classifier_num_classes(cls);
    size_t side = sf_image_side();
    static float image[64 * 64 * 3];
    for (size_t i = 0; i < side * side * 3; i++) image[i] = (float)(i % 7) / 7.0f;
    float probs[32];
    if (k > 32 || sf_classifier_predict(cls, image, 1, probs, k) != SF_STATUS_OK) return 4;
    float sum = 0;
    for (size_t i = 0; i < k; i++) sum += probs[i];
    if (sum < 0.999f || sum > 1.001f) return 5;
    sf_classifier_free(cls);

    float scores[4] = {0.9f, 0.1f, 0.8f, 0.2f};
    unsigned char gt[4] = {1, 0, 1, 0};
    double ap = 0;
    if (sf_pxap(scores, gt, 4, &ap) != SF_STATUS_OK) return 6;
    printf("classes %zu pxap %.1f\n", k, ap);
    return ap > 99.9 ? 0 : 7;
}
