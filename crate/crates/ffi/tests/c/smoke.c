#include <stdio.h>
#include <string.h>

#include "bindgeom.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "check failed line %d: %s (%s)\n",   \
                    __LINE__, #cond, bg_last_error_message());   \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    double data[6] = {1, 2, 3, 4, 5, 6};
    BgMatrix *m = NULL;
    CHECK(bg_matrix_new(2, 3, data, &m) == BG_STATUS_OK);
    CHECK(bg_matrix_rows(m) == 2 && bg_matrix_cols(m) == 3);

    uint8_t *bytes = NULL;
    size_t len = 0;
    CHECK(bg_embx_write(m, 1, &bytes, &len) == BG_STATUS_OK);
    CHECK(len == 17 + 6 * 8);
    CHECK(memcmp(bytes, "EMBX", 4) == 0);

    BgMatrix *back = NULL;
    uint8_t dtype = 9;
    CHECK(bg_embx_read(bytes, len, &back, &dtype) == BG_STATUS_OK);
    CHECK(dtype == 1);
    CHECK(memcmp(bg_matrix_data(back), data, sizeof data) == 0);

    bytes[0] = 'X';
    BgMatrix *bad = NULL;
    CHECK(bg_embx_read(bytes, len, &bad, NULL) == BG_STATUS_FORMAT);
    CHECK(strstr(bg_last_error_message(), "magic") != NULL);
    bg_bytes_free(bytes, len);

    BgAnnotation *ann = NULL;
    CHECK(bg_parse_prompt("a cat and a dog", 0, &ann) == BG_STATUS_OK);
    CHECK(bg_annotation_np_count(ann) == 2);
    size_t obj = 0;
    CHECK(bg_annotation_object_index(ann, 1, &obj) == BG_STATUS_OK && obj == 4);

    double t[5 * 2] = {1, 0, 9, 9, 1, 1, 9, 9, 0.5, 2};
    BgMatrix *tm = NULL, *out = NULL;
    CHECK(bg_matrix_new(5, 2, t, &tm) == BG_STATUS_OK);
    CHECK(bg_apply_capo(tm, ann, BG_MODE_CAUSAL, false, &out) == BG_STATUS_OK);
    const double *o = bg_matrix_data(out);
    /* Second object (row 4) is orthogonal to the first (row 1). */
    double d = o[4 * 2] * o[1 * 2] + o[4 * 2 + 1] * o[1 * 2 + 1];
    CHECK(d < 1e-12 && d > -1e-12);

    bg_matrix_free(out);
    bg_matrix_free(tm);
    bg_annotation_free(ann);
    bg_matrix_free(back);
    bg_matrix_free(m);
    printf("ok %s\n", bg_version());
    return 0;
}
