/* toy_conv: generated, do not edit. */
#ifndef TOY_CONV_WEIGHTS_H
#define TOY_CONV_WEIGHTS_H

#include <stdint.h>
#include "infer.h"

#define TOY_CONV_IN_LEN 6
#define TOY_CONV_IN_CH 2
#define TOY_CONV_OUT_CH 3
#define TOY_CONV_KERNEL 2
#define TOY_CONV_OUT_LEN 5
#define TOY_CONV_SCALE +6.25000000000000000e-2

static const int32_t toy_conv_bias[3] = {
    1, -3, 1
};

static void toy_conv(const data_t in[6][2], data_t out[5][3])
{
    for (int s = 0; s < 5; ++s) {
        data_t acc;
        acc = 0;
        acc += in[s + 0][0] * 9;
        acc += in[s + 1][0] * -3;
        acc += in[s + 0][1] * 3;
        acc += in[s + 1][1] * 7;
        out[s][0] = acc * TOY_CONV_SCALE + ((data_t)toy_conv_bias[0] * TOY_CONV_SCALE);
        acc = 0;
        acc += in[s + 0][0] * 3;
        acc += in[s + 0][1] * -9;
        acc += in[s + 1][1] * 13;
        out[s][1] = acc * TOY_CONV_SCALE + ((data_t)toy_conv_bias[1] * TOY_CONV_SCALE);
        acc = 0;
        acc += in[s + 0][0] * -11;
        acc += in[s + 1][0] * 15;
        acc += in[s + 1][1] * -5;
        out[s][2] = acc * TOY_CONV_SCALE + ((data_t)toy_conv_bias[2] * TOY_CONV_SCALE);
    }
}

#endif /* TOY_CONV_WEIGHTS_H */
