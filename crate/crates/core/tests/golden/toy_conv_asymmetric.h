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
#define TOY_CONV_SCALE +5.46875000000000000e-2
#define TOY_CONV_ZERO_POINT +1.25000000000000000e-1

static const int32_t toy_conv_bias[3] = {
    -1, -5, -1
};

static void toy_conv(const data_t in[6][2], data_t out[5][3])
{
    for (int s = 0; s < 5; ++s) {
        data_t acc;
        data_t zsum;
        acc = 0;
        zsum = 0;
        acc += in[s + 0][0] * 7;
        zsum += in[s + 0][0];
        acc += in[s + 1][0] * -7;
        zsum += in[s + 1][0];
        acc += in[s + 0][1] * 1;
        zsum += in[s + 0][1];
        acc += in[s + 1][1] * 5;
        zsum += in[s + 1][1];
        out[s][0] = acc * TOY_CONV_SCALE + zsum * TOY_CONV_ZERO_POINT + ((data_t)toy_conv_bias[0] * TOY_CONV_SCALE + TOY_CONV_ZERO_POINT);
        acc = 0;
        zsum = 0;
        acc += in[s + 0][0] * 1;
        zsum += in[s + 0][0];
        acc += in[s + 0][1] * -13;
        zsum += in[s + 0][1];
        acc += in[s + 1][1] * 13;
        zsum += in[s + 1][1];
        out[s][1] = acc * TOY_CONV_SCALE + zsum * TOY_CONV_ZERO_POINT + ((data_t)toy_conv_bias[1] * TOY_CONV_SCALE + TOY_CONV_ZERO_POINT);
        acc = 0;
        zsum = 0;
        acc += in[s + 0][0] * -15;
        zsum += in[s + 0][0];
        acc += in[s + 1][0] * 15;
        zsum += in[s + 1][0];
        acc += in[s + 1][1] * -7;
        zsum += in[s + 1][1];
        out[s][2] = acc * TOY_CONV_SCALE + zsum * TOY_CONV_ZERO_POINT + ((data_t)toy_conv_bias[2] * TOY_CONV_SCALE + TOY_CONV_ZERO_POINT);
    }
}

#endif /* TOY_CONV_WEIGHTS_H */
