#![allow(dead_code)]

use std::sync::OnceLock;

use quantprune::fixture::{generate, Fixture, FixtureConfig};
use quantprune::inference::calibrate_activations;
use quantprune::model::{Activation, LayerSpec, LayerWeights};
use quantprune::{ActivationRanges, Tensor};

pub struct Trained {
    pub fx: Fixture,
    pub ranges: ActivationRanges,
}

/// The default fixture, generated once per test binary, with activation
/// ranges calibrated on its training split.
pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let fx = generate(&FixtureConfig::default()).expect("fixture generates");
        let ranges = calibrate_activations(&fx.model, &fx.train, 0.0).expect("calibration");
        Trained { fx, ranges }
    })
}

/// Textbook cross-correlation: `out[s][o] = sum_i sum_t in[s+t][i] w[i][o][t]`,
/// then the bias.
pub fn reference_conv(input: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (len, in_ch) = (input.shape()[0], input.shape()[1]);
    let (out_ch, k) = (w.shape()[1], w.shape()[2]);
    let p = len - k + 1;
    let mut out = vec![0.0; p * out_ch];
    for s in 0..p {
        for o in 0..out_ch {
            let mut acc = 0.0;
            for i in 0..in_ch {
                for t in 0..k {
                    acc += input.data()[(s + t) * in_ch + i] * w.data()[(i * out_ch + o) * k + t];
                }
            }
            out[s * out_ch + o] = acc + b.data()[o];
        }
    }
    out
}

/// The small layer the golden C headers are generated from: 2 input
/// channels, 3 filters, kernel 2. At 4 bits two taps quantize below 0.1.
pub fn toy_layer() -> (LayerSpec, LayerWeights) {
    let kernel = Tensor::new(
        vec![2, 3, 2],
        vec![0.5, -0.25, 0.125, 0.03, -0.75, 1.0, 0.2, 0.4, -0.6, 0.8, 0.1, -0.3],
    )
    .unwrap();
    let bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap();
    let spec = LayerSpec::Conv1d {
        in_channels: 2,
        out_channels: 3,
        kernel_size: 2,
        activation: Activation::Relu,
    };
    (spec, LayerWeights::new(kernel, Some(bias)))
}
