//! Reference predictors: zero, stale CSI, AR(1) Wiener and a small
//! recurrent network.

mod recurrent;

pub use recurrent::{
    load_recurrent, predict_recurrent, save_recurrent, train_recurrent, RecurrentConfig,
    RecurrentEpoch, RecurrentPairs, RecurrentParams, RECURRENT_ARCH_TAG,
};

use std::f64::consts::PI;

use crate::special::bessel_j0;

/// All-zero prediction of the same length as `x`.
pub fn predict_zero(x: &[f64]) -> Vec<f64> {
    vec![0.0; x.len()]
}

/// Outdated CSI: the observed frame is the prediction for any horizon.
pub fn predict_stale(x: &[f64]) -> Vec<f64> {
    x.to_vec()
}

/// Jakes correlation `J0(2 pi f_D tau delta)` between frames `delta` apart.
pub fn ar1_coefficient(doppler_hz: f64, frame_s: f64, delta: usize) -> f64 {
    bessel_j0(2.0 * PI * doppler_hz * frame_s * delta as f64)
}

/// One-tap Wiener predictor `rho * x`.
pub fn predict_ar1(x: &[f64], delta: usize, doppler_hz: f64, frame_s: f64) -> Vec<f64> {
    let rho = ar1_coefficient(doppler_hz, frame_s, delta);
    x.iter().map(|v| rho * v).collect()
}
