//! NMSE evaluation of predictors, Doppler and horizon sweeps, CSV reports.

mod report;
mod sweep;

pub use report::{
    emit_report, parse_report_csv, read_report_csv, sha256_file, CsvRow, EvalReport, SweepAxis,
    CSV_HEADER,
};
pub use sweep::{sweep_doppler, sweep_horizon, SweepConfig};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baseline::{
    predict_ar1, predict_recurrent, predict_stale, predict_zero, RecurrentParams,
};
use crate::channel::{sample_stream, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{conditioning_row, predict, ConditioningMode, Cvae};
use crate::special::{mean_stderr, pairwise_sum};

/// Frames of history available to a prediction. The observed frame is
/// `min(HISTORY_FRAMES - 1, F - 1 - delta)`.
pub const HISTORY_FRAMES: usize = 4;

/// Prior draws averaged into one CVAE point estimate.
pub const DEFAULT_DRAWS: usize = 16;

/// Stream id of the per-sample evaluation RNG, above every generator stream.
const EVAL_STREAM: u64 = 1 << 32;

/// Per-sample evaluation stream; independent of thread scheduling.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    sample_stream(seed, index, EVAL_STREAM)
}

/// `‖h - ĥ‖²` and `‖h‖²`.
pub fn nmse_parts(h: &[f64], h_hat: &[f64]) -> Result<(f64, f64)> {
    if h.len() != h_hat.len() {
        return Err(Error::Structural(format!(
            "target has {} entries, prediction {}",
            h.len(),
            h_hat.len()
        )));
    }
    let err = h.iter().zip(h_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let pow = h.iter().map(|a| a * a).sum();
    Ok((err, pow))
}

/// `‖h - ĥ‖² / ‖h‖²`.
pub fn nmse(h: &[f64], h_hat: &[f64]) -> Result<f64> {
    let (err, pow) = nmse_parts(h, h_hat)?;
    if pow.is_nan() || pow <= 0.0 {
        return Err(Error::Degenerate("target has zero norm".into()));
    }
    Ok(err / pow)
}

/// A predictor under evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Zero,
    Stale,
    Ar1,
    Cvae { model: &'a Cvae, draws: usize },
    Recurrent(&'a RecurrentParams),
}

impl Predictor<'_> {
    /// Label used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Stale => "stale",
            Self::Ar1 => "ar1",
            Self::Cvae { .. } => "cvae4cp",
            Self::Recurrent(_) => crate::baseline::RECURRENT_ARCH_TAG,
        }
    }

    /// Prediction of frame `t + delta` of `s` from frames `..= t`.
    pub fn predict(
        &self,
        s: &Sample,
        t: usize,
        delta: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let observed = s.seq.feature(t);
        match *self {
            Self::Zero => Ok(predict_zero(&observed)),
            Self::Stale => Ok(predict_stale(&observed)),
            Self::Ar1 => Ok(predict_ar1(
                &observed,
                delta,
                s.seq.doppler_hz,
                s.seq.frame_duration_s(),
            )),
            Self::Cvae { model, draws } => {
                let obs = match model.cfg.mode {
                    ConditioningMode::Observation => Some(observed.as_slice()),
                    ConditioningMode::Parametric => None,
                };
                let c = conditioning_row(&model.cfg, s.cond.as_slice(), delta, obs)?;
                Ok(predict(model, &c, draws, rng)?.mean)
            }
            Self::Recurrent(model) => {
                let start = (t + 1).saturating_sub(model.cfg.unroll);
                let frames: Vec<Vec<f64>> = (start..=t).map(|f| s.seq.feature(f)).collect();
                let history: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
                predict_recurrent(model, &history, s.cond.as_slice(), delta)
            }
        }
    }
}

/// One report row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub axis: f64,
    pub predictor: String,
    /// Mean of per-sample NMSE ratios.
    pub nmse_mean: f64,
    pub nmse_stderr: f64,
    pub n: usize,
    pub seed: u64,
    /// Zero-norm targets left out of the mean.
    pub excluded: usize,
    /// `Σ‖h - ĥ‖² / Σ‖h‖²` over the included samples.
    pub nmse_aggregate: f64,
}

/// Frame whose channel is observed when predicting `delta` ahead.
pub fn observed_frame(frames: usize, delta: usize) -> Result<usize> {
    if delta >= frames {
        return Err(Error::Usage(format!(
            "horizon {delta} needs more than the {frames} stored frames"
        )));
    }
    Ok((HISTORY_FRAMES - 1).min(frames - 1 - delta))
}

/// NMSE of `pred` at horizon `delta` over every sample of `test`.
///
/// Samples run in parallel, each with its own RNG stream under `seed`; the
/// row's axis value is `delta`.
pub fn evaluate(pred: &Predictor<'_>, test: &Dataset, delta: usize, seed: u64) -> Result<EvalRow> {
    let t = observed_frame(test.grid.f, delta)?;
    let parts = test
        .samples
        .par_iter()
        .map(|s| {
            let mut rng = sample_rng(seed, s.index);
            let h_hat = pred.predict(s, t, delta, &mut rng)?;
            nmse_parts(&s.seq.feature(t + delta), &h_hat)
        })
        .collect::<Result<Vec<_>>>()?;
    let included: Vec<(f64, f64)> = parts.iter().copied().filter(|&(_, p)| p > 0.0).collect();
    if included.is_empty() {
        return Err(Error::Degenerate(
            "every target in the test set has zero norm".into(),
        ));
    }
    let ratios: Vec<f64> = included.iter().map(|(e, p)| e / p).collect();
    let errs: Vec<f64> = included.iter().map(|&(e, _)| e).collect();
    let pows: Vec<f64> = included.iter().map(|&(_, p)| p).collect();
    let (nmse_mean, nmse_stderr) = mean_stderr(&ratios);
    if !nmse_mean.is_finite() {
        return Err(Error::Numeric(format!(
            "{} produced a non-finite NMSE",
            pred.name()
        )));
    }
    Ok(EvalRow {
        axis: delta as f64,
        predictor: pred.name().to_string(),
        nmse_mean,
        nmse_stderr,
        n: included.len(),
        seed,
        excluded: parts.len() - included.len(),
        nmse_aggregate: pairwise_sum(&errs) / pairwise_sum(&pows),
    })
}
