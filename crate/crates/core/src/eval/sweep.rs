//! Doppler and horizon sweeps over freshly generated test sets.

use super::report::{EvalReport, SweepAxis};
use super::{evaluate, Predictor};
use crate::channel::{build_dataset, Dataset, GenerationConfig, GridConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub grid: GridConfig,
    /// Test samples generated per axis point.
    pub count: usize,
    /// Base seed of the generated test sets and of the evaluation streams.
    pub seed: u64,
    /// Doppler axis in Hz.
    pub doppler_points: Vec<f64>,
    /// Horizon of the Doppler sweep.
    pub delta: usize,
    /// Horizon axis in frames.
    pub horizons: Vec<usize>,
    /// Doppler of the horizon sweep.
    pub doppler_hz: f64,
    /// Decay and bandwidth override; the Doppler override is set per point.
    pub generation: GenerationConfig,
}

impl SweepConfig {
    /// Ten Doppler points from 0.5 to 5 kHz at horizon 1, horizons 1 to 10
    /// at 2 kHz, 200 test samples per point.
    pub fn new(grid: GridConfig, seed: u64) -> Self {
        Self {
            grid,
            count: 200,
            seed,
            doppler_points: (0..10).map(|i| 500.0 + 500.0 * i as f64).collect(),
            delta: 1,
            horizons: (1..=10).collect(),
            doppler_hz: 2000.0,
            generation: GenerationConfig::default(),
        }
    }

    fn check(&self, predictors: &[Predictor<'_>]) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Usage("sweep needs at least one test sample".into()));
        }
        if predictors.is_empty() {
            return Err(Error::Usage("sweep needs at least one predictor".into()));
        }
        Ok(())
    }

    fn dataset(&self, doppler_hz: f64) -> Result<Dataset> {
        let gen = GenerationConfig {
            doppler_hz: Some(doppler_hz),
            ..self.generation
        };
        build_dataset(&self.grid, self.count, self.seed, &gen)
    }

    fn notes(&self, forcing: Vec<serde_json::Value>) -> serde_json::Value {
        serde_json::json!({
            "count": self.count,
            "pdp_decay": self.generation.pdp_decay,
            "bandwidth_hz": self.generation.bandwidth_hz,
            "doppler_forcing": forcing,
        })
    }
}

fn forcing(d: &Dataset, doppler_hz: f64) -> serde_json::Value {
    let p = &d.samples[0].params;
    serde_json::json!({
        "doppler_hz": doppler_hz,
        "carrier_hz": p.carrier_hz,
        "speed_mps": p.speed,
    })
}

/// One row per `(f_D, predictor)` at horizon `cfg.delta`. Every point
/// regenerates its test set with the same base seed, so only the Doppler
/// changes between points.
pub fn sweep_doppler(cfg: &SweepConfig, predictors: &[Predictor<'_>]) -> Result<EvalReport> {
    cfg.check(predictors)?;
    let mut points = cfg.doppler_points.clone();
    points.sort_by(f64::total_cmp);
    let mut report = EvalReport::new(SweepAxis::DopplerHz, cfg.grid, cfg.seed);
    let mut forced = Vec::with_capacity(points.len());
    for &fd in &points {
        let d = cfg.dataset(fd)?;
        forced.push(forcing(&d, fd));
        for p in predictors {
            let mut row = evaluate(p, &d, cfg.delta, cfg.seed)?;
            row.axis = fd;
            report.rows.push(row);
        }
    }
    let mut notes = cfg.notes(forced);
    notes["delta"] = cfg.delta.into();
    report.notes = notes;
    report.sort_rows();
    Ok(report)
}

/// One row per `(delta, predictor)` on a single test set at `cfg.doppler_hz`.
pub fn sweep_horizon(cfg: &SweepConfig, predictors: &[Predictor<'_>]) -> Result<EvalReport> {
    cfg.check(predictors)?;
    let mut horizons = cfg.horizons.clone();
    horizons.sort_unstable();
    let d = cfg.dataset(cfg.doppler_hz)?;
    let mut report = EvalReport::new(SweepAxis::HorizonFrames, cfg.grid, cfg.seed);
    for &delta in &horizons {
        for p in predictors {
            report.rows.push(evaluate(p, &d, delta, cfg.seed)?);
        }
    }
    report.notes = cfg.notes(vec![forcing(&d, cfg.doppler_hz)]);
    report.sort_rows();
    Ok(report)
}
