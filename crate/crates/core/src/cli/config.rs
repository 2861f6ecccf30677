//! TOML run configuration, merged over the full-scale or desk-scale preset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::RecurrentConfig;
use crate::channel::{GenerationConfig, GridConfig, E_DIM};
use crate::error::{Error, Result};
use crate::eval::{SweepAxis, SweepConfig, DEFAULT_DRAWS};
use crate::model::{ConditioningMode, ModelConfig, TrainConfig};

/// Environment variable overriding every configured seed.
pub const SEED_ENV: &str = "DDCP_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub f: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub count: usize,
    pub base_seed: u64,
    /// Training samples; the rest form the test set.
    pub split: usize,
    pub pdp_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doppler_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub mode: ConditioningMode,
    pub latent: usize,
    pub flows: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    /// Defaults to 11 in observation mode and 0 in parametric mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon_knots: Option<usize>,
    pub prior_through_flows: bool,
    /// 0 turns the KL warm-up off.
    pub beta_warmup_epochs: usize,
    /// Prior draws per point estimate.
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentBlock {
    pub hidden: usize,
    pub unroll: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// `doppler` or `horizon`.
    pub axis: String,
    pub doppler_points: Vec<f64>,
    pub delta: usize,
    pub horizons: Vec<usize>,
    pub doppler_hz: f64,
    /// Test samples generated per axis point.
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth_hz: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsBlock {
    pub data: PathBuf,
    pub model: PathBuf,
    pub recurrent: PathBuf,
    pub report: PathBuf,
    pub predictions: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridBlock,
    pub data: DataBlock,
    pub model: ModelBlock,
    pub recurrent: RecurrentBlock,
    pub train: TrainBlock,
    pub sweep: SweepBlock,
    pub paths: PathsBlock,
}

/// Where the effective seed came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Env,
    Config,
}

impl std::fmt::Display for SeedSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Flag => "flag",
            Self::Env => "env",
            Self::Config => "config",
        })
    }
}

impl RunConfig {
    /// Full scale: 32 x 32 x 6 grid, 1000 samples split 800/200, latent 48,
    /// 50 epochs of batch 16 at lr 1e-3.
    pub fn full() -> Self {
        let grid = GridConfig::FULL;
        let model = ModelConfig::full(&grid, ConditioningMode::Observation);
        let sweep = SweepConfig::new(grid, 0);
        let tc = TrainConfig::default();
        Self {
            grid: GridBlock {
                m: grid.m,
                n: grid.n,
                l: grid.l,
                f: grid.f,
            },
            data: DataBlock {
                count: 1000,
                base_seed: 0,
                split: 800,
                pdp_decay: GenerationConfig::default().pdp_decay,
                doppler_hz: None,
                bandwidth_hz: None,
                horizon: None,
            },
            model: ModelBlock {
                mode: model.mode,
                latent: model.latent,
                flows: model.flows,
                enc_hidden: model.enc_hidden,
                dec_hidden: model.dec_hidden,
                prior_hidden: model.prior_hidden,
                horizon_knots: None,
                prior_through_flows: model.prior_through_flows,
                beta_warmup_epochs: tc.beta_warmup_epochs,
                draws: DEFAULT_DRAWS,
            },
            recurrent: RecurrentBlock {
                hidden: 64,
                unroll: 4,
            },
            train: TrainBlock {
                epochs: tc.epochs,
                batch: tc.batch,
                lr: tc.lr,
                seed: tc.seed,
            },
            sweep: SweepBlock {
                axis: "doppler".into(),
                doppler_points: sweep.doppler_points,
                delta: sweep.delta,
                horizons: sweep.horizons,
                doppler_hz: sweep.doppler_hz,
                count: sweep.count,
                bandwidth_hz: None,
            },
            paths: PathsBlock {
                data: "dataset.ddcp".into(),
                model: "cvae.ddck".into(),
                recurrent: "recurrent.ddck".into(),
                report: "report.csv".into(),
                predictions: "predictions.csv".into(),
            },
        }
    }

    /// 8 x 8 x 4 grid, 11 frames, halved hidden widths.
    pub fn desk() -> Self {
        let mut c = Self::full();
        let grid = GridConfig::DESK;
        c.grid = GridBlock {
            m: grid.m,
            n: grid.n,
            l: grid.l,
            f: grid.f,
        };
        let model = ModelConfig::desk(&grid, c.model.mode);
        c.model.enc_hidden = model.enc_hidden;
        c.model.dec_hidden = model.dec_hidden;
        c.model.prior_hidden = model.prior_hidden;
        c
    }

    /// Preset overlaid with the TOML text; keys absent from the text keep
    /// the preset value.
    pub fn from_toml(text: &str, desk: bool, origin: &Path) -> Result<Self> {
        let overlay: toml::Table =
            toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        let preset = if desk { Self::desk() } else { Self::full() };
        let mut base = toml::Table::try_from(&preset)
            .map_err(|e| Error::Structural(format!("preset serialization: {e}")))?;
        merge(&mut base, overlay);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| {
                Error::Usage(format!("{}: {}", origin.display(), e.message()))
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The preset, or the preset overlaid with the file at `path`.
    pub fn load(path: Option<&Path>, desk: bool) -> Result<Self> {
        match path {
            None => {
                let c = if desk { Self::desk() } else { Self::full() };
                c.validate()?;
                Ok(c)
            }
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text, desk, p)
            }
        }
    }

    /// Applies the seed precedence flag > `DDCP_SEED` > config to the data
    /// and training seeds.
    pub fn apply_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<SeedSource> {
        let (seed, source) = match (flag, env) {
            (Some(s), _) => (s, SeedSource::Flag),
            (None, Some(v)) => {
                let s = v.trim().parse::<u64>().map_err(|_| {
                    Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
                })?;
                (s, SeedSource::Env)
            }
            (None, None) => return Ok(SeedSource::Config),
        };
        self.data.base_seed = seed;
        self.train.seed = seed;
        Ok(source)
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            m: self.grid.m,
            n: self.grid.n,
            l: self.grid.l,
            f: self.grid.f,
            e_dim: E_DIM,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            pdp_decay: self.data.pdp_decay,
            doppler_hz: self.data.doppler_hz,
            horizon: self.data.horizon,
            bandwidth_hz: self.data.bandwidth_hz,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let grid = self.grid();
        let m = &self.model;
        ModelConfig {
            mode: m.mode,
            taps: grid.l,
            mn: grid.mn(),
            e_dim: grid.e_dim,
            latent: m.latent,
            flows: m.flows,
            enc_hidden: m.enc_hidden.clone(),
            dec_hidden: m.dec_hidden.clone(),
            prior_hidden: m.prior_hidden.clone(),
            horizon_knots: m.horizon_knots.unwrap_or(match m.mode {
                ConditioningMode::Observation => 11,
                ConditioningMode::Parametric => 0,
            }),
            prior_through_flows: m.prior_through_flows,
        }
    }

    pub fn recurrent_config(&self) -> RecurrentConfig {
        RecurrentConfig {
            hidden: self.recurrent.hidden,
            unroll: self.recurrent.unroll,
            ..RecurrentConfig::new(&self.grid())
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch: self.train.batch,
            lr: self.train.lr,
            seed: self.train.seed,
            beta_warmup_epochs: self.model.beta_warmup_epochs,
        }
    }

    /// Sweep test sets use `base_seed + 1`, so they never repeat a
    /// training sample.
    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            grid: self.grid(),
            count: self.sweep.count,
            seed: self.data.base_seed.wrapping_add(1),
            doppler_points: self.sweep.doppler_points.clone(),
            delta: self.sweep.delta,
            horizons: self.sweep.horizons.clone(),
            doppler_hz: self.sweep.doppler_hz,
            generation: GenerationConfig {
                pdp_decay: self.data.pdp_decay,
                doppler_hz: None,
                horizon: None,
                bandwidth_hz: self.sweep.bandwidth_hz,
            },
        }
    }

    pub fn sweep_axis(&self) -> Result<SweepAxis> {
        self.sweep.axis.parse()
    }

    /// Checks every block before any work starts.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid();
        grid.validate()?;
        let d = &self.data;
        if d.count == 0 {
            return Err(Error::Usage("data.count must be at least 1".into()));
        }
        if d.split == 0 || d.split >= d.count {
            return Err(Error::Usage(format!(
                "data.split must lie in 1..{}, got {}",
                d.count, d.split
            )));
        }
        if d.pdp_decay.is_nan() || d.pdp_decay <= 0.0 {
            return Err(Error::Usage("data.pdp_decay must be positive".into()));
        }
        if let Some(h) = d.horizon {
            if h as usize >= grid.f {
                return Err(Error::Usage(format!(
                    "data.horizon {h} needs fewer than grid.f = {} frames",
                    grid.f
                )));
            }
        }
        self.model_config().validate()?;
        if self.model.draws == 0 {
            return Err(Error::Usage("model.draws must be at least 1".into()));
        }
        self.recurrent_config().validate()?;
        let t = &self.train;
        if t.batch == 0 || !t.lr.is_finite() || t.lr <= 0.0 {
            return Err(Error::Usage(
                "train.batch must be positive and train.lr a positive number".into(),
            ));
        }
        let s = &self.sweep;
        self.sweep_axis()?;
        if s.count == 0 || s.doppler_points.is_empty() || s.horizons.is_empty() {
            return Err(Error::Usage(
                "sweep needs a positive count and non-empty axes".into(),
            ));
        }
        if s.delta >= grid.f || s.horizons.iter().any(|&h| h >= grid.f) {
            return Err(Error::Usage(format!(
                "sweep horizons must stay below grid.f = {}",
                grid.f
            )));
        }
        if s.doppler_points
            .iter()
            .any(|f| !(f.is_finite() && *f >= 0.0))
        {
            return Err(Error::Usage(
                "sweep Doppler points must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
