use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{ConditioningMode, Cvae, ModelConfig, ARCH_TAG, HORIZON_DIM, HORIZON_SCALE};
use crate::channel::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, Checkpoint, Tape, Tensor};

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// KL weight ramps as `min(1, epoch / warmup)`; 0 disables the ramp.
    pub beta_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            beta_warmup_epochs: 10,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub beta: f64,
    pub loss: f64,
    pub recon_loglik: f64,
    pub kl_term: f64,
    pub elbo: f64,
}

/// Training stopped early. The model passed to [`train`] holds the
/// parameters from before the failing step.
#[derive(Debug)]
pub struct TrainAbort<L = EpochLog> {
    pub error: Error,
    pub log: Vec<L>,
    pub epoch: usize,
}

impl<L> From<TrainAbort<L>> for Error {
    fn from(a: TrainAbort<L>) -> Self {
        a.error
    }
}

/// Conditioning row for predicting `delta` frames ahead.
///
/// The horizon entry of `e` is overwritten with `delta` at file precision;
/// in observation mode the observed frame's feature is appended.
pub fn conditioning_row(
    cfg: &ModelConfig,
    e: &[f64],
    delta: usize,
    observed: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if e.len() != cfg.e_dim {
        return Err(Error::Structural(format!(
            "conditioning vector has {} entries, model expects {}",
            e.len(),
            cfg.e_dim
        )));
    }
    let mut c = e.to_vec();
    if c.len() > HORIZON_DIM {
        c[HORIZON_DIM] = f64::from((delta as f64 / HORIZON_SCALE) as f32);
    }
    match (cfg.mode, observed) {
        (ConditioningMode::Parametric, _) => {}
        (ConditioningMode::Observation, Some(x)) if x.len() == cfg.feature_len() => {
            c.extend_from_slice(x)
        }
        (ConditioningMode::Observation, _) => {
            return Err(Error::Structural(
                "observation mode needs an observed frame of feature length".into(),
            ))
        }
    }
    Ok(c)
}

/// `(target X_{t+Δ}, conditioning)` pairs: every start frame `t` with
/// `t + Δ < F`, where `Δ` is the sample's own horizon.
pub struct TrainPairs {
    e: Vec<Vec<f64>>,
    features: Vec<Vec<Vec<f64>>>,
    pairs: Vec<(usize, usize, usize)>,
}

impl TrainPairs {
    pub fn from_dataset(d: &Dataset) -> Self {
        let mut pairs = Vec::new();
        let mut e = Vec::with_capacity(d.len());
        let mut features = Vec::with_capacity(d.len());
        for (s, sample) in d.samples.iter().enumerate() {
            let delta = sample.horizon();
            for t in 0..d.grid.f.saturating_sub(delta) {
                pairs.push((s, t, delta));
            }
            e.push(sample.cond.as_slice().to_vec());
            features.push((0..d.grid.f).map(|f| sample.seq.feature(f)).collect());
        }
        Self { e, features, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stacks the selected pairs into `(x, c)`.
    pub fn batch(&self, cfg: &ModelConfig, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut xs = Vec::with_capacity(idx.len());
        let mut cs = Vec::with_capacity(idx.len());
        for &i in idx {
            let (s, t, delta) = self.pairs[i];
            let frames = &self.features[s];
            xs.push(frames[t + delta].as_slice());
            cs.push(conditioning_row(cfg, &self.e[s], delta, Some(&frames[t]))?);
        }
        Ok((Tensor::from_rows(&xs)?, Tensor::from_rows(&cs)?))
    }
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_vec(rows, cols, v).expect("shape")
}

/// Mini-batch Adam on the negative ELBO.
///
/// Deterministic given `tc.seed`. `progress` sees each epoch as it ends.
pub fn train(
    model: &mut Cvae,
    data: &TrainPairs,
    tc: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> std::result::Result<Vec<EpochLog>, TrainAbort> {
    let abort = |error, log: &[EpochLog], epoch| TrainAbort {
        error,
        log: log.to_vec(),
        epoch,
    };
    if tc.batch == 0 || tc.lr.is_nan() || tc.lr <= 0.0 {
        return Err(abort(
            Error::Usage("batch must be positive and lr > 0".into()),
            &[],
            0,
        ));
    }
    if tc.epochs > 0 && data.is_empty() {
        return Err(abort(Error::Usage("no training pairs".into()), &[], 0));
    }
    let adam = AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let beta = if tc.beta_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / tc.beta_warmup_epochs as f64).min(1.0)
        };
        order.shuffle(&mut rng);
        let (mut loss, mut recon, mut kl, mut rows) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(tc.batch) {
            let step = (|| -> Result<(f64, f64, f64)> {
                let (x, c) = data.batch(&model.cfg, idx)?;
                let eps = normal_tensor(&mut rng, idx.len(), model.cfg.latent);
                let mut t = Tape::with_params(&model.params);
                let xv = t.input(x);
                let cv = t.input(c);
                let vars = model.elbo_vars(&mut t, xv, cv, &eps)?;
                let parts = vars.parts(&t);
                let root = vars.loss(&mut t, beta)?;
                let l = t.value(root).item();
                let grads = t.backward(root)?.param_grads(&model.params);
                model.params.adam_step(&grads, &adam)?;
                Ok((l, parts.recon_loglik, parts.kl_term))
            })();
            match step {
                Ok((l, r, k)) => {
                    let n = idx.len() as f64;
                    loss += l * n;
                    recon += r * n;
                    kl += k * n;
                    rows += idx.len();
                }
                Err(e) => return Err(abort(e, &log, epoch + 1)),
            }
        }
        let n = rows as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            beta,
            loss: loss / n,
            recon_loglik: recon / n,
            kl_term: kl / n,
            elbo: (recon - kl) / n,
        };
        progress(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Point estimate and the individual decoded draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub draws: Vec<Vec<f64>>,
}

/// Decodes `n_samples` draws from the conditional prior for one
/// conditioning row and averages them.
pub fn predict(
    model: &Cvae,
    c: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Prediction> {
    if n_samples == 0 {
        return Err(Error::Usage("n_samples must be at least 1".into()));
    }
    if c.len() != model.cfg.cond_dim() {
        return Err(Error::Structural(format!(
            "conditioning row has {} entries, model expects {}",
            c.len(),
            model.cfg.cond_dim()
        )));
    }
    let eps = normal_tensor(rng, n_samples, model.cfg.latent);
    let mut t = Tape::with_params(&model.params);
    let cs = t.input(Tensor::from_rows(&vec![c; n_samples])?);
    let (mu, ls) = model.prior(&mut t, cs)?;
    let e = t.input(eps);
    let sigma = t.exp(ls)?;
    let noise = t.mul(sigma, e)?;
    let mut z = t.add(mu, noise)?;
    if model.cfg.prior_through_flows {
        z = model.apply_flows(&mut t, z, cs)?.zk;
    }
    let out = model.decode(&mut t, z, cs)?;
    let out = t.value(out);
    let draws: Vec<Vec<f64>> = (0..n_samples).map(|r| out.row_slice(r).to_vec()).collect();
    let mut mean = vec![0.0; out.cols()];
    for d in &draws {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_samples as f64;
    }
    Ok(Prediction { mean, draws })
}

pub fn save_model(path: &Path, model: &Cvae, training: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "config": model.cfg, "training": training });
    write_checkpoint(
        path,
        &Checkpoint::from_params(ARCH_TAG, meta, &model.params),
    )
}

/// Loads a checkpoint written by [`save_model`], with its training metadata.
pub fn load_model(path: &Path) -> Result<(Cvae, serde_json::Value)> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.arch != ARCH_TAG {
        return Err(Error::format(
            path,
            format!("architecture {:?}, expected {ARCH_TAG:?}", ckpt.arch),
        ));
    }
    let cfg: ModelConfig = serde_json::from_value(ckpt.meta["config"].clone())
        .map_err(|e| Error::format(path, format!("model config: {e}")))?;
    let mut model = Cvae::new(cfg, 0).map_err(|e| Error::format(path, e.to_string()))?;
    ckpt.load_into(&mut model.params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, ckpt.meta["training"].clone()))
}
