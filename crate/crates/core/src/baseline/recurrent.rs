//! Simplified recurrent predictor: a tanh cell unrolled over the last few
//! observed frames with a linear head that emits the target frame.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Dataset, GridConfig};
use crate::error::{Error, Result};
use crate::model::{TrainAbort, TrainConfig, HORIZON_DIM, HORIZON_SCALE};
use crate::tensor::{
    read_checkpoint, write_checkpoint, AdamConfig, Checkpoint, ParamId, ParameterSet, Tape, Tensor,
    Var,
};

pub const RECURRENT_ARCH_TAG: &str = "simplified-recurrent";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentConfig {
    pub feature_len: usize,
    pub e_dim: usize,
    pub hidden: usize,
    /// Past frames read per prediction.
    pub unroll: usize,
}

impl RecurrentConfig {
    /// Hidden size 64, four past frames.
    pub fn new(grid: &GridConfig) -> Self {
        Self {
            feature_len: grid.feature_len(),
            e_dim: grid.e_dim,
            hidden: 64,
            unroll: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_len == 0 || self.hidden == 0 || self.unroll == 0 {
            return Err(Error::Usage(format!(
                "recurrent sizes must be positive: {self:?}"
            )));
        }
        if self.e_dim <= HORIZON_DIM {
            return Err(Error::Usage(format!(
                "conditioning vector needs more than {HORIZON_DIM} entries"
            )));
        }
        Ok(())
    }

    fn input_len(&self) -> usize {
        self.feature_len + self.e_dim
    }
}

#[derive(Clone, Debug)]
pub struct RecurrentParams {
    pub cfg: RecurrentConfig,
    pub params: ParameterSet,
    w_in: ParamId,
    w_rec: ParamId,
    b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Left-padded per-step inputs for one prediction: the last `unroll`
/// frames of `history`, each followed by `e` with its horizon set to `delta`.
fn step_rows(
    cfg: &RecurrentConfig,
    history: &[&[f64]],
    e: &[f64],
    delta: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    if history.is_empty() {
        return Err(Error::Usage("recurrent prediction needs a history".into()));
    }
    if e.len() != cfg.e_dim {
        return Err(Error::Structural(format!(
            "conditioning vector has {} entries, model expects {}",
            e.len(),
            cfg.e_dim
        )));
    }
    let mut e = e.to_vec();
    e[HORIZON_DIM] = f64::from((delta as f64 / HORIZON_SCALE) as f32);
    let used = &history[history.len().saturating_sub(cfg.unroll)..];
    let mut rows = vec![None; cfg.unroll - used.len()];
    for frame in used {
        if frame.len() != cfg.feature_len {
            return Err(Error::Structural(format!(
                "history frame has {} entries, model expects {}",
                frame.len(),
                cfg.feature_len
            )));
        }
        let mut r = Vec::with_capacity(cfg.input_len());
        r.extend_from_slice(frame);
        r.extend_from_slice(&e);
        rows.push(Some(r));
    }
    Ok(rows)
}

/// Per-step input matrices and `rows x 1` masks for a batch of predictions.
struct StepBatch {
    inputs: Vec<Tensor>,
    masks: Vec<Option<Tensor>>,
}

impl StepBatch {
    fn new(cfg: &RecurrentConfig, per_row: &[Vec<Option<Vec<f64>>>]) -> Result<Self> {
        let n = per_row.len();
        let width = cfg.input_len();
        let mut inputs = Vec::with_capacity(cfg.unroll);
        let mut masks = Vec::with_capacity(cfg.unroll);
        for j in 0..cfg.unroll {
            let mut data = vec![0.0; n * width];
            let mut mask = vec![0.0; n];
            for (r, rows) in per_row.iter().enumerate() {
                if let Some(v) = &rows[j] {
                    data[r * width..(r + 1) * width].copy_from_slice(v);
                    mask[r] = 1.0;
                }
            }
            inputs.push(Tensor::from_vec(n, width, data)?);
            masks.push(if mask.iter().all(|&m| m == 1.0) {
                None
            } else {
                Some(Tensor::from_vec(n, 1, mask)?)
            });
        }
        Ok(Self { inputs, masks })
    }
}

impl RecurrentParams {
    pub fn new(cfg: RecurrentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let (d, h) = (cfg.input_len(), cfg.hidden);
        let w_in = params.insert_uniform("rnn.w_in", d, h, d, &mut rng)?;
        let w_rec = params.insert_uniform("rnn.w_rec", h, h, h, &mut rng)?;
        let b = params.insert_uniform("rnn.b", 1, h, h, &mut rng)?;
        let w_out = params.insert_uniform("rnn.w_out", h, cfg.feature_len, h, &mut rng)?;
        let b_out = params.insert_uniform("rnn.b_out", 1, cfg.feature_len, h, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            w_in,
            w_rec,
            b,
            w_out,
            b_out,
        })
    }

    fn forward(&self, t: &mut Tape<'_>, batch: StepBatch) -> Result<Var> {
        let rows = batch.inputs[0].rows();
        let (w_in, w_rec, b) = (t.param(self.w_in)?, t.param(self.w_rec)?, t.param(self.b)?);
        let mut h = t.input(Tensor::zeros(rows, self.cfg.hidden));
        for (x, mask) in batch.inputs.into_iter().zip(batch.masks) {
            let x = t.input(x);
            let a = t.matmul(x, w_in)?;
            let r = t.matmul(h, w_rec)?;
            let a = t.add(a, r)?;
            let a = t.add(a, b)?;
            let next = t.tanh(a)?;
            h = match mask {
                None => next,
                Some(m) => {
                    // padded steps keep the previous state
                    let m = t.input(m);
                    let d = t.sub(next, h)?;
                    let d = t.mul(d, m)?;
                    t.add(h, d)?
                }
            };
        }
        let (w_out, b_out) = (t.param(self.w_out)?, t.param(self.b_out)?);
        let y = t.matmul(h, w_out)?;
        t.add(y, b_out)
    }

    /// Summed squared error of the selected training pairs.
    pub fn squared_error(
        &self,
        t: &mut Tape<'_>,
        data: &RecurrentPairs,
        idx: &[usize],
    ) -> Result<Var> {
        let (batch, target) = data.batch(&self.cfg, idx)?;
        let y = self.forward(t, batch)?;
        let target = t.input(target);
        let d = t.sub(y, target)?;
        t.sum_squares(d)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }
}

/// Predicts the frame `delta` ahead of the last frame of `history`.
pub fn predict_recurrent(
    model: &RecurrentParams,
    history: &[&[f64]],
    e: &[f64],
    delta: usize,
) -> Result<Vec<f64>> {
    let rows = step_rows(&model.cfg, history, e, delta)?;
    let batch = StepBatch::new(&model.cfg, &[rows])?;
    let mut t = Tape::with_params(&model.params);
    let y = model.forward(&mut t, batch)?;
    Ok(t.value(y).data().to_vec())
}

/// `(history end t, target t + delta)` pairs with at least two observed
/// frames, `delta` being each sample's own horizon.
pub struct RecurrentPairs {
    e: Vec<Vec<f64>>,
    features: Vec<Vec<Vec<f64>>>,
    pairs: Vec<(usize, usize, usize)>,
}

impl RecurrentPairs {
    pub fn from_dataset(d: &Dataset) -> Self {
        let mut pairs = Vec::new();
        let mut e = Vec::with_capacity(d.len());
        let mut features = Vec::with_capacity(d.len());
        for (s, sample) in d.samples.iter().enumerate() {
            let delta = sample.horizon();
            for t in 1..d.grid.f.saturating_sub(delta) {
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

    fn batch(&self, cfg: &RecurrentConfig, idx: &[usize]) -> Result<(StepBatch, Tensor)> {
        let mut per_row = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            let (s, t, delta) = self.pairs[i];
            let frames = &self.features[s];
            let history: Vec<&[f64]> = frames[..=t].iter().map(|f| f.as_slice()).collect();
            per_row.push(step_rows(cfg, &history, &self.e[s], delta)?);
            targets.push(frames[t + delta].as_slice());
        }
        Ok((StepBatch::new(cfg, &per_row)?, Tensor::from_rows(&targets)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecurrentEpoch {
    /// 1-based.
    pub epoch: usize,
    /// Mean squared error per pair, summed over the feature.
    pub loss: f64,
}

/// Mini-batch Adam on the squared prediction error, with the batch size,
/// learning rate and seed of `tc`.
pub fn train_recurrent(
    model: &mut RecurrentParams,
    data: &RecurrentPairs,
    tc: &TrainConfig,
    mut progress: impl FnMut(&RecurrentEpoch),
) -> std::result::Result<Vec<RecurrentEpoch>, TrainAbort<RecurrentEpoch>> {
    let abort = |error, log: &[RecurrentEpoch], epoch| TrainAbort {
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
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(tc.batch) {
            let step = (|| -> Result<f64> {
                let mut t = Tape::with_params(&model.params);
                let sq = model.squared_error(&mut t, data, idx)?;
                let loss = t.scale(sq, 1.0 / idx.len() as f64)?;
                let l = t.value(loss).item();
                let grads = t.backward(loss)?.param_grads(&model.params);
                model.params.adam_step(&grads, &adam)?;
                Ok(l)
            })();
            match step {
                Ok(l) => total += l * idx.len() as f64,
                Err(e) => return Err(abort(e, &log, epoch + 1)),
            }
        }
        let entry = RecurrentEpoch {
            epoch: epoch + 1,
            loss: total / data.len() as f64,
        };
        progress(&entry);
        log.push(entry);
    }
    Ok(log)
}

pub fn save_recurrent(
    path: &Path,
    model: &RecurrentParams,
    training: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({ "config": model.cfg, "training": training });
    write_checkpoint(
        path,
        &Checkpoint::from_params(RECURRENT_ARCH_TAG, meta, &model.params),
    )
}

pub fn load_recurrent(path: &Path) -> Result<(RecurrentParams, serde_json::Value)> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.arch != RECURRENT_ARCH_TAG {
        return Err(Error::format(
            path,
            format!(
                "architecture {:?}, expected {RECURRENT_ARCH_TAG:?}",
                ckpt.arch
            ),
        ));
    }
    let cfg: RecurrentConfig = serde_json::from_value(ckpt.meta["config"].clone())
        .map_err(|e| Error::format(path, format!("recurrent config: {e}")))?;
    let mut model = RecurrentParams::new(cfg, 0).map_err(|e| Error::format(path, e.to_string()))?;
    ckpt.load_into(&mut model.params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, ckpt.meta["training"].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_dataset, GenerationConfig};
    use crate::tensor::gradcheck::{check_parameters, GradCheckConfig};

    fn grid() -> GridConfig {
        GridConfig {
            m: 2,
            n: 2,
            l: 2,
            f: 6,
            e_dim: 20,
        }
    }

    fn tiny() -> RecurrentConfig {
        RecurrentConfig {
            hidden: 5,
            unroll: 3,
            ..RecurrentConfig::new(&grid())
        }
    }

    fn data() -> (Dataset, RecurrentPairs) {
        let d = build_dataset(&grid(), 10, 4, &GenerationConfig::default()).unwrap();
        let p = RecurrentPairs::from_dataset(&d);
        (d, p)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = RecurrentParams::new(tiny(), 3).unwrap();
        let (_, p) = data();
        // mixes full and padded histories
        let idx: Vec<usize> = (0..p.len().min(6)).collect();
        let model = m.clone();
        let build = move |t: &mut Tape<'_>| model.squared_error(t, &p, &idx);
        let r = check_parameters(&m.params, build, &GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, m.parameter_count());
    }

    #[test]
    fn zero_weights_predict_zero() {
        let mut m = RecurrentParams::new(tiny(), 3).unwrap();
        m.params.zero_all();
        let (d, _) = data();
        let s = &d.samples[0];
        let f0 = s.seq.feature(0);
        let f1 = s.seq.feature(1);
        let y = predict_recurrent(&m, &[&f0, &f1], s.cond.as_slice(), 1).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert_eq!(y.len(), 16);
    }

    #[test]
    fn pairs_start_after_the_first_frame() {
        let (d, p) = data();
        let want: usize = d
            .samples
            .iter()
            .map(|s| 6usize.saturating_sub(s.horizon()).saturating_sub(1))
            .sum();
        assert_eq!(p.len(), want);
        assert!(p.pairs.iter().all(|&(_, t, _)| t >= 1));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (_, p) = data();
        let tc = TrainConfig {
            epochs: 15,
            batch: 4,
            lr: 1e-2,
            seed: 7,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = RecurrentParams::new(tiny(), 7).unwrap();
            let log = train_recurrent(&mut m, &p, &tc, |_| {}).unwrap();
            (m.params, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la[14].loss < la[0].loss, "{la:?}");
    }

    #[test]
    fn longer_histories_use_the_last_frames() {
        let m = RecurrentParams::new(tiny(), 3).unwrap();
        let (d, _) = data();
        let s = &d.samples[1];
        let f: Vec<Vec<f64>> = (0..5).map(|i| s.seq.feature(i)).collect();
        let all: Vec<&[f64]> = f.iter().map(|v| v.as_slice()).collect();
        let a = predict_recurrent(&m, &all, s.cond.as_slice(), 1).unwrap();
        let b = predict_recurrent(&m, &all[2..], s.cond.as_slice(), 1).unwrap();
        assert_eq!(a, b);
        assert!(predict_recurrent(&m, &[], s.cond.as_slice(), 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_tag_check() {
        let m = RecurrentParams::new(tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ddck");
        save_recurrent(&path, &m, serde_json::json!({})).unwrap();
        let (back, _) = load_recurrent(&path).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert!(crate::model::load_model(&path).is_err());
    }
}
