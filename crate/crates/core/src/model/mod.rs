//! Conditional VAE with a planar-flow posterior for channel prediction.
//!
//! All networks read a conditioning row `c`. In parametric mode `c = e`; in
//! observation mode `c = [e, X_t]`, and the decoder adds a linear temporal
//! path that maps the observed frame to the target frame through a bank of
//! per-horizon matrices acting on the DCT of each tap's sample sequence.

mod elbo;
mod flow;
mod train;

pub use elbo::{kl_gauss, ElboParts, ElboVars};
pub use flow::FlowOutput;
pub use train::{
    conditioning_row, load_model, predict, save_model, train, EpochLog, Prediction, TrainAbort,
    TrainConfig, TrainPairs,
};

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::GridConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParameterSet, Tape, Tensor, Var};

/// Bounds applied to every emitted `log sigma`.
pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;

/// Position and scale of the horizon entry in `e`.
pub const HORIZON_DIM: usize = 4;
pub const HORIZON_SCALE: f64 = 10.0;

pub const ARCH_TAG: &str = "cvae4cp";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    /// `c = e`.
    Parametric,
    /// `c = [e, X_t]`.
    Observation,
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(Self::Parametric),
            "observation" => Ok(Self::Observation),
            other => Err(Error::Usage(format!(
                "unknown mode {other:?}, expected parametric or observation"
            ))),
        }
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Parametric => "parametric",
            Self::Observation => "observation",
        })
    }
}

/// Architecture of a [`Cvae`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ConditioningMode,
    /// Delay taps `L`.
    pub taps: usize,
    /// Samples per tap and frame, `M * N`.
    pub mn: usize,
    pub e_dim: usize,
    pub latent: usize,
    pub flows: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    /// Integer horizons `0..knots` of the temporal path; 0 disables it.
    pub horizon_knots: usize,
    /// Push prior draws through the flows before decoding at prediction time.
    pub prior_through_flows: bool,
}

impl ModelConfig {
    /// Full-width defaults for `grid`.
    pub fn full(grid: &GridConfig, mode: ConditioningMode) -> Self {
        Self {
            mode,
            taps: grid.l,
            mn: grid.mn(),
            e_dim: grid.e_dim,
            latent: 48,
            flows: 4,
            enc_hidden: vec![256, 128],
            dec_hidden: vec![128, 256],
            prior_hidden: vec![64],
            horizon_knots: match mode {
                ConditioningMode::Observation => 11,
                ConditioningMode::Parametric => 0,
            },
            prior_through_flows: false,
        }
    }

    /// Halved hidden widths.
    pub fn desk(grid: &GridConfig, mode: ConditioningMode) -> Self {
        Self {
            enc_hidden: vec![128, 64],
            dec_hidden: vec![64, 128],
            prior_hidden: vec![32],
            ..Self::full(grid, mode)
        }
    }

    /// Real feature length `2 * L * M * N`.
    pub fn feature_len(&self) -> usize {
        2 * self.taps * self.mn
    }

    /// Width of the conditioning row.
    pub fn cond_dim(&self) -> usize {
        match self.mode {
            ConditioningMode::Parametric => self.e_dim,
            ConditioningMode::Observation => self.e_dim + self.feature_len(),
        }
    }

    fn flow_width(&self) -> usize {
        self.flows * (2 * self.latent + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.mn == 0 || self.latent == 0 || self.e_dim == 0 {
            return Err(Error::Usage(
                "model dimensions must be positive".to_string(),
            ));
        }
        if self.enc_hidden.contains(&0)
            || self.dec_hidden.contains(&0)
            || self.prior_hidden.contains(&0)
        {
            return Err(Error::Usage("hidden widths must be positive".into()));
        }
        if self.horizon_knots > 0 {
            if self.mode != ConditioningMode::Observation {
                return Err(Error::Usage(
                    "the temporal path needs observation mode".into(),
                ));
            }
            if self.e_dim <= HORIZON_DIM {
                return Err(Error::Usage(format!(
                    "the temporal path reads e[{HORIZON_DIM}], e has {} entries",
                    self.e_dim
                )));
            }
        }
        Ok(())
    }
}

/// Stack of affine layers with `tanh` between them.
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn new(
        params: &mut ParameterSet,
        prefix: &str,
        sizes: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, out) = (pair[0], pair[1]);
            let w = params.insert_uniform(format!("{prefix}.{i}.w"), fan_in, out, fan_in, rng)?;
            let b = params.insert_uniform(format!("{prefix}.{i}.b"), 1, out, fan_in, rng)?;
            layers.push((w, b));
        }
        Ok(Self { layers })
    }

    fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (t.param(w)?, t.param(b)?);
            h = t.matmul(h, w)?;
            h = t.add(h, b)?;
            if i + 1 < self.layers.len() {
                h = t.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// Orthonormal DCT-II matrix, `C[k][n] = s_k cos(pi (n + 1/2) k / N)`.
pub fn dct_matrix(n: usize) -> Tensor {
    let mut c = Tensor::zeros(n, n);
    for k in 0..n {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for j in 0..n {
            c.set(
                k,
                j,
                s * (PI * (j as f64 + 0.5) * k as f64 / n as f64).cos(),
            );
        }
    }
    c
}

/// Hat-function weights of horizon `h` on the knots `0..knots`.
fn horizon_gates(h: f64, knots: usize) -> Vec<f64> {
    (0..knots)
        .map(|k| (1.0 - (h - k as f64).abs()).max(0.0))
        .collect()
}

/// The model: configuration, parameters and the handles into them.
#[derive(Clone, Debug)]
pub struct Cvae {
    pub cfg: ModelConfig,
    pub params: ParameterSet,
    enc: Mlp,
    prior: Mlp,
    dec: Mlp,
    flow: Option<(ParamId, ParamId)>,
    skip: Option<ParamId>,
    /// Transposed DCT, applied to row vectors.
    dct_t: Tensor,
}

impl Cvae {
    /// Seeded uniform initialization with scale `1/sqrt(fan_in)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let (x, c, z) = (cfg.feature_len(), cfg.cond_dim(), cfg.latent);

        let sizes = |input: usize, hidden: &[usize], out: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let enc = Mlp::new(
            &mut params,
            "enc",
            &sizes(x + c, &cfg.enc_hidden, 2 * z),
            &mut rng,
        )?;
        let prior = Mlp::new(
            &mut params,
            "prior",
            &sizes(c, &cfg.prior_hidden, 2 * z),
            &mut rng,
        )?;
        let dec = Mlp::new(
            &mut params,
            "dec",
            &sizes(z + c, &cfg.dec_hidden, x),
            &mut rng,
        )?;
        let flow = if cfg.flows > 0 {
            let w = params.insert_uniform("flow.w", c, cfg.flow_width(), c, &mut rng)?;
            let b = params.insert_uniform("flow.b", 1, cfg.flow_width(), c, &mut rng)?;
            Some((w, b))
        } else {
            None
        };
        let skip = if cfg.horizon_knots > 0 {
            Some(params.insert_uniform(
                "skip.bank",
                cfg.horizon_knots * cfg.mn,
                cfg.mn,
                cfg.mn,
                &mut rng,
            )?)
        } else {
            None
        };
        let dct = dct_matrix(cfg.mn);
        let mut dct_t = Tensor::zeros(cfg.mn, cfg.mn);
        for i in 0..cfg.mn {
            for j in 0..cfg.mn {
                dct_t.set(j, i, dct.get(i, j));
            }
        }
        Ok(Self {
            cfg,
            params,
            enc,
            prior,
            dec,
            flow,
            skip,
            dct_t,
        })
    }

    fn split_gaussian(&self, t: &mut Tape<'_>, h: Var) -> Result<(Var, Var)> {
        let z = self.cfg.latent;
        let mu = t.slice_cols(h, 0, z)?;
        let ls = t.slice_cols(h, z, 2 * z)?;
        let ls = t.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, ls))
    }

    fn check_cols(&self, t: &Tape<'_>, v: Var, want: usize, what: &str) -> Result<()> {
        let got = t.value(v).cols();
        if got != want {
            return Err(Error::Structural(format!(
                "{what} has {got} columns, model expects {want}"
            )));
        }
        Ok(())
    }

    /// Posterior parameters `(mu_q, log sigma_q)` for rows of `x` and `c`.
    pub fn encode(&self, t: &mut Tape<'_>, x: Var, c: Var) -> Result<(Var, Var)> {
        self.check_cols(t, x, self.cfg.feature_len(), "feature")?;
        self.check_cols(t, c, self.cfg.cond_dim(), "conditioning")?;
        let xc = t.concat(x, c)?;
        let h = self.enc.forward(t, xc)?;
        self.split_gaussian(t, h)
    }

    /// Conditional prior parameters `(mu_p, log sigma_p)`.
    pub fn prior(&self, t: &mut Tape<'_>, c: Var) -> Result<(Var, Var)> {
        self.check_cols(t, c, self.cfg.cond_dim(), "conditioning")?;
        let h = self.prior.forward(t, c)?;
        self.split_gaussian(t, h)
    }

    /// Deterministic decoder `g(z, c)`.
    pub fn decode(&self, t: &mut Tape<'_>, z: Var, c: Var) -> Result<Var> {
        self.check_cols(t, z, self.cfg.latent, "latent")?;
        self.check_cols(t, c, self.cfg.cond_dim(), "conditioning")?;
        let zc = t.concat(z, c)?;
        let out = self.dec.forward(t, zc)?;
        match self.skip {
            Some(bank) => {
                let skip = self.temporal_path(t, c, bank)?;
                t.add(out, skip)
            }
            None => Ok(out),
        }
    }

    /// `sum_k hat_k(h) * DCT(x_t) A_k^T`, applied to each of the `2L` tap
    /// sequences of the observed frame.
    fn temporal_path(&self, t: &mut Tape<'_>, c: Var, bank: ParamId) -> Result<Var> {
        let (e_dim, mn, rows_per) = (self.cfg.e_dim, self.cfg.mn, 2 * self.cfg.taps);
        let batch = t.value(c).rows();
        let knots = self.cfg.horizon_knots;
        let mut gates = Tensor::zeros(batch * rows_per, knots);
        for b in 0..batch {
            let h = t.value(c).get(b, HORIZON_DIM) * HORIZON_SCALE;
            let g = horizon_gates(h, knots);
            for r in 0..rows_per {
                for (k, &gv) in g.iter().enumerate() {
                    gates.set(b * rows_per + r, k, gv);
                }
            }
        }
        let obs = t.slice_cols(c, e_dim, e_dim + self.cfg.feature_len())?;
        let seqs = t.reshape(obs, batch * rows_per, mn)?;
        let dct = t.input(self.dct_t.clone());
        let coeffs = t.matmul(seqs, dct)?;
        let bank = t.param(bank)?;
        let mapped = t.banked_matmul(coeffs, bank, gates)?;
        t.reshape(mapped, batch, self.cfg.feature_len())
    }

    /// `z0 = mu + exp(log sigma) * eps` and `log q(z0) = sum(-eps^2/2 - log sigma - ln(2 pi)/2)`.
    pub fn reparameterize(
        &self,
        t: &mut Tape<'_>,
        mu: Var,
        log_sigma: Var,
        eps: &Tensor,
    ) -> Result<(Var, Var)> {
        let z = t.value(mu).cols();
        let e = t.input(eps.clone());
        let sigma = t.exp(log_sigma)?;
        let noise = t.mul(sigma, e)?;
        let z0 = t.add(mu, noise)?;
        let consts: Vec<f64> = (0..eps.rows())
            .map(|r| {
                -0.5 * eps.row_slice(r).iter().map(|v| v * v).sum::<f64>()
                    - 0.5 * z as f64 * (2.0 * PI).ln()
            })
            .collect();
        let consts = t.input(Tensor::from_vec(eps.rows(), 1, consts)?);
        let s = t.sum_cols(log_sigma)?;
        let neg = t.scale(s, -1.0)?;
        let log_q0 = t.add(neg, consts)?;
        Ok((z0, log_q0))
    }

    /// Parameter count by group, for logs.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }
}
