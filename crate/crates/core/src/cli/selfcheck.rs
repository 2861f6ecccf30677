//! Built-in numerical checks run by `selfcheck`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baseline::{RecurrentConfig, RecurrentPairs, RecurrentParams};
use crate::channel::{
    build_dataset, power_delay_profile, GenerationConfig, GridConfig, SosProcess,
};
use crate::error::Result;
use crate::model::{kl_gauss, ConditioningMode, Cvae, ModelConfig};
use crate::special::{bessel_j0, ks_test, mean_stderr, rayleigh_cdf};
use crate::tensor::gradcheck::{check_parameters, GradCheckConfig};
use crate::tensor::{Fault, Tape, Tensor};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn tiny_model(flows: usize, seed: u64) -> Result<Cvae> {
    Cvae::new(
        ModelConfig {
            mode: ConditioningMode::Parametric,
            taps: 1,
            mn: 8,
            e_dim: 6,
            latent: 4,
            flows,
            enc_hidden: vec![12],
            dec_hidden: vec![12],
            prior_hidden: vec![8],
            horizon_knots: 0,
            prior_through_flows: false,
        },
        seed,
    )
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let v = (0..rows * cols).map(|_| normal(rng)).collect();
    Tensor::from_vec(rows, cols, v)
}

/// Negative-ELBO gradient of a 2D = 16, C = 6, Z = 4, K = 2 model against
/// central differences.
pub fn elbo_gradient(fault: Option<Fault>) -> Result<CheckResult> {
    let m = tiny_model(2, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(3, 16, &mut rng)?;
    let c = random_tensor(3, 6, &mut rng)?;
    let eps = random_tensor(3, 4, &mut rng)?;
    let model = m.clone();
    let build = move |t: &mut Tape<'_>| {
        if let Some(f) = fault {
            t.inject_fault(f);
        }
        let xv = t.input(x.clone());
        let cv = t.input(c.clone());
        model.elbo_vars(t, xv, cv, &eps)?.loss(t, 1.0)
    };
    let r = check_parameters(&m.params, build, &GradCheckConfig::default())?;
    Ok(result(
        "elbo-gradient",
        r.passed(),
        format!(
            "{} entries, max rel error {:.2e}",
            r.checked, r.max_rel_error
        ),
    ))
}

pub fn recurrent_gradient(fault: Option<Fault>) -> Result<CheckResult> {
    let grid = GridConfig {
        m: 2,
        n: 2,
        l: 2,
        f: 6,
        e_dim: 20,
    };
    let cfg = RecurrentConfig {
        hidden: 5,
        unroll: 3,
        ..RecurrentConfig::new(&grid)
    };
    let m = RecurrentParams::new(cfg, 13)?;
    let d = build_dataset(&grid, 6, 14, &GenerationConfig::default())?;
    let pairs = RecurrentPairs::from_dataset(&d);
    let idx: Vec<usize> = (0..pairs.len().min(5)).collect();
    let model = m.clone();
    let build = move |t: &mut Tape<'_>| {
        if let Some(f) = fault {
            t.inject_fault(f);
        }
        model.squared_error(t, &pairs, &idx)
    };
    let r = check_parameters(&m.params, build, &GradCheckConfig::default())?;
    Ok(result(
        "recurrent-gradient",
        r.passed(),
        format!(
            "{} entries, max rel error {:.2e}",
            r.checked, r.max_rel_error
        ),
    ))
}

fn flow_map(m: &Cvae, z: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut t = Tape::with_params(&m.params);
    let zv = t.input(Tensor::row(z));
    let cv = t.input(Tensor::row(c));
    let out = m.apply_flows(&mut t, zv, cv)?;
    let ld = match out.sum_logdet {
        Some(v) => t.value(v).item(),
        None => 0.0,
    };
    Ok((t.value(out.zk).data().to_vec(), ld))
}

/// `ln|det|` by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, piv);
        let d = a[col][col];
        s += d.abs().ln();
        let pivot = a[col].clone();
        for row in a.iter_mut().skip(col + 1) {
            let f = row[col] / d;
            for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
        }
    }
    s
}

/// Flow log-determinant against a central-difference Jacobian at 100 points.
pub fn flow_logdet() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let zd = 1 + (trial % 8) as usize;
        let m = Cvae::new(
            ModelConfig {
                latent: zd,
                ..tiny_model(1 + (trial % 4) as usize, 0)?.cfg
            },
            trial,
        )?;
        let z: Vec<f64> = (0..zd).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, ld) = flow_map(&m, &z, &c)?;
        let h = 1e-5;
        let mut jac = vec![vec![0.0; zd]; zd];
        for j in 0..zd {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up[j] += h;
            dn[j] -= h;
            let (fu, _) = flow_map(&m, &up, &c)?;
            let (fd, _) = flow_map(&m, &dn, &c)?;
            for i in 0..zd {
                jac[i][j] = (fu[i] - fd[i]) / (2.0 * h);
            }
        }
        worst = worst.max((ld - log_abs_det(jac)).abs());
    }
    Ok(result(
        "flow-logdet",
        worst < 1e-6,
        format!("100 points, max |error| {worst:.2e}"),
    ))
}

/// `KL(p || p) = 0`, non-negativity on random inputs, and the identity-flow
/// Monte Carlo estimate against the closed form.
pub fn kl_oracles(draws: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mu = [0.4, -1.1, 0.2];
    let ls = [-0.3, 0.5, 0.0];
    let self_kl = kl_gauss(&mu, &ls, &mu, &ls);
    let mut min_kl = f64::INFINITY;
    for _ in 0..draws {
        let v: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        min_kl = min_kl.min(kl_gauss(&v[0..3], &v[3..6], &v[6..9], &v[9..12]));
    }
    let (mq, lq, mp, lp) = ([0.5, -0.2], [-0.4, 0.3], [0.1, 0.3], [0.2, -0.5]);
    let closed = kl_gauss(&mq, &lq, &mp, &lp);
    let estimates: Vec<f64> = (0..draws)
        .map(|_| {
            let mut s = 0.0;
            for j in 0..2 {
                let z = mq[j] + lq[j].exp() * normal(&mut rng);
                let log_q = -0.5 * ((z - mq[j]) / lq[j].exp()).powi(2) - lq[j];
                let log_p = -0.5 * ((z - mp[j]) / lp[j].exp()).powi(2) - lp[j];
                s += log_q - log_p;
            }
            s
        })
        .collect();
    let (mean, se) = mean_stderr(&estimates);
    let passed = self_kl == 0.0 && min_kl >= 0.0 && (mean - closed).abs() <= 3.0 * se;
    Ok(result(
        "kl-oracles",
        passed,
        format!(
            "KL(p,p) = {self_kl}, min over {draws} = {min_kl:.2e}, MC {mean:.5} vs {closed:.5} (se {se:.1e})"
        ),
    ))
}

/// Empirical Jakes autocorrelation against `J0(2 pi f_D tau)` for
/// `f_D tau` up to 1, the Rayleigh envelope KS test and the PDP sum.
pub fn channel_statistics() -> Result<CheckResult> {
    let fd = 1000.0;
    let taps = 2000u64;
    let lags: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1 / fd).collect();
    let mut acc = vec![0.0; lags.len()];
    let mut envelope = Vec::new();
    for k in 0..taps {
        let mut rng = ChaCha8Rng::seed_from_u64(41_000 + k);
        let p = SosProcess::draw(&mut rng, fd, 1.0);
        let t0 = rng.random_range(0.0..1.0);
        let h0 = p.at(t0);
        for (a, &lag) in acc.iter_mut().zip(&lags) {
            *a += (h0 * p.at(t0 + lag).conj()).re;
        }
        for j in 0..5 {
            envelope.push(p.at(t0 + 0.37 * j as f64).norm());
        }
    }
    let worst = acc
        .iter()
        .zip(&lags)
        .map(|(a, lag)| (a / taps as f64 - bessel_j0(2.0 * PI * fd * lag)).abs())
        .fold(0.0, f64::max);
    let ks = ks_test(&envelope, rayleigh_cdf);
    let pdp: f64 = power_delay_profile(6, 1.5).iter().sum();
    Ok(result(
        "channel-statistics",
        worst < 0.05 && ks.p_value > 0.01 && (pdp - 1.0).abs() < 1e-6,
        format!(
            "autocorrelation max |error| {worst:.3}, KS p = {:.3} on {} envelopes, PDP sum {pdp}",
            ks.p_value,
            envelope.len()
        ),
    ))
}

/// Every check, in order.
pub fn run_all(fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    Ok(vec![
        elbo_gradient(fault)?,
        recurrent_gradient(fault)?,
        flow_logdet()?,
        kl_oracles(100_000)?,
        channel_statistics()?,
    ])
}
