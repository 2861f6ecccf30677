//! Acceptance criteria 1 to 8, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance -- 5 6` runs only the listed criteria.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use otfs_predict::channel::{
    build_dataset, power_delay_profile, read_dataset, sample_stream, split_dataset,
    GenerationConfig, GridConfig, SosProcess,
};
use otfs_predict::cli::RunConfig;
use otfs_predict::eval::{evaluate, sweep_doppler, sweep_horizon, Predictor};
use otfs_predict::model::{kl_gauss, train, ConditioningMode, Cvae, ModelConfig, TrainPairs};
use otfs_predict::tensor::{Tape, Tensor};

type Check = std::result::Result<(bool, String), String>;
type Criterion = (usize, &'static str, Duration, fn() -> Check);

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `J0` by its power series; exact to rounding for `|x| <= 2 pi`.
fn j0_series(x: f64) -> f64 {
    let q = -(x * x) / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..60 {
        term *= q / (k * k) as f64;
        sum += term;
    }
    sum
}

/// Kolmogorov survival function with Stephens' small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let s: f64 = (1..200)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

/// `ln|det a|` via LU with partial pivoting.
fn ln_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .unwrap();
        a.swap(k, p);
        acc += a[k][k].abs().ln();
        let pivot = a[k].clone();
        for row in a.iter_mut().skip(k + 1) {
            let f = row[k] / pivot[k];
            for (x, p) in row[k..].iter_mut().zip(&pivot[k..]) {
                *x -= f * p;
            }
        }
    }
    acc
}

fn tiny_config(latent: usize, flows: usize) -> ModelConfig {
    ModelConfig {
        mode: ConditioningMode::Parametric,
        taps: 1,
        mn: 8,
        e_dim: 6,
        latent,
        flows,
        enc_hidden: vec![10],
        dec_hidden: vec![10],
        prior_hidden: vec![7],
        horizon_knots: 0,
        prior_through_flows: false,
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
}

fn criterion_1() -> Check {
    let cfg = tiny_config(4, 2);
    if cfg.feature_len() != 16 || cfg.cond_dim() != 6 {
        return Err(format!(
            "tiny model has 2D = {}, C = {}",
            cfg.feature_len(),
            cfg.cond_dim()
        ));
    }
    let mut model = Cvae::new(cfg, 101).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = random_tensor(4, 16, &mut rng);
    let c = random_tensor(4, 6, &mut rng);
    let eps = random_tensor(4, 4, &mut rng);

    let grads = {
        let mut t = Tape::with_params(&model.params);
        let xv = t.input(x.clone());
        let cv = t.input(c.clone());
        let root = model
            .elbo_vars(&mut t, xv, cv, &eps)
            .and_then(|v| v.loss(&mut t, 1.0))
            .map_err(err)?;
        t.backward(root).map_err(err)?.param_grads(&model.params)
    };
    let neg_elbo = |m: &Cvae| -> std::result::Result<f64, String> {
        Ok(-m.elbo(&x, &c, &eps).map_err(err)?.elbo)
    };
    let h = 1e-4;
    let (mut checked, mut failures, mut worst) = (0usize, 0usize, 0.0f64);
    let mut worst_abs = 0.0f64;
    let ids: Vec<_> = model.params.ids().collect();
    for (id, g) in ids.into_iter().zip(&grads) {
        for i in 0..g.len() {
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + h;
            let up = neg_elbo(&model)?;
            model.params.get_mut(id).data_mut()[i] = orig - h;
            let dn = neg_elbo(&model)?;
            model.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - dn) / (2.0 * h);
            let analytic = g.data()[i];
            let diff = (analytic - numeric).abs();
            worst_abs = worst_abs.max(diff);
            let rel = if diff <= 1e-6 {
                0.0
            } else {
                diff / analytic.abs().max(numeric.abs())
            };
            worst = worst.max(rel);
            checked += 1;
            if rel >= 1e-4 {
                failures += 1;
            }
        }
    }
    Ok((
        failures == 0 && checked == model.parameter_count(),
        format!(
            "{checked} entries, {failures} over 1e-4, max rel error {worst:.2e}, max abs difference {worst_abs:.2e}"
        ),
    ))
}

fn flow_image(m: &Cvae, z: &[f64], c: &[f64]) -> std::result::Result<(Vec<f64>, f64), String> {
    let mut t = Tape::with_params(&m.params);
    let zv = t.input(Tensor::row(z));
    let cv = t.input(Tensor::row(c));
    let out = m.apply_flows(&mut t, zv, cv).map_err(err)?;
    let ld = out.sum_logdet.map_or(0.0, |v| t.value(v).item());
    Ok((t.value(out.zk).data().to_vec(), ld))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut worst = 0.0f64;
    for point in 0..100u64 {
        let zd = 1 + (point % 8) as usize;
        let flows = 1 + (point % 3) as usize;
        let mut m = Cvae::new(tiny_config(zd, flows), 300 + point).map_err(err)?;
        // larger flow weights move the map well away from the identity
        for name in ["flow.w", "flow.b"] {
            let id = m.params.id(name).ok_or("model has no flow parameters")?;
            for v in m.params.get_mut(id).data_mut() {
                *v *= 3.0;
            }
        }
        let z: Vec<f64> = (0..zd).map(|_| 1.5 * normal(&mut rng)).collect();
        let c: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
        let (_, ld) = flow_image(&m, &z, &c)?;
        // five-point stencil, truncation error O(h^4)
        let h = 1e-4;
        let mut jac = vec![vec![0.0; zd]; zd];
        for j in 0..zd {
            let at = |s: f64| {
                let mut zs = z.clone();
                zs[j] += s * h;
                flow_image(&m, &zs, &c).map(|(f, _)| f)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            for i in 0..zd {
                jac[i][j] = (m2[i] - p2[i] + 8.0 * (p1[i] - m1[i])) / (12.0 * h);
            }
        }
        worst = worst.max((ld - ln_abs_det(jac)).abs());
    }
    Ok((
        worst < 1e-6,
        format!("100 points, Z in 1..=8, max |sum_logdet - ln|det J|| {worst:.2e}"),
    ))
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut self_zero = true;
    let mut min_kl = f64::INFINITY;
    for _ in 0..100_000 {
        let d = rng.random_range(1..=6);
        let v: Vec<f64> = (0..4 * d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let (mq, lq, mp, lp) = (&v[..d], &v[d..2 * d], &v[2 * d..3 * d], &v[3 * d..]);
        self_zero &= kl_gauss(mq, lq, mq, lq) == 0.0;
        min_kl = min_kl.min(kl_gauss(mq, lq, mp, lp));
    }

    // identity flow: u = 0 for every block, so the flow KL estimator is
    // log q(z) - log p(z) at z ~ q
    let mut m = Cvae::new(tiny_config(3, 2), 302).map_err(err)?;
    let zd = m.cfg.latent;
    for name in ["flow.w", "flow.b"] {
        let id = m.params.id(name).ok_or("model has no flow parameters")?;
        let t = m.params.get_mut(id);
        let cols = t.cols();
        for r in 0..t.rows() {
            for k in 0..m.cfg.flows {
                for j in 0..zd {
                    t.set(r, k * (2 * zd + 1) + j, 0.0);
                }
            }
            debug_assert!(cols >= m.cfg.flows * (2 * zd + 1));
        }
    }
    let draws = 100_000;
    let x_row: Vec<f64> = (0..16).map(|_| normal(&mut rng)).collect();
    let c_row: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
    let x = Tensor::from_rows(&vec![x_row.as_slice(); draws]).map_err(err)?;
    let c = Tensor::from_rows(&vec![c_row.as_slice(); draws]).map_err(err)?;
    let eps = random_tensor(draws, zd, &mut rng);
    let mut t = Tape::with_params(&m.params);
    let xv = t.input(x);
    let cv = t.input(c);
    let vars = m.elbo_vars(&mut t, xv, cv, &eps).map_err(err)?;
    let samples = t.value(vars.kl).data().to_vec();
    let (mu_q, ls_q) = m.encode(&mut t, xv, cv).map_err(err)?;
    let (mu_p, ls_p) = m.prior(&mut t, cv).map_err(err)?;
    let first = |v| t.value(v).row_slice(0).to_vec();
    let closed = kl_gauss(&first(mu_q), &first(ls_q), &first(mu_p), &first(ls_p));
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let z = (mean - closed).abs() / se;
    Ok((
        self_zero && min_kl >= 0.0 && z <= 3.0,
        format!(
            "KL(p,p) = 0: {self_zero}, min over 1e5 = {min_kl:.3e}, MC {mean:.5} vs closed {closed:.5} ({z:.2} se)"
        ),
    ))
}

fn criterion_4() -> Check {
    let fd = 1000.0;
    let taps = 20_000u64;
    let lags: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05 / fd).collect();
    let mut acc = vec![0.0; lags.len()];
    let mut envelope = Vec::with_capacity(10_000);
    for k in 0..taps {
        let mut rng = sample_stream(401, k, 1);
        let p = SosProcess::draw(&mut rng, fd, 1.0);
        let t0 = rng.random_range(0.0..0.5);
        let h0 = p.at(t0);
        for (a, &lag) in acc.iter_mut().zip(&lags) {
            *a += (h0 * p.at(t0 + lag).conj()).re;
        }
        if k < 10_000 {
            envelope.push(h0.norm());
        }
    }
    let worst = acc
        .iter()
        .zip(&lags)
        .map(|(a, &lag)| (a / taps as f64 - j0_series(2.0 * PI * fd * lag)).abs())
        .fold(0.0, f64::max);

    envelope.sort_by(f64::total_cmp);
    let n = envelope.len();
    let d = envelope
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let f = 1.0 - (-r * r).exp();
            (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
        })
        .fold(0.0, f64::max);
    let p = ks_p_value(d, n);

    let pdp_err = [(6, 1.5), (4, 1.5), (6, 0.7)]
        .iter()
        .map(|&(l, decay)| (power_delay_profile(l, decay).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((
        worst <= 0.05 && p > 0.01 && pdp_err <= 1e-6,
        format!(
            "autocorrelation max |err| {worst:.4} over f_D tau in [0, 1] ({taps} taps), KS D = {d:.4} p = {p:.3} ({n} envelopes), PDP |sum - 1| {pdp_err:.1e}"
        ),
    ))
}

fn criterion_5() -> Check {
    let grid = GridConfig::DESK;
    let delta = 8;
    let bandwidth = 5e6;
    let tau = grid.mn() as f64 / bandwidth;
    let mut worst_stale = 0.0f64;
    let mut worst_ar1 = 0.0f64;
    for i in 0..10 {
        let nu = 0.05 + 0.05 * i as f64;
        let fd = nu / (tau * delta as f64);
        let gen = GenerationConfig {
            doppler_hz: Some(fd),
            bandwidth_hz: Some(bandwidth),
            ..GenerationConfig::default()
        };
        let d = build_dataset(&grid, 2000, 500 + i, &gen).map_err(err)?;
        let s = &d.samples[0];
        let nu_actual = s.seq.doppler_hz * s.seq.frame_duration_s() * delta as f64;
        if (nu_actual - nu).abs() > 1e-6 {
            return Err(format!(
                "point {i}: f_D tau delta is {nu_actual}, wanted {nu}"
            ));
        }
        let j0 = j0_series(2.0 * PI * nu);
        let stale = evaluate(&Predictor::Stale, &d, delta, 7).map_err(err)?;
        let ar1 = evaluate(&Predictor::Ar1, &d, delta, 7).map_err(err)?;
        let want_stale = 2.0 * (1.0 - j0);
        let want_ar1 = 1.0 - j0 * j0;
        let rs = (stale.nmse_aggregate - want_stale).abs() / want_stale;
        let ra = (ar1.nmse_aggregate - want_ar1).abs() / want_ar1;
        println!(
            "  nu {nu:.2}  f_D {fd:7.1} Hz  stale {:.4e} vs {want_stale:.4e} ({:+.1}%)  ar1 {:.4e} vs {want_ar1:.4e} ({:+.1}%)",
            stale.nmse_aggregate,
            100.0 * (stale.nmse_aggregate / want_stale - 1.0),
            ar1.nmse_aggregate,
            100.0 * (ar1.nmse_aggregate / want_ar1 - 1.0),
        );
        worst_stale = worst_stale.max(rs);
        worst_ar1 = worst_ar1.max(ra);
    }
    Ok((
        worst_stale < 0.1 && worst_ar1 < 0.1,
        format!(
            "10 points x 2000 samples, worst relative error stale {:.1}%, ar1 {:.1}%",
            100.0 * worst_stale,
            100.0 * worst_ar1
        ),
    ))
}

fn criterion_6() -> Check {
    let mut cfg = RunConfig::desk();
    cfg.model.mode = ConditioningMode::Observation;
    cfg.apply_seed(Some(7), None).map_err(err)?;
    cfg.validate().map_err(err)?;
    let grid = cfg.grid();
    if (grid.m, grid.n, grid.l, grid.f) != (8, 8, 4, 11)
        || cfg.data.count != 1000
        || cfg.data.split != 800
        || cfg.train.epochs != 50
        || cfg.train.batch != 16
        || cfg.train.lr != 1e-3
    {
        return Err(format!("desk preset drifted: {cfg:?}"));
    }
    let d =
        build_dataset(&grid, cfg.data.count, cfg.data.base_seed, &cfg.generation()).map_err(err)?;
    let (train_set, _) = split_dataset(d, cfg.data.split, cfg.data.base_seed).map_err(err)?;
    let tc = cfg.train_config();
    let mut model = Cvae::new(cfg.model_config(), tc.seed).map_err(err)?;
    let log = train(
        &mut model,
        &TrainPairs::from_dataset(&train_set),
        &tc,
        |_| {},
    )
    .map_err(|a| err(a.error))?;
    let first = log[0].elbo;
    let tail = &log[log.len() - 5..];
    let smoothed = tail.iter().map(|e| e.elbo).sum::<f64>() / tail.len() as f64;
    let a = smoothed > first;

    let sc = cfg.sweep_config();
    let preds = [
        Predictor::Stale,
        Predictor::Cvae {
            model: &model,
            draws: cfg.model.draws,
        },
    ];
    let doppler = sweep_doppler(&sc, &preds).map_err(err)?;
    let top = sc.doppler_points.iter().copied().fold(f64::MIN, f64::max);
    let at_top = |name: &str| {
        doppler
            .series(name)
            .into_iter()
            .find(|r| r.axis == top)
            .map(|r| r.nmse_mean)
    };
    let (stale_top, cvae_top) = (
        at_top("stale").ok_or("no stale row")?,
        at_top("cvae4cp").ok_or("no cvae row")?,
    );
    let b = cvae_top * 2.0 <= stale_top;

    let horizon = sweep_horizon(&sc, &preds).map_err(err)?;
    let stale_h = horizon.series("stale");
    let cvae_h = horizon.series("cvae4cp");
    let axis: Vec<f64> = cvae_h.iter().map(|r| r.axis).collect();
    let full_axis = axis == (1..=10).map(|k| k as f64).collect::<Vec<_>>();
    let below = cvae_h
        .iter()
        .zip(&stale_h)
        .filter(|(c, s)| c.nmse_mean < s.nmse_mean)
        .count();
    for (c, s) in cvae_h.iter().zip(&stale_h) {
        println!(
            "  delta {:>2}  cvae4cp {:.3e}  stale {:.3e}",
            c.axis, c.nmse_mean, s.nmse_mean
        );
    }
    let c = full_axis && below == cvae_h.len();
    Ok((
        a && b && c,
        format!(
            "(a) ELBO epoch 1 {first:.2} -> last-5 mean {smoothed:.2}: {a}; (b) at {top} Hz cvae4cp {cvae_top:.3e} vs stale {stale_top:.3e} ({:.0}x): {b}; (c) below stale at {below}/{} horizons: {c}",
            stale_top / cvae_top,
            cvae_h.len()
        ),
    ))
}

fn run_cli(dir: &Path, args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_otfs-predict"))
        .args(args)
        .current_dir(dir)
        .env_remove("DDCP_SEED")
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

const SMALL_CONFIG: &str = r#"
[data]
count = 120
split = 100

[train]
epochs = 3

[sweep]
count = 30
doppler_points = [1000.0, 4000.0]
horizons = [1, 4]
"#;

fn criterion_7() -> Check {
    let root = tempfile::tempdir().map_err(err)?;
    let files = [
        "dataset.ddcp",
        "cvae.ddck",
        "cvae.ddck.log.csv",
        "recurrent.ddck",
        "recurrent.ddck.log.csv",
        "doppler.csv",
        "doppler.csv.meta.json",
        "horizon.csv",
        "horizon.csv.meta.json",
    ];
    let mut runs = Vec::new();
    for threads in ["1", "4"] {
        let dir = root.path().join(format!("threads-{threads}"));
        std::fs::create_dir(&dir).map_err(err)?;
        std::fs::write(dir.join("run.toml"), SMALL_CONFIG).map_err(err)?;
        let common = [
            "--desk-scale",
            "--config",
            "run.toml",
            "--seed",
            "11",
            "--threads",
            threads,
        ];
        let with = |rest: &[&'static str]| -> Vec<&str> {
            common.iter().copied().chain(rest.iter().copied()).collect()
        };
        run_cli(&dir, &with(&["generate"]))?;
        run_cli(&dir, &with(&["train"]))?;
        run_cli(&dir, &with(&["train", "--predictor", "recurrent"]))?;
        run_cli(
            &dir,
            &with(&["sweep", "--axis", "doppler", "--out", "doppler.csv"]),
        )?;
        run_cli(
            &dir,
            &with(&["sweep", "--axis", "horizon", "--out", "horizon.csv"]),
        )?;
        let mut bytes = Vec::new();
        for f in files {
            bytes.push(std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?);
        }
        runs.push(bytes);
    }
    let differing: Vec<&str> = files
        .iter()
        .zip(runs[0].iter().zip(&runs[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(f, _)| *f)
        .collect();
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} outputs byte-identical at --threads 1 and 4",
                files.len()
            )
        } else {
            format!("differ across thread counts: {differing:?}")
        },
    ))
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let start = Instant::now();
    run_cli(
        dir.path(),
        &["--seed", "13", "generate", "--out", "full.ddcp"],
    )?;
    let elapsed = start.elapsed();
    let d = read_dataset(&dir.path().join("full.ddcp")).map_err(err)?;
    let s = &d.samples[0];
    let feature = s.seq.feature(0).len();
    let cond = s.cond.as_slice().len();
    let shapes = d.len() == 1000
        && d.grid == GridConfig::FULL
        && d.samples.iter().all(|s| {
            s.cond.as_slice().len() == 20 && (0..d.grid.f).all(|f| s.seq.feature(f).len() == 12288)
        });
    Ok((
        shapes && feature == 12288 && cond == 20 && elapsed < Duration::from_secs(300),
        format!(
            "{} samples, feature {feature}, conditioning {cond}, generated in {:.1} s",
            d.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [Criterion; 8] = [
        (
            1,
            "gradient integrity",
            Duration::from_secs(60),
            criterion_1,
        ),
        (2, "flow log-det oracle", Duration::MAX, criterion_2),
        (3, "KL oracles", Duration::MAX, criterion_3),
        (4, "channel statistics", Duration::MAX, criterion_4),
        (
            5,
            "baseline analytic anchors",
            Duration::from_secs(300),
            criterion_5,
        ),
        (
            6,
            "desk-scale training outcome",
            Duration::from_secs(900),
            criterion_6,
        ),
        (7, "determinism", Duration::MAX, criterion_7),
        (8, "full-scale dataset shape", Duration::MAX, criterion_8),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (passed, detail) = match outcome {
            Ok((ok, detail)) => (ok && elapsed < budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let budget_note = if budget == Duration::MAX {
            String::new()
        } else {
            format!(", budget {} s", budget.as_secs())
        };
        println!(
            "{} {id} {name} [{:.1} s{budget_note}]: {detail}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !passed {
            failed += 1;
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
