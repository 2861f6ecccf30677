//! Subcommand bodies. Each returns after writing its outputs; errors carry
//! the exit code.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{RunConfig, SeedSource};
use super::selfcheck;
use crate::baseline::{
    load_recurrent, save_recurrent, train_recurrent, RecurrentPairs, RecurrentParams,
};
use crate::channel::{
    build_dataset, read_dataset, split_dataset, verify_dataset_file, write_dataset, Dataset,
};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, evaluate, nmse_parts, observed_frame, sample_rng, sha256_file, sweep_doppler,
    sweep_horizon, EvalReport, Predictor, SweepAxis,
};
use crate::model::{load_model, save_model, train, Cvae, TrainPairs};
use crate::tensor::Fault;

/// Predictor names accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PredictorKind {
    Cvae,
    Stale,
    Ar1,
    Recurrent,
    Zero,
}

/// Models loaded for evaluation, with the checksums of their files.
#[derive(Default)]
pub struct LoadedModels {
    pub cvae: Option<Cvae>,
    pub recurrent: Option<RecurrentParams>,
    pub checksums: std::collections::BTreeMap<String, String>,
}

impl LoadedModels {
    /// Loads whatever `kinds` needs. Without explicit kinds, every closed-form
    /// predictor runs plus each learned one whose checkpoint exists.
    pub fn load(
        kinds: &[PredictorKind],
        cvae_path: &Path,
        recurrent_path: &Path,
    ) -> Result<(Self, Vec<PredictorKind>)> {
        let kinds = if kinds.is_empty() {
            let mut k = vec![
                PredictorKind::Zero,
                PredictorKind::Stale,
                PredictorKind::Ar1,
            ];
            if cvae_path.exists() {
                k.push(PredictorKind::Cvae);
            }
            if recurrent_path.exists() {
                k.push(PredictorKind::Recurrent);
            }
            k
        } else {
            let mut k = kinds.to_vec();
            k.dedup();
            k
        };
        let mut out = Self::default();
        if kinds.contains(&PredictorKind::Cvae) {
            out.cvae = Some(load_model(cvae_path)?.0);
            out.checksums
                .insert("cvae4cp".into(), sha256_file(cvae_path)?);
        }
        if kinds.contains(&PredictorKind::Recurrent) {
            out.recurrent = Some(load_recurrent(recurrent_path)?.0);
            out.checksums.insert(
                crate::baseline::RECURRENT_ARCH_TAG.into(),
                sha256_file(recurrent_path)?,
            );
        }
        Ok((out, kinds))
    }

    pub fn predictors(&self, kinds: &[PredictorKind], draws: usize) -> Vec<Predictor<'_>> {
        kinds
            .iter()
            .map(|k| match k {
                PredictorKind::Zero => Predictor::Zero,
                PredictorKind::Stale => Predictor::Stale,
                PredictorKind::Ar1 => Predictor::Ar1,
                PredictorKind::Cvae => Predictor::Cvae {
                    model: self.cvae.as_ref().expect("loaded"),
                    draws,
                },
                PredictorKind::Recurrent => {
                    Predictor::Recurrent(self.recurrent.as_ref().expect("loaded"))
                }
            })
            .collect()
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a dataset generated with the configured grid.
fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let d = read_dataset(path)?;
    if d.grid != cfg.grid() {
        return Err(Error::Usage(format!(
            "{} holds a {}x{}x{} grid with {} frames, the configuration expects {}x{}x{} with {}",
            path.display(),
            d.grid.m,
            d.grid.n,
            d.grid.l,
            d.grid.f,
            cfg.grid.m,
            cfg.grid.n,
            cfg.grid.l,
            cfg.grid.f
        )));
    }
    Ok(d)
}

fn test_split(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let d = load_dataset(cfg, path)?;
    Ok(split_dataset(d, cfg.data.split, cfg.data.base_seed)?.1)
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path, source: SeedSource) -> Result<()> {
    let d = build_dataset(
        &cfg.grid(),
        cfg.data.count,
        cfg.data.base_seed,
        &cfg.generation(),
    )?;
    write_dataset(out, &d)?;
    verify_dataset_file(out, &d)?;
    println!(
        "wrote {} samples ({}x{}x{}, {} frames) to {}, seed {} from {}",
        d.len(),
        d.grid.m,
        d.grid.n,
        d.grid.l,
        d.grid.f,
        out.display(),
        d.base_seed,
        source
    );
    Ok(())
}

fn training_meta(
    cfg: &RunConfig,
    data: &Path,
    source: SeedSource,
    completed: usize,
    status: &str,
) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "seed": cfg.train.seed,
        "seed_source": source,
        "data_seed": cfg.data.base_seed,
        "data_sha256": sha256_file(data)?,
        "split": cfg.data.split,
        "epochs": cfg.train.epochs,
        "epochs_completed": completed,
        "batch": cfg.train.batch,
        "lr": cfg.train.lr,
        "beta_warmup_epochs": cfg.model.beta_warmup_epochs,
        "status": status,
    }))
}

/// Trains the CVAE (or the recurrent baseline) on the training split and
/// writes the checkpoint plus `<out>.log.csv`. A numeric failure still
/// writes the last good parameters before exiting.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    kind: PredictorKind,
    source: SeedSource,
) -> Result<()> {
    let d = load_dataset(cfg, data)?;
    let (train_set, _) = split_dataset(d, cfg.data.split, cfg.data.base_seed)?;
    let tc = cfg.train_config();
    let log_path = with_suffix(out, ".log.csv");
    match kind {
        PredictorKind::Cvae => {
            let mut model = Cvae::new(cfg.model_config(), tc.seed)?;
            let pairs = TrainPairs::from_dataset(&train_set);
            let result = train(&mut model, &pairs, &tc, |e| {
                println!(
                    "epoch {}/{} loss {:.6} elbo {:.6} kl {:.6}",
                    e.epoch, tc.epochs, e.loss, e.elbo, e.kl_term
                )
            });
            let (log, abort) = match result {
                Ok(log) => (log, None),
                Err(a) => (a.log, Some(a.error)),
            };
            let status = if abort.is_some() {
                "aborted"
            } else {
                "complete"
            };
            save_model(
                out,
                &model,
                training_meta(cfg, data, source, log.len(), status)?,
            )?;
            let mut text = String::from("epoch,beta,loss,recon_loglik,kl_term,elbo\n");
            for e in &log {
                text.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    e.epoch, e.beta, e.loss, e.recon_loglik, e.kl_term, e.elbo
                ));
            }
            write_text(&log_path, &text)?;
            if let Some(err) = abort {
                return Err(err);
            }
        }
        PredictorKind::Recurrent => {
            let mut model = RecurrentParams::new(cfg.recurrent_config(), tc.seed)?;
            let pairs = RecurrentPairs::from_dataset(&train_set);
            let result = train_recurrent(&mut model, &pairs, &tc, |e| {
                println!("epoch {}/{} loss {:.6}", e.epoch, tc.epochs, e.loss)
            });
            let (log, abort) = match result {
                Ok(log) => (log, None),
                Err(a) => (a.log, Some(a.error)),
            };
            let status = if abort.is_some() {
                "aborted"
            } else {
                "complete"
            };
            save_recurrent(
                out,
                &model,
                training_meta(cfg, data, source, log.len(), status)?,
            )?;
            let mut text = String::from("epoch,loss\n");
            for e in &log {
                text.push_str(&format!("{},{}\n", e.epoch, e.loss));
            }
            write_text(&log_path, &text)?;
            if let Some(err) = abort {
                return Err(err);
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "{other:?} has nothing to train; choose cvae or recurrent"
            )))
        }
    }
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

/// Per-sample predictions on the test split: `<out>` holds
/// `index,predictor,delta,nmse,stale_nmse` rows and `<out>.f32` the predicted
/// features as little-endian `f32`, one row per CSV line.
pub fn cmd_predict(
    cfg: &RunConfig,
    data: &Path,
    models: &LoadedModels,
    kind: PredictorKind,
    delta: usize,
    out: &Path,
) -> Result<()> {
    let test = test_split(cfg, data)?;
    let t = observed_frame(test.grid.f, delta)?;
    let pred = models.predictors(&[kind], cfg.model.draws)[0];
    let seed = cfg.data.base_seed;
    let rows = test
        .samples
        .par_iter()
        .map(|s| {
            let h_hat = pred.predict(s, t, delta, &mut sample_rng(seed, s.index))?;
            let target = s.seq.feature(t + delta);
            let (err, pow) = nmse_parts(&target, &h_hat)?;
            let (stale_err, _) = nmse_parts(&target, &s.seq.feature(t))?;
            Ok((s.index, h_hat, err / pow, stale_err / pow))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("index,predictor,delta,nmse,stale_nmse\n");
    let bin_path = with_suffix(out, ".f32");
    let file = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut bin = BufWriter::new(file);
    for (index, h_hat, nmse, stale) in &rows {
        csv.push_str(&format!("{index},{},{delta},{nmse},{stale}\n", pred.name()));
        for v in h_hat {
            bin.write_all(&(*v as f32).to_le_bytes())
                .map_err(|e| Error::io(&bin_path, e))?;
        }
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    write_text(out, &csv)?;
    println!(
        "wrote {} predictions at horizon {delta} to {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

/// Every selected predictor on the test split at one horizon.
pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    models: &LoadedModels,
    kinds: &[PredictorKind],
    delta: usize,
    out: &Path,
    source: SeedSource,
) -> Result<()> {
    let test = test_split(cfg, data)?;
    let mut report = EvalReport::new(SweepAxis::None, test.grid, cfg.data.base_seed);
    for p in models.predictors(kinds, cfg.model.draws) {
        report
            .rows
            .push(evaluate(&p, &test, delta, cfg.data.base_seed)?);
    }
    report.models = models.checksums.clone();
    report.notes = serde_json::json!({
        "delta": delta,
        "seed_source": source,
        "data_sha256": sha256_file(data)?,
        "test_samples": test.len(),
    });
    emit_report(&report, out)?;
    print_rows(&report);
    Ok(())
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    models: &LoadedModels,
    kinds: &[PredictorKind],
    out: &Path,
    source: SeedSource,
) -> Result<()> {
    let sc = cfg.sweep_config();
    let preds = models.predictors(kinds, cfg.model.draws);
    let mut report = match axis {
        SweepAxis::DopplerHz => sweep_doppler(&sc, &preds)?,
        SweepAxis::HorizonFrames => sweep_horizon(&sc, &preds)?,
        SweepAxis::None => {
            return Err(Error::Usage("sweep axis must be doppler or horizon".into()))
        }
    };
    report.models = models.checksums.clone();
    report.notes["seed_source"] = serde_json::to_value(source).expect("plain enum");
    emit_report(&report, out)?;
    print_rows(&report);
    Ok(())
}

fn print_rows(report: &EvalReport) {
    for r in &report.rows {
        println!(
            "{:>10} {:<22} nmse {:.4e} ± {:.1e} (n = {})",
            r.axis, r.predictor, r.nmse_mean, r.nmse_stderr, r.n
        );
    }
}

/// Runs the built-in checks, one line each; numeric failure if any fails.
pub fn cmd_selfcheck(fault: Option<Fault>) -> Result<()> {
    let results = selfcheck::run_all(fault)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} self-checks failed")));
    }
    Ok(())
}
