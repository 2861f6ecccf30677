//! Central finite-difference gradient checking.

use super::{ParameterSet, Tape, Var};
use crate::error::Result;

/// Finite-difference settings. The defaults are step `1e-4`, relative
/// tolerance `1e-4`, and an absolute floor of `1e-6` below which a
/// discrepancy is accepted regardless of scale.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

/// Worst disagreement found by [`check_parameters`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// Parameter name, flat index, analytic and numeric value at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Relative error of one entry, zero when the absolute difference is under the floor.
pub fn entry_error(analytic: f64, numeric: f64, cfg: &GradCheckConfig) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= cfg.abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Compares the tape gradient of a scalar function of `params` against
/// central differences, entry by entry.
///
/// `build` must record the same computation every time it is called.
pub fn check_parameters<F>(
    params: &ParameterSet,
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(params);
        let root = build(&mut tape)?;
        tape.backward(root)?.param_grads(params)
    };
    check_against(params, &analytic, build, cfg)
}

/// Like [`check_parameters`] but with caller-supplied analytic gradients,
/// so a deliberately corrupted backward pass can be checked.
pub fn check_against<F>(
    params: &ParameterSet,
    analytic: &[super::Tensor],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::with_params(p);
        let root = build(&mut tape)?;
        Ok(tape.value(root).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for id in params.ids() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + cfg.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - cfg.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[id.index()].data()[j];
            let err = entry_error(a, numeric, cfg);
            report.checked += 1;
            if err >= cfg.rel_tol {
                report.failures += 1;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.name(id).to_string(), j, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Fault, Tensor};

    /// tanh(x W1 + b1) W2 + b2 with a squared-error head, 16 inputs.
    fn two_layer() -> (ParameterSet, impl Fn(&mut Tape<'_>) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParameterSet::new();
        let w1 = p.insert_uniform("w1", 16, 8, 16, &mut rng).unwrap();
        let b1 = p.insert_uniform("b1", 1, 8, 16, &mut rng).unwrap();
        let w2 = p.insert_uniform("w2", 8, 3, 8, &mut rng).unwrap();
        let b2 = p.insert_uniform("b2", 1, 3, 8, &mut rng).unwrap();
        let x: Vec<f64> = (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let x = Tensor::from_vec(2, 16, x).unwrap();
        let y = Tensor::from_vec(2, 3, vec![0.1, -0.4, 0.9, 0.3, 0.0, -0.2]).unwrap();
        let build = move |t: &mut Tape<'_>| -> Result<Var> {
            let xv = t.input(x.clone());
            let yv = t.input(y.clone());
            let (w1, b1, w2, b2) = (t.param(w1)?, t.param(b1)?, t.param(w2)?, t.param(b2)?);
            let h = t.matmul(xv, w1)?;
            let h = t.add(h, b1)?;
            let h = t.tanh(h)?;
            let o = t.matmul(h, w2)?;
            let o = t.add(o, b2)?;
            let d = t.sub(o, yv)?;
            t.sum_squares(d)
        };
        (p, build)
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let (p, build) = two_layer();
        let r = check_parameters(&p, build, &GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 16 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn broken_tanh_derivative_is_caught() {
        let (p, build) = two_layer();
        let analytic = {
            let mut tape = Tape::with_params(&p);
            tape.inject_fault(Fault::TanhDerivative);
            let root = build(&mut tape).unwrap();
            tape.backward(root).unwrap().param_grads(&p)
        };
        let r = check_against(&p, &analytic, build, &GradCheckConfig::default()).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn every_primitive_differentiates_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParameterSet::new();
        let a = p.insert_uniform("a", 3, 4, 1, &mut rng).unwrap();
        let b = p.insert_uniform("b", 3, 4, 1, &mut rng).unwrap();
        let col = p.insert_uniform("col", 3, 1, 1, &mut rng).unwrap();
        let bank = p.insert_uniform("bank", 2 * 4, 5, 1, &mut rng).unwrap();
        let gates = Tensor::from_vec(3, 2, vec![0.3, 0.7, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let build = move |t: &mut Tape<'_>| -> Result<Var> {
            let (a, b, col, bank) = (t.param(a)?, t.param(b)?, t.param(col)?, t.param(bank)?);
            let s = t.softplus(a)?;
            let l = t.ln(s)?;
            let e = t.exp(b)?;
            let r = t.recip(e)?;
            let m = t.mul(l, r)?;
            let mc = t.mul(m, col)?;
            let c = t.clamp(b, -0.3, 0.3)?;
            let cat = t.concat(mc, c)?;
            let sl = t.slice_cols(cat, 2, 6)?;
            let sq = t.square(sl)?;
            let sc = t.sum_cols(sq)?;
            let rs = t.reshape(sc, 1, 3)?;
            let bm = t.banked_matmul(a, bank, gates.clone())?;
            let th = t.tanh(bm)?;
            let x = t.sum_all(th)?;
            let y = t.sum_all(rs)?;
            let z = t.add_scalar(x, 0.25)?;
            let w = t.mul(z, y)?;
            let d = t.sub(w, y)?;
            t.scale(d, 1.7)
        };
        let r = check_parameters(&p, build, &GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn entry_error_uses_absolute_floor() {
        let cfg = GradCheckConfig::default();
        assert_eq!(entry_error(1e-9, 5e-7, &cfg), 0.0);
        assert!(entry_error(1.0, 1.1, &cfg) > 0.09);
    }
}
