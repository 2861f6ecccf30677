use std::f64::consts::PI;

use super::Cvae;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` summed over dimensions.
pub fn kl_gauss(mu_q: &[f64], ls_q: &[f64], mu_p: &[f64], ls_p: &[f64]) -> f64 {
    debug_assert!(mu_q.len() == ls_q.len() && mu_q.len() == mu_p.len() && mu_p.len() == ls_p.len());
    mu_q.iter()
        .zip(ls_q)
        .zip(mu_p.iter().zip(ls_p))
        .map(|((&mq, &lq), (&mp, &lp))| {
            let d = mq - mp;
            lp - lq + ((2.0 * lq).exp() + d * d) / (2.0 * (2.0 * lp).exp()) - 0.5
        })
        .sum()
}

/// Per-row ELBO terms on a tape, each `rows x 1`.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub recon: Var,
    pub kl: Var,
}

impl ElboVars {
    /// `-mean(recon - beta * kl)`.
    pub fn loss(&self, t: &mut Tape<'_>, beta: f64) -> Result<Var> {
        let kl = t.scale(self.kl, beta)?;
        let per_row = t.sub(self.recon, kl)?;
        let mean = t.mean_all(per_row)?;
        t.scale(mean, -1.0)
    }

    pub fn parts(&self, t: &Tape<'_>) -> ElboParts {
        let mean = |v: Var| {
            let d = t.value(v).data();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let (recon_loglik, kl_term) = (mean(self.recon), mean(self.kl));
        ElboParts {
            recon_loglik,
            kl_term,
            elbo: recon_loglik - kl_term,
        }
    }
}

/// Batch-mean ELBO terms in nats.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ElboParts {
    pub recon_loglik: f64,
    pub kl_term: f64,
    pub elbo: f64,
}

impl Cvae {
    /// Records the ELBO for rows of `x`, `c` with posterior noise `eps`.
    ///
    /// The likelihood is a unit-variance Gaussian over the `2D` real entries.
    /// With flows the KL term is the single-sample estimate
    /// `log q(z0) - sum logdet - log p(zK | c)`; without flows it is the
    /// closed form.
    pub fn elbo_vars(&self, t: &mut Tape<'_>, x: Var, c: Var, eps: &Tensor) -> Result<ElboVars> {
        let rows = t.value(x).rows();
        if eps.shape() != [rows, self.cfg.latent] {
            return Err(Error::Structural(format!(
                "noise has shape {:?}, expected [{rows}, {}]",
                eps.shape(),
                self.cfg.latent
            )));
        }
        let (mu_q, ls_q) = self.encode(t, x, c)?;
        let (mu_p, ls_p) = self.prior(t, c)?;
        let (z0, log_q0) = self.reparameterize(t, mu_q, ls_q, eps)?;
        let flow = self.apply_flows(t, z0, c)?;

        let x_hat = self.decode(t, flow.zk, c)?;
        let diff = t.sub(x, x_hat)?;
        let sq = t.square(diff)?;
        let sse = t.sum_cols(sq)?;
        let recon = t.scale(sse, -0.5)?;
        let n = self.cfg.feature_len() as f64;
        let recon = t.add_scalar(recon, -0.5 * n * (2.0 * PI).ln())?;

        let kl = match flow.sum_logdet {
            Some(logdet) => {
                let log_p = self.log_prior_density(t, flow.zk, mu_p, ls_p)?;
                let a = t.sub(log_q0, logdet)?;
                t.sub(a, log_p)?
            }
            None => self.kl_closed_form(t, mu_q, ls_q, mu_p, ls_p)?,
        };
        Ok(ElboVars { recon, kl })
    }

    /// `sum_d [-((z - mu)/sigma)^2 / 2 - log sigma - ln(2 pi)/2]` per row.
    fn log_prior_density(&self, t: &mut Tape<'_>, z: Var, mu: Var, ls: Var) -> Result<Var> {
        let d = t.sub(z, mu)?;
        let neg = t.scale(ls, -1.0)?;
        let inv_sigma = t.exp(neg)?;
        let s = t.mul(d, inv_sigma)?;
        let s2 = t.square(s)?;
        let quad = t.sum_cols(s2)?;
        let quad = t.scale(quad, -0.5)?;
        let lsum = t.sum_cols(ls)?;
        let out = t.sub(quad, lsum)?;
        t.add_scalar(out, -0.5 * self.cfg.latent as f64 * (2.0 * PI).ln())
    }

    fn kl_closed_form(&self, t: &mut Tape<'_>, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
        let a = t.sub(lp, lq)?;
        let two_lq = t.scale(lq, 2.0)?;
        let var_q = t.exp(two_lq)?;
        let d = t.sub(mq, mp)?;
        let d2 = t.square(d)?;
        let num = t.add(var_q, d2)?;
        let m2lp = t.scale(lp, -2.0)?;
        let inv_var_p = t.exp(m2lp)?;
        let frac = t.mul(num, inv_var_p)?;
        let frac = t.scale(frac, 0.5)?;
        let per_dim = t.add(a, frac)?;
        let per_dim = t.add_scalar(per_dim, -0.5)?;
        t.sum_cols(per_dim)
    }

    /// Batch-mean ELBO without gradients.
    pub fn elbo(&self, x: &Tensor, c: &Tensor, eps: &Tensor) -> Result<ElboParts> {
        let mut t = Tape::with_params(&self.params);
        let xv = t.input(x.clone());
        let cv = t.input(c.clone());
        let vars = self.elbo_vars(&mut t, xv, cv, eps)?;
        Ok(vars.parts(&t))
    }
}
