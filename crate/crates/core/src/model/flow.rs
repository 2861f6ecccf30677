//! Conditional planar flows.
//!
//! Block `k` maps `z -> z + u_hat * tanh(w.z + b)`, where `(u, w, b)` are an
//! affine function of `c`. The correction
//! `u_hat = u + (m(w.u) - w.u) w / |w|^2` with `m(a) = softplus(a) - ln 2`
//! keeps `w.u_hat > -ln 2`, so `1 + u_hat.psi` stays positive and `u = 0`
//! is the identity.

use std::f64::consts::LN_2;

use super::Cvae;
use crate::error::Result;
use crate::tensor::{Tape, Var};

pub struct FlowOutput {
    pub zk: Var,
    /// `sum_k ln(1 + u_hat_k . psi_k)` per row, `None` when `K = 0`.
    pub sum_logdet: Option<Var>,
    /// The argument `1 + u_hat_k . psi_k` of every block, each `rows x 1`.
    pub det_args: Vec<Var>,
}

impl Cvae {
    pub fn apply_flows(&self, t: &mut Tape<'_>, z0: Var, c: Var) -> Result<FlowOutput> {
        let Some((fw, fb)) = self.flow else {
            return Ok(FlowOutput {
                zk: z0,
                sum_logdet: None,
                det_args: Vec::new(),
            });
        };
        let zd = self.cfg.latent;
        let (fw, fb) = (t.param(fw)?, t.param(fb)?);
        let p = t.matmul(c, fw)?;
        let p = t.add(p, fb)?;

        let mut z = z0;
        let mut total: Option<Var> = None;
        let mut det_args = Vec::with_capacity(self.cfg.flows);
        for k in 0..self.cfg.flows {
            let base = k * (2 * zd + 1);
            let u = t.slice_cols(p, base, base + zd)?;
            let w = t.slice_cols(p, base + zd, base + 2 * zd)?;
            let b = t.slice_cols(p, base + 2 * zd, base + 2 * zd + 1)?;

            let wu = t.mul(w, u)?;
            let wu = t.sum_cols(wu)?;
            let m = t.softplus(wu)?;
            let m = t.add_scalar(m, -LN_2)?;
            let gap = t.sub(m, wu)?;
            let ww = t.mul(w, w)?;
            let ww = t.sum_cols(ww)?;
            let ww = t.add_scalar(ww, 1e-12)?;
            let inv = t.recip(ww)?;
            let coef = t.mul(gap, inv)?;
            let shift = t.mul(w, coef)?;
            let u_hat = t.add(u, shift)?;

            let wz = t.mul(w, z)?;
            let wz = t.sum_cols(wz)?;
            let a = t.add(wz, b)?;
            let h = t.tanh(a)?;
            let step = t.mul(u_hat, h)?;
            z = t.add(z, step)?;

            // u_hat . psi = (1 - tanh^2) (w . u_hat)
            let h2 = t.square(h)?;
            let slope = t.scale(h2, -1.0)?;
            let slope = t.add_scalar(slope, 1.0)?;
            let wuh = t.mul(w, u_hat)?;
            let wuh = t.sum_cols(wuh)?;
            let inner = t.mul(slope, wuh)?;
            let arg = t.add_scalar(inner, 1.0)?;
            det_args.push(arg);
            let ld = t.ln(arg)?;
            total = Some(match total {
                Some(s) => t.add(s, ld)?,
                None => ld,
            });
        }
        Ok(FlowOutput {
            zk: z,
            sum_logdet: total,
            det_args,
        })
    }
}
