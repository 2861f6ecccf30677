use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::Rng;

use super::{GridConfig, ScenarioParams};
use crate::error::{Error, Result};

pub const SINUSOIDS_PER_TAP: usize = 32;

/// `p_l ∝ exp(-l / decay)`, normalised to unit sum.
pub fn power_delay_profile(l: usize, decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..l).map(|k| (-(k as f64) / decay).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// One sum-of-sinusoids Jakes tap,
/// `h(t) = sqrt(p / Ns) * sum_n exp(j (2 pi f_D cos(alpha_n) t + phi_n))`.
#[derive(Clone, Debug)]
pub struct SosProcess {
    amp: f64,
    omega: Vec<f64>,
    phase: Vec<f64>,
}

impl SosProcess {
    /// Draws `Ns` arrival angles and phases uniformly on `[0, 2 pi)`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, doppler_hz: f64, power: f64) -> Self {
        let mut omega = Vec::with_capacity(SINUSOIDS_PER_TAP);
        let mut phase = Vec::with_capacity(SINUSOIDS_PER_TAP);
        for _ in 0..SINUSOIDS_PER_TAP {
            let alpha = 2.0 * PI * rng.random::<f64>();
            phase.push(2.0 * PI * rng.random::<f64>());
            omega.push(2.0 * PI * doppler_hz * alpha.cos());
        }
        Self {
            amp: (power / SINUSOIDS_PER_TAP as f64).sqrt(),
            omega,
            phase,
        }
    }

    pub fn at(&self, t: f64) -> Complex64 {
        let s: Complex64 = self
            .omega
            .iter()
            .zip(&self.phase)
            .map(|(w, p)| Complex64::from_polar(1.0, w * t + p))
            .sum();
        s * self.amp
    }

    /// Writes `h(t0 + k dt)` for `k = 0..out.len()`.
    ///
    /// Each sinusoid starts from an exactly evaluated phasor and is advanced
    /// by repeated rotation, which stays accurate to ~1e-13 over a frame.
    pub fn fill(&self, t0: f64, dt: f64, scratch: &mut Vec<Complex64>, out: &mut [Complex32]) {
        scratch.clear();
        scratch.resize(out.len(), Complex64::new(0.0, 0.0));
        for (w, p) in self.omega.iter().zip(&self.phase) {
            let mut z = Complex64::from_polar(1.0, w * t0 + p);
            let step = Complex64::from_polar(1.0, w * dt);
            for acc in scratch.iter_mut() {
                *acc += z;
                z *= step;
            }
        }
        for (o, s) in out.iter_mut().zip(scratch.iter()) {
            let v = s * self.amp;
            *o = Complex32::new(v.re as f32, v.im as f32);
        }
    }
}

/// `F` frames of `L` taps by `M x N` complex gains.
///
/// A frame is stored as one vector indexed `l * M * N + i`, where `i` is the
/// within-frame sample index and the `M x N` slab of a tap is its row-major
/// reshape (`i = m * N + n`).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFrameSequence {
    pub grid: GridConfig,
    pub frames: Vec<Vec<Complex32>>,
    pub tap_powers: Vec<f64>,
    pub doppler_hz: f64,
    pub sample_period_s: f64,
}

impl ChannelFrameSequence {
    /// Runs one independent process per tap across `F * M * N` contiguous
    /// samples. `tap_rngs[l]` drives tap `l`.
    pub fn synthesize<R: Rng>(
        grid: &GridConfig,
        doppler_hz: f64,
        sample_period_s: f64,
        tap_powers: &[f64],
        tap_rngs: &mut [R],
    ) -> Result<Self> {
        grid.validate()?;
        if tap_powers.len() != grid.l || tap_rngs.len() != grid.l {
            return Err(Error::Structural(format!(
                "{} taps, {} powers, {} streams",
                grid.l,
                tap_powers.len(),
                tap_rngs.len()
            )));
        }
        let mn = grid.mn();
        let processes: Vec<SosProcess> = tap_rngs
            .iter_mut()
            .zip(tap_powers)
            .map(|(rng, &p)| SosProcess::draw(rng, doppler_hz, p))
            .collect();
        let mut scratch = Vec::with_capacity(mn);
        let mut frames = Vec::with_capacity(grid.f);
        for f in 0..grid.f {
            let mut frame = vec![Complex32::new(0.0, 0.0); grid.d()];
            let t0 = (f * mn) as f64 * sample_period_s;
            for (l, proc) in processes.iter().enumerate() {
                proc.fill(
                    t0,
                    sample_period_s,
                    &mut scratch,
                    &mut frame[l * mn..(l + 1) * mn],
                );
            }
            frames.push(frame);
        }
        Ok(Self {
            grid: *grid,
            frames,
            tap_powers: tap_powers.to_vec(),
            doppler_hz,
            sample_period_s,
        })
    }

    pub fn frame(&self, f: usize) -> &[Complex32] {
        &self.frames[f]
    }

    /// The `M * N` samples of tap `l` in frame `f`.
    pub fn tap(&self, f: usize, l: usize) -> &[Complex32] {
        let mn = self.grid.mn();
        &self.frames[f][l * mn..(l + 1) * mn]
    }

    /// Gain at delay bin `m`, Doppler bin `n` of tap `l` in frame `f`.
    pub fn at(&self, f: usize, l: usize, m: usize, n: usize) -> Complex32 {
        self.tap(f, l)[m * self.grid.n + n]
    }

    /// Real feature of frame `f`.
    pub fn feature(&self, f: usize) -> Vec<f64> {
        flatten_frame(&self.frames[f])
    }

    /// `M * N * T_s`.
    pub fn frame_duration_s(&self) -> f64 {
        self.grid.mn() as f64 * self.sample_period_s
    }
}

/// Draws the taps of one scenario: Doppler from speed and carrier,
/// `T_s = 1 / bandwidth`, exponential power delay profile.
pub fn generate_frame_sequence<R: Rng>(
    p: &ScenarioParams,
    grid: &GridConfig,
    pdp_decay: f64,
    tap_rngs: &mut [R],
) -> Result<ChannelFrameSequence> {
    p.validate()?;
    let powers = power_delay_profile(grid.l, pdp_decay);
    ChannelFrameSequence::synthesize(grid, p.doppler_hz(), p.sample_period_s(), &powers, tap_rngs)
}

fn flatten_frame(frame: &[Complex32]) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 * frame.len());
    x.extend(frame.iter().map(|c| f64::from(c.re)));
    x.extend(frame.iter().map(|c| f64::from(c.im)));
    x
}

/// Real parts of all `D` gains followed by their imaginary parts.
pub fn flatten_channel(frame: &[Complex32], grid: &GridConfig) -> Result<Vec<f64>> {
    if frame.len() != grid.d() {
        return Err(Error::Structural(format!(
            "frame has {} gains, grid needs {}",
            frame.len(),
            grid.d()
        )));
    }
    Ok(flatten_frame(frame))
}

/// Inverse of [`flatten_channel`]; exact on values of `f32` precision.
pub fn unflatten_channel(x: &[f64], grid: &GridConfig) -> Result<Vec<Complex32>> {
    let d = grid.d();
    if x.len() != 2 * d {
        return Err(Error::Structural(format!(
            "feature has {} entries, grid needs {}",
            x.len(),
            2 * d
        )));
    }
    Ok((0..d)
        .map(|k| Complex32::new(x[k] as f32, x[d + k] as f32))
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::special::{ks_test, rayleigh_cdf};

    fn rngs(l: usize, seed: u64) -> Vec<ChaCha8Rng> {
        (0..l)
            .map(|k| ChaCha8Rng::seed_from_u64(seed * 1000 + k as u64))
            .collect()
    }

    /// Power series for J0 with 40 terms.
    fn j0_series(x: f64) -> f64 {
        let q = x * x / 4.0;
        let (mut term, mut s) = (1.0, 1.0);
        for k in 1..40 {
            term *= -q / (k * k) as f64;
            s += term;
        }
        s
    }

    #[test]
    fn pdp_examples() {
        assert_eq!(power_delay_profile(1, 0.7), vec![1.0]);
        let p = power_delay_profile(2, 1.0);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        for l in 1..12 {
            let s: f64 = power_delay_profile(l, 1.5).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_doppler_freezes_the_channel() {
        let g = GridConfig::DESK;
        let powers = power_delay_profile(g.l, 1.5);
        let seq =
            ChannelFrameSequence::synthesize(&g, 0.0, 1e-7, &powers, &mut rngs(g.l, 1)).unwrap();
        for f in 1..g.f {
            assert_eq!(seq.frame(f), seq.frame(0));
        }
        let t = seq.tap(0, 0);
        assert!(t.iter().all(|c| *c == t[0]));
    }

    #[test]
    fn frames_continue_one_process() {
        let g = GridConfig::DESK;
        let ts = 1.0 / 10e6;
        let mut r = rngs(g.l, 3);
        let seq = ChannelFrameSequence::synthesize(&g, 3000.0, ts, &[0.4, 0.3, 0.2, 0.1], &mut r)
            .unwrap();
        let mut r = rngs(g.l, 3);
        let procs: Vec<SosProcess> = r
            .iter_mut()
            .zip([0.4, 0.3, 0.2, 0.1])
            .map(|(rng, p)| SosProcess::draw(rng, 3000.0, p))
            .collect();
        for f in [0, 1, 5, 10] {
            for i in [0, 17, 63] {
                let want = procs[2].at((f * 64 + i) as f64 * ts);
                let got = seq.tap(f, 2)[i];
                assert!((f64::from(got.re) - want.re).abs() < 1e-6);
                assert!((f64::from(got.im) - want.im).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn autocorrelation_follows_j0() {
        // 2000 unit-power taps observed over 4 frames of 64 samples.
        let g = GridConfig {
            m: 8,
            n: 8,
            l: 1,
            f: 4,
            e_dim: 20,
        };
        let fd = 500.0;
        let ts = 1.0 / 5e6;
        let tau_frame = 64.0 * ts;
        let taps = 2000;
        let seqs: Vec<ChannelFrameSequence> = (0..taps)
            .map(|k| {
                let mut r = vec![ChaCha8Rng::seed_from_u64(10_000 + k)];
                ChannelFrameSequence::synthesize(&g, fd, ts, &[1.0], &mut r).unwrap()
            })
            .collect();
        let n_total = g.f * 64;
        // lags up to one frame, and f_D * tau up to 1 through a faster tap set below
        for lag in [0usize, 16, 32, 64] {
            let mut acc = 0.0;
            let mut count = 0usize;
            for s in &seqs {
                let all: Vec<Complex32> = s.frames.concat();
                for t in 0..n_total - lag {
                    acc += f64::from((all[t] * all[t + lag].conj()).re);
                    count += 1;
                }
            }
            let emp = acc / count as f64;
            let want = j0_series(2.0 * PI * fd * lag as f64 * ts);
            assert!((emp - want).abs() < 0.05, "lag {lag}: {emp} vs {want}");
        }
        assert!(fd * tau_frame <= 1.0);
    }

    #[test]
    fn autocorrelation_up_to_unit_doppler_lag() {
        let fd = 5000.0;
        let taps = 2000;
        let lags: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1 / fd).collect();
        let mut acc = vec![0.0; lags.len()];
        for k in 0..taps {
            let mut rng = ChaCha8Rng::seed_from_u64(77_000 + k);
            let p = SosProcess::draw(&mut rng, fd, 1.0);
            // average over a few time origins per tap
            for origin in 0..8 {
                let t0 = origin as f64 * 1.37e-3;
                let h0 = p.at(t0);
                for (a, lag) in acc.iter_mut().zip(&lags) {
                    *a += (h0 * p.at(t0 + lag).conj()).re;
                }
            }
        }
        for (a, lag) in acc.iter().zip(&lags) {
            let emp = a / (taps * 8) as f64;
            let want = j0_series(2.0 * PI * fd * lag);
            assert!(
                (emp - want).abs() < 0.05,
                "fd*tau {}: {emp} vs {want}",
                fd * lag
            );
        }
    }

    #[test]
    fn envelope_is_rayleigh() {
        let env: Vec<f64> = (0..10_000u64)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(k);
                SosProcess::draw(&mut rng, 1000.0, 1.0).at(1e-3).norm()
            })
            .collect();
        let ks = ks_test(&env, rayleigh_cdf);
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn flatten_examples() {
        let g = GridConfig {
            m: 1,
            n: 1,
            l: 1,
            f: 2,
            e_dim: 20,
        };
        assert_eq!(
            flatten_channel(&[Complex32::new(3.0, 4.0)], &g).unwrap(),
            vec![3.0, 4.0]
        );
        let z = vec![Complex32::new(0.0, 0.0); GridConfig::DESK.d()];
        let x = flatten_channel(&z, &GridConfig::DESK).unwrap();
        assert_eq!(x.len(), 512);
        assert!(x.iter().all(|&v| v == 0.0));
        assert!(flatten_channel(&z[1..], &GridConfig::DESK).is_err());
        assert!(unflatten_channel(&x[1..], &GridConfig::DESK).is_err());
    }

    proptest! {
        #[test]
        fn flatten_is_a_bijection(vals in proptest::collection::vec(any::<(f32, f32)>(), 256)) {
            let g = GridConfig::DESK;
            let frame: Vec<Complex32> = vals
                .iter()
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|&(a, b)| Complex32::new(a, b))
                .cycle()
                .take(g.d())
                .collect();
            prop_assume!(frame.len() == g.d());
            let x = flatten_channel(&frame, &g).unwrap();
            let back = unflatten_channel(&x, &g).unwrap();
            prop_assert!(back.iter().zip(&frame).all(|(a, b)| a.re.to_bits() == b.re.to_bits()
                && a.im.to_bits() == b.im.to_bits()));
        }
    }
}
