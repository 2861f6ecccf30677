use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Doppler at the top of the speed and carrier ranges, `60 * 28e9 / c`.
pub const MAX_DOPPLER_HZ: f64 = 60.0 * 28e9 / SPEED_OF_LIGHT;

pub const CARRIERS_HZ: [f64; 3] = [2.6e9, 3.5e9, 28e9];
pub const SCS_HZ: [f64; 3] = [15e3, 30e3, 60e3];
pub const CP_LENGTHS: [u32; 3] = [0, 16, 32];
pub const ANTENNA_COUNTS: [u32; 3] = [1, 2, 4];

/// Length of the conditioning vector.
pub const E_DIM: usize = 20;

/// `f_D = v * f_c / c`.
pub fn derive_doppler(speed: f64, carrier_hz: f64) -> f64 {
    speed * carrier_hz / SPEED_OF_LIGHT
}

/// Physical parameters of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub snr_db: f64,
    /// m/s
    pub speed: f64,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub scs_hz: f64,
    pub cp_len: u32,
    pub n_tx: u32,
    pub n_rx: u32,
    /// Prediction horizon in frames.
    pub horizon: u32,
}

fn range(field: &'static str, value: f64, allowed: &'static str) -> Error {
    Error::Range {
        field,
        value,
        allowed,
    }
}

fn one_of<T: PartialEq + Copy>(v: T, set: &[T; 3]) -> Option<usize> {
    set.iter().position(|&s| s == v)
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=30.0).contains(&self.snr_db) {
            return Err(range("snr_db", self.snr_db, "[0, 30]"));
        }
        if !(1.0..=60.0).contains(&self.speed) {
            return Err(range("speed", self.speed, "[1, 60]"));
        }
        if one_of(self.carrier_hz, &CARRIERS_HZ).is_none() {
            return Err(range("carrier_hz", self.carrier_hz, "{2.6e9, 3.5e9, 28e9}"));
        }
        if !(5e6..=40e6).contains(&self.bandwidth_hz) {
            return Err(range("bandwidth_hz", self.bandwidth_hz, "[5e6, 40e6]"));
        }
        if one_of(self.scs_hz, &SCS_HZ).is_none() {
            return Err(range("scs_hz", self.scs_hz, "{15e3, 30e3, 60e3}"));
        }
        if one_of(self.cp_len, &CP_LENGTHS).is_none() {
            return Err(range("cp_len", self.cp_len.into(), "{0, 16, 32}"));
        }
        if one_of(self.n_tx, &ANTENNA_COUNTS).is_none() {
            return Err(range("n_tx", self.n_tx.into(), "{1, 2, 4}"));
        }
        if one_of(self.n_rx, &ANTENNA_COUNTS).is_none() {
            return Err(range("n_rx", self.n_rx.into(), "{1, 2, 4}"));
        }
        if self.horizon > 10 {
            return Err(range("horizon", self.horizon.into(), "[0, 10]"));
        }
        Ok(())
    }

    pub fn doppler_hz(&self) -> f64 {
        derive_doppler(self.speed, self.carrier_hz)
    }

    /// `1 / bandwidth`.
    pub fn sample_period_s(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }
}

/// Draws every field uniformly over its range or set.
pub fn sample_scenario<R: Rng + ?Sized>(rng: &mut R) -> ScenarioParams {
    let snr_db = 30.0 * rng.random::<f64>();
    let speed = 1.0 + 59.0 * rng.random::<f64>();
    let carrier_hz = CARRIERS_HZ[rng.random_range(0..3)];
    let bandwidth_hz = 5e6 + 35e6 * rng.random::<f64>();
    let scs_hz = SCS_HZ[rng.random_range(0..3)];
    let cp_len = CP_LENGTHS[rng.random_range(0..3)];
    let n_tx = ANTENNA_COUNTS[rng.random_range(0..3)];
    let n_rx = ANTENNA_COUNTS[rng.random_range(0..3)];
    let horizon = rng.random_range(0..=10);
    ScenarioParams {
        snr_db,
        speed,
        carrier_hz,
        bandwidth_hz,
        scs_hz,
        cp_len,
        n_tx,
        n_rx,
        horizon,
    }
}

/// The 20-entry conditioning vector `e`.
///
/// Layout: `snr/30`, `(speed-1)/59`, `(BW_MHz-5)/35`, `f_D/MAX_DOPPLER_HZ`,
/// `horizon/10`, then one-hot groups for carrier, SCS, CP length, `n_tx` and
/// `n_rx`, three entries each, in the order of the constant sets above.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningVector(pub [f64; E_DIM]);

impl ConditioningVector {
    pub fn encode(p: &ScenarioParams) -> Result<Self> {
        p.validate()?;
        let mut e = [0.0; E_DIM];
        e[0] = p.snr_db / 30.0;
        e[1] = (p.speed - 1.0) / 59.0;
        e[2] = (p.bandwidth_hz / 1e6 - 5.0) / 35.0;
        e[3] = p.doppler_hz() / MAX_DOPPLER_HZ;
        e[4] = f64::from(p.horizon) / 10.0;
        // validate() guarantees membership
        e[5 + one_of(p.carrier_hz, &CARRIERS_HZ).unwrap()] = 1.0;
        e[8 + one_of(p.scs_hz, &SCS_HZ).unwrap()] = 1.0;
        e[11 + one_of(p.cp_len, &CP_LENGTHS).unwrap()] = 1.0;
        e[14 + one_of(p.n_tx, &ANTENNA_COUNTS).unwrap()] = 1.0;
        e[17 + one_of(p.n_rx, &ANTENNA_COUNTS).unwrap()] = 1.0;
        Ok(Self(e))
    }

    /// Every entry rounded to `f32`, the precision of the dataset file.
    pub fn quantized(&self) -> Self {
        Self(self.0.map(|v| f64::from(v as f32)))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Inverts the layout. Categorical fields are recovered exactly; the
    /// continuous ones up to the precision of the stored entries.
    pub fn decode(&self) -> Result<ScenarioParams> {
        let e = &self.0;
        if let Some(i) = e.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Structural(format!(
                "conditioning entry {i} = {} outside [0, 1]",
                e[i]
            )));
        }
        let group = |start: usize| -> Result<usize> {
            let g = &e[start..start + 3];
            let ones: Vec<usize> = (0..3).filter(|&k| g[k] == 1.0).collect();
            match (ones.as_slice(), g.iter().sum::<f64>()) {
                ([k], 1.0) => Ok(*k),
                _ => Err(Error::Structural(format!(
                    "conditioning dims {start}..{} are not one-hot",
                    start + 3
                ))),
            }
        };
        let p = ScenarioParams {
            snr_db: 30.0 * e[0],
            speed: 1.0 + 59.0 * e[1],
            bandwidth_hz: (5.0 + 35.0 * e[2]) * 1e6,
            horizon: (10.0 * e[4]).round() as u32,
            carrier_hz: CARRIERS_HZ[group(5)?],
            scs_hz: SCS_HZ[group(8)?],
            cp_len: CP_LENGTHS[group(11)?],
            n_tx: ANTENNA_COUNTS[group(14)?],
            n_rx: ANTENNA_COUNTS[group(17)?],
        };
        Ok(ScenarioParams {
            // f32 rounding can push the endpoints a hair outside the range
            speed: p.speed.clamp(1.0, 60.0),
            snr_db: p.snr_db.clamp(0.0, 30.0),
            bandwidth_hz: p.bandwidth_hz.clamp(5e6, 40e6),
            ..p
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn middle() -> ScenarioParams {
        ScenarioParams {
            snr_db: 15.0,
            speed: 30.5,
            carrier_hz: 3.5e9,
            bandwidth_hz: 22.5e6,
            scs_hz: 30e3,
            cp_len: 16,
            n_tx: 2,
            n_rx: 2,
            horizon: 5,
        }
    }

    #[test]
    fn doppler_examples() {
        assert_eq!(derive_doppler(0.0, 28e9), 0.0);
        // listed to two decimals as 5603.86; direct evaluation gives 5603.8768
        assert!((derive_doppler(60.0, 28e9) - 5603.86).abs() < 0.02);
        assert!((derive_doppler(60.0, 28e9) - 5_603.876_799).abs() < 1e-6);
        assert!((derive_doppler(30.0, 2.6e9) - 260.18).abs() < 0.01);
        assert_eq!(MAX_DOPPLER_HZ, derive_doppler(60.0, 28e9));
    }

    #[test]
    fn encode_middle_scenario() {
        let p = middle();
        let e = ConditioningVector::encode(&p).unwrap().0;
        let fd = 30.5 * 3.5e9 / 299_792_458.0;
        let want_cont = [0.5, 0.5, 0.5, fd / 5603.8636, 0.5];
        for (a, b) in e[..5].iter().zip(want_cont) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let mut onehots = [0.0; 15];
        for g in 0..5 {
            onehots[3 * g + 1] = 1.0;
        }
        assert_eq!(&e[5..], &onehots);
    }

    #[test]
    fn encode_endpoints() {
        let p = ScenarioParams {
            snr_db: 30.0,
            carrier_hz: 2.6e9,
            ..middle()
        };
        let e = ConditioningVector::encode(&p).unwrap().0;
        assert_eq!(e[0], 1.0);
        assert_eq!(&e[5..8], &[1.0, 0.0, 0.0]);
        let top = ScenarioParams {
            speed: 60.0,
            carrier_hz: 28e9,
            ..middle()
        };
        assert_eq!(ConditioningVector::encode(&top).unwrap().0[3], 1.0);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let cases = [
            ScenarioParams {
                snr_db: 31.0,
                ..middle()
            },
            ScenarioParams {
                speed: 0.5,
                ..middle()
            },
            ScenarioParams {
                carrier_hz: 5e9,
                ..middle()
            },
            ScenarioParams {
                bandwidth_hz: 41e6,
                ..middle()
            },
            ScenarioParams {
                scs_hz: 120e3,
                ..middle()
            },
            ScenarioParams {
                cp_len: 8,
                ..middle()
            },
            ScenarioParams {
                n_tx: 3,
                ..middle()
            },
            ScenarioParams {
                n_rx: 8,
                ..middle()
            },
            ScenarioParams {
                horizon: 11,
                ..middle()
            },
        ];
        for p in cases {
            assert!(
                matches!(ConditioningVector::encode(&p), Err(Error::Range { .. })),
                "{p:?}"
            );
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_scenario(&mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_scenario(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut snr = 0.0;
        let mut carriers = [0usize; 3];
        for _ in 0..n {
            let p = sample_scenario(&mut rng);
            p.validate().unwrap();
            snr += p.snr_db;
            carriers[one_of(p.carrier_hz, &CARRIERS_HZ).unwrap()] += 1;
        }
        assert!((snr / n as f64 - 15.0).abs() < 0.5);
        for c in carriers {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.03);
        }
    }

    #[test]
    fn decode_inverts_encode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = sample_scenario(&mut rng);
            let e = ConditioningVector::encode(&p).unwrap();
            let q = e.decode().unwrap();
            assert_eq!(
                (q.carrier_hz, q.scs_hz, q.cp_len, q.n_tx, q.n_rx, q.horizon),
                (p.carrier_hz, p.scs_hz, p.cp_len, p.n_tx, p.n_rx, p.horizon)
            );
            assert!((q.speed - p.speed).abs() < 1e-9);
            let qq = e.quantized().decode().unwrap();
            assert_eq!(qq.carrier_hz, p.carrier_hz);
            assert!((qq.speed - p.speed).abs() < 1e-4);
        }
    }

    #[test]
    fn entries_in_unit_interval_and_groups_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let e = ConditioningVector::encode(&sample_scenario(&mut rng))
                .unwrap()
                .0;
            assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
            for g in 0..5 {
                assert_eq!(e[5 + 3 * g..8 + 3 * g].iter().sum::<f64>(), 1.0);
            }
        }
    }
}
