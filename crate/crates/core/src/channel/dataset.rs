//! Dataset assembly and the DDCP file format.
//!
//! DDCP layout, little-endian: `b"DDCP"`, `u32` version (1), `u32` M, N, L,
//! F, E_dim, `u32` sample count, `u64` base seed; then per sample `f32
//! e[E_dim]` followed by `F` frames of `f32[2 M N L]` (all real parts, then
//! all imaginary parts, complex index `l * M * N + i`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::jakes::{generate_frame_sequence, power_delay_profile, ChannelFrameSequence};
use super::scenario::{sample_scenario, ConditioningVector, ScenarioParams, CARRIERS_HZ, E_DIM};
use super::{sample_stream, GridConfig, SPEED_OF_LIGHT};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DDCP";
const VERSION: u32 = 1;

/// Knobs of the generator that are not part of the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationConfig {
    /// Power delay profile decay in taps.
    pub pdp_decay: f64,
    /// Forces every sample's Doppler through its speed and carrier.
    pub doppler_hz: Option<f64>,
    /// Forces every sample's horizon.
    pub horizon: Option<u32>,
    /// Forces every sample's bandwidth, and with it the frame duration.
    pub bandwidth_hz: Option<f64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            pdp_decay: 1.5,
            doppler_hz: None,
            horizon: None,
            bandwidth_hz: None,
        }
    }
}

/// One sample: scenario, its conditioning vector at file precision, and channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Position in the generated dataset, kept across splits.
    pub index: u64,
    pub params: ScenarioParams,
    pub cond: ConditioningVector,
    pub seq: ChannelFrameSequence,
}

impl Sample {
    pub fn horizon(&self) -> usize {
        self.params.horizon as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridConfig,
    pub base_seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Returns a copy of `p` whose speed and carrier produce `doppler_hz`.
///
/// The 28 GHz carrier is tried first, then 3.5 and 2.6 GHz, taking the first
/// whose required speed lies in `[1, 60]` m/s.
pub fn force_doppler(p: &ScenarioParams, doppler_hz: f64) -> Result<ScenarioParams> {
    for &carrier_hz in CARRIERS_HZ.iter().rev() {
        let speed = doppler_hz * SPEED_OF_LIGHT / carrier_hz;
        if (1.0..=60.0).contains(&speed) {
            return Ok(ScenarioParams {
                speed,
                carrier_hz,
                ..*p
            });
        }
    }
    Err(Error::Range {
        field: "doppler_hz",
        value: doppler_hz,
        allowed: "reachable with speed in [1, 60] m/s at 2.6, 3.5 or 28 GHz",
    })
}

fn generate_sample(
    grid: &GridConfig,
    base_seed: u64,
    index: u64,
    gen: &GenerationConfig,
) -> Result<Sample> {
    let mut params = sample_scenario(&mut sample_stream(base_seed, index, 0));
    if let Some(fd) = gen.doppler_hz {
        params = force_doppler(&params, fd)?;
    }
    if let Some(h) = gen.horizon {
        params.horizon = h;
    }
    if let Some(bw) = gen.bandwidth_hz {
        params.bandwidth_hz = bw;
    }
    let cond = ConditioningVector::encode(&params)?.quantized();
    let mut taps: Vec<ChaCha8Rng> = (0..grid.l as u64)
        .map(|l| sample_stream(base_seed, index, l + 1))
        .collect();
    let seq = generate_frame_sequence(&params, grid, gen.pdp_decay, &mut taps)?;
    Ok(Sample {
        index,
        params,
        cond,
        seq,
    })
}

/// Generates `count` samples in parallel; sample `i` depends only on
/// `(base_seed, i)`, so the result does not depend on the thread count.
pub fn build_dataset(
    grid: &GridConfig,
    count: usize,
    base_seed: u64,
    gen: &GenerationConfig,
) -> Result<Dataset> {
    grid.validate()?;
    if count == 0 {
        return Err(Error::Usage("dataset count must be at least 1".into()));
    }
    if gen.pdp_decay.is_nan() || gen.pdp_decay <= 0.0 {
        return Err(Error::Usage(format!(
            "pdp decay must be positive, got {}",
            gen.pdp_decay
        )));
    }
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(grid, base_seed, i, gen))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        grid: *grid,
        base_seed,
        samples,
    })
}

/// Seeded permutation, then the first `train_count` samples for training.
pub fn split_dataset(d: Dataset, train_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if train_count == 0 || train_count >= d.len() {
        return Err(Error::Usage(format!(
            "train count {train_count} must lie in 1..{}",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Sample>> = d.samples.into_iter().map(Some).collect();
    let mut take =
        |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    let train = take(&order[..train_count]);
    let test = take(&order[train_count..]);
    let mk = |samples| Dataset {
        grid: d.grid,
        base_seed: d.base_seed,
        samples,
    };
    Ok((mk(train), mk(test)))
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let g = &d.grid;
    let body = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [g.m, g.n, g.l, g.f, g.e_dim, d.samples.len()] {
            put_u32(w, v)?;
        }
        w.write_all(&d.base_seed.to_le_bytes())?;
        for s in &d.samples {
            for &v in s.cond.as_slice() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            for frame in &s.seq.frames {
                for c in frame {
                    w.write_all(&c.re.to_le_bytes())?;
                }
                for c in frame {
                    w.write_all(&c.im.to_le_bytes())?;
                }
            }
        }
        w.flush()
    };
    body(&mut w).map_err(|e| Error::io(path, e))
}

/// Reads a DDCP file.
///
/// The file stores only `e` and the channels, so scenario parameters are
/// decoded from `e` and tap powers are rebuilt with the default profile.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::format(path, msg);
    let read = |r: &mut BufReader<File>, buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(path, format!("truncated {what}")),
            _ => Error::io(path, e),
        })
    };

    let mut head = [0u8; 40];
    read(&mut r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(bad("not a DDCP dataset".into()));
    }
    let u = |k: usize| u32::from_le_bytes(head[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    if u(0) != VERSION {
        return Err(bad(format!("unsupported version {}", u(0))));
    }
    let grid = GridConfig {
        m: u(1) as usize,
        n: u(2) as usize,
        l: u(3) as usize,
        f: u(4) as usize,
        e_dim: u(5) as usize,
    };
    grid.validate()
        .map_err(|e| bad(format!("invalid grid: {e}")))?;
    let count = u(6) as usize;
    let base_seed = u64::from_le_bytes(head[32..40].try_into().unwrap());

    let powers = power_delay_profile(grid.l, GenerationConfig::default().pdp_decay);
    let d = grid.d();
    let mut ebuf = vec![0u8; 4 * E_DIM];
    let mut fbuf = vec![0u8; 8 * d];
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        read(&mut r, &mut ebuf, "conditioning vector")?;
        let mut e = [0.0; E_DIM];
        for (v, c) in e.iter_mut().zip(ebuf.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
        }
        let cond = ConditioningVector(e);
        let params = cond
            .decode()
            .map_err(|err| bad(format!("sample {index}: {err}")))?;
        let mut frames = Vec::with_capacity(grid.f);
        for _ in 0..grid.f {
            read(&mut r, &mut fbuf, "frame")?;
            let f = |k: usize| f32::from_le_bytes(fbuf[4 * k..4 * k + 4].try_into().unwrap());
            frames.push((0..d).map(|k| Complex32::new(f(k), f(d + k))).collect());
        }
        samples.push(Sample {
            index: index as u64,
            params,
            cond,
            seq: ChannelFrameSequence {
                grid,
                frames,
                tap_powers: powers.clone(),
                doppler_hz: params.doppler_hz(),
                sample_period_s: params.sample_period_s(),
            },
        });
    }
    if r.read(&mut [0u8; 1]).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after last sample".into()));
    }
    Ok(Dataset {
        grid,
        base_seed,
        samples,
    })
}

/// Reloads `path` and checks that every stored value matches `d` bit for bit.
pub fn verify_dataset_file(path: &Path, d: &Dataset) -> Result<()> {
    let back = read_dataset(path)?;
    let mismatch = |what: String| Err(Error::format(path, format!("verification failed: {what}")));
    if back.grid != d.grid || back.base_seed != d.base_seed || back.len() != d.len() {
        return mismatch("header differs".into());
    }
    for (i, (a, b)) in back.samples.iter().zip(&d.samples).enumerate() {
        let same_e = a
            .cond
            .as_slice()
            .iter()
            .zip(b.cond.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        let same_h = a.seq.frames.iter().zip(&b.seq.frames).all(|(fa, fb)| {
            fa.iter()
                .zip(fb)
                .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits())
        });
        if !same_e || !same_h {
            return mismatch(format!("sample {i} differs"));
        }
    }
    Ok(())
}
