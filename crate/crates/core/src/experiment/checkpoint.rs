//! Versioned little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic     8 bytes  "TACOCKPT"
//! version   u32      1
//! episode   u64
//! encoder   u64 length + UTF-8 JSON of the encoder config
//! params    u64 length + f64 values
//! flag u8, then if 1: sensitivity state
//!     dim u64, num_tasks u64, step u64, total_steps u64,
//!     beta f64, burn_in f64, median_epsilon f64,
//!     schedule u8 (0 fixed, 1 exponential decay), f64, f64,
//!     sigma_bar dim*num_tasks f64 (row-major)
//! flag u8, then if 1: Adam state
//!     step u64, beta1 f64, beta2 f64, epsilon f64,
//!     peak_lr f64, warmup_fraction f64, total_steps u64,
//!     m u64 length + f64 values, v u64 length + f64 values
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::dual_encoder::{EncoderConfig, ParamVector};
use crate::error::{Error, Result};
use crate::optim::{AdamState, LrSchedule};
use crate::taco::{SensitivitySettings, SensitivityState, TaskMatrix, TemperatureSchedule};

pub const MAGIC: &[u8; 8] = b"TACOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub episode: u64,
    pub encoder: EncoderConfig,
    pub params: ParamVector,
    pub sensitivity: Option<SensitivityState>,
    pub adam: Option<AdamState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        self.f64s(v);
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.cur
            .read_exact(&mut b)
            .map_err(|_| self.fail("truncated checkpoint"))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        let remaining = self.cur.get_ref().len() - self.cur.position() as usize;
        if n > remaining {
            return Err(self.fail("length field exceeds file size"));
        }
        Ok(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        self.f64s(n)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u64(self.episode);
        let enc = serde_json::to_vec(&self.encoder)?;
        w.u64(enc.len() as u64);
        w.0.extend_from_slice(&enc);
        w.vec(self.params.as_slice());
        match &self.sensitivity {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u64(s.dim() as u64);
                w.u64(s.num_tasks() as u64);
                w.u64(s.step);
                w.u64(s.total_steps);
                w.f64(s.settings.beta);
                w.f64(s.settings.burn_in_fraction);
                w.f64(s.settings.median_epsilon);
                match s.settings.schedule {
                    TemperatureSchedule::Fixed { tau } => {
                        w.u8(0);
                        w.f64(tau);
                        w.f64(tau);
                    }
                    TemperatureSchedule::ExponentialDecay { start, end } => {
                        w.u8(1);
                        w.f64(start);
                        w.f64(end);
                    }
                }
                w.f64s(s.sigma_bar.as_slice());
            }
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                w.f64(a.beta1);
                w.f64(a.beta2);
                w.f64(a.epsilon);
                w.f64(a.schedule.peak_lr);
                w.f64(a.schedule.warmup_fraction);
                w.u64(a.schedule.total_steps);
                w.vec(&a.m);
                w.vec(&a.v);
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            cur: Cursor::new(bytes),
            path,
        };
        if &r.bytes::<8>()? != MAGIC {
            return Err(r.fail("bad magic header"));
        }
        let version = u32::from_le_bytes(r.bytes()?);
        if version != VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let episode = r.u64()?;
        let n = r.len()?;
        let mut enc = vec![0u8; n];
        r.cur.read_exact(&mut enc).map_err(|_| r.fail("truncated checkpoint"))?;
        let encoder: EncoderConfig = serde_json::from_slice(&enc)?;
        let params = ParamVector(r.vec()?);
        if params.len() != encoder.num_params() {
            return Err(r.fail("parameter count does not match encoder config"));
        }
        let sensitivity = match r.u8()? {
            0 => None,
            1 => {
                let dim = r.u64()? as usize;
                let num_tasks = r.u64()? as usize;
                let step = r.u64()?;
                let total_steps = r.u64()?;
                let beta = r.f64()?;
                let burn_in_fraction = r.f64()?;
                let median_epsilon = r.f64()?;
                let kind = r.u8()?;
                let (a, b) = (r.f64()?, r.f64()?);
                let schedule = match kind {
                    0 => TemperatureSchedule::Fixed { tau: a },
                    1 => TemperatureSchedule::ExponentialDecay { start: a, end: b },
                    _ => return Err(r.fail("unknown temperature schedule tag")),
                };
                let count = dim
                    .checked_mul(num_tasks)
                    .filter(|c| c * 8 <= bytes.len())
                    .ok_or_else(|| r.fail("sensitivity shape exceeds file size"))?;
                let data = r.f64s(count)?;
                Some(SensitivityState {
                    sigma_bar: TaskMatrix::from_row_major(dim, num_tasks, data)?,
                    settings: SensitivitySettings {
                        beta,
                        schedule,
                        burn_in_fraction,
                        median_epsilon,
                    },
                    step,
                    total_steps,
                })
            }
            _ => return Err(r.fail("bad sensitivity flag")),
        };
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let epsilon = r.f64()?;
                let peak_lr = r.f64()?;
                let warmup_fraction = r.f64()?;
                let total_steps = r.u64()?;
                let m = r.vec()?;
                let v = r.vec()?;
                Some(AdamState {
                    m,
                    v,
                    step,
                    beta1,
                    beta2,
                    epsilon,
                    schedule: LrSchedule {
                        peak_lr,
                        warmup_fraction,
                        total_steps,
                    },
                })
            }
            _ => return Err(r.fail("bad adam flag")),
        };
        Ok(Self {
            episode,
            encoder,
            params,
            sensitivity,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual_encoder::{init_params, PrefixMode};

    fn sample() -> Checkpoint {
        let encoder = EncoderConfig {
            input_dim: 3,
            embed_dim: 2,
            hidden_dims: vec![4],
            num_tasks: 2,
            prefix_mode: PrefixMode::TaskId,
            task_types: vec![],
        };
        let params = init_params(&encoder, 1).unwrap();
        let d = params.len();
        let mut sens = SensitivityState::new(
            d,
            2,
            SensitivitySettings {
                schedule: TemperatureSchedule::ExponentialDecay { start: 4.0, end: 1.0 },
                ..Default::default()
            },
            50,
        )
        .unwrap();
        sens.step = 7;
        sens.sigma_bar = TaskMatrix::from_row_major(d, 2, (0..2 * d).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        let mut adam = AdamState::new(
            d,
            LrSchedule {
                peak_lr: 1e-3,
                warmup_fraction: 0.1,
                total_steps: 100,
            },
        );
        adam.step = 3;
        adam.m[0] = 0.25;
        Checkpoint {
            episode: 2,
            encoder,
            params,
            sensitivity: Some(sens),
            adam: Some(adam),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap(), c);
        let bare = Checkpoint {
            sensitivity: None,
            adam: None,
            ..c
        };
        let bytes = bare.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap(), bare);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad, Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }
}
