//! `VCO1` checkpoint files.
//!
//! Layout (little-endian): magic `VCO1`, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = u64, 2 = raw
//! bytes), `u32` rank, `u64` dims, payload.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::optim::{AdamState, EmaState};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::schedule::Calibration;
use crate::teacher::FeatureStats;
use crate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCO1";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Tensor),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U64(_) => 1,
            Payload::Bytes(_) => 2,
        }
    }

    fn dims(&self) -> Vec<u64> {
        match self {
            Payload::F32(t) => t.shape().iter().map(|&d| d as u64).collect(),
            Payload::U64(v) => vec![v.len() as u64],
            Payload::Bytes(b) => vec![b.len() as u64],
        }
    }
}

pub fn write_entries(w: &mut impl Write, entries: &[(String, Payload)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, payload) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[payload.code()])?;
        let dims = payload.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match payload {
            Payload::F32(t) => {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Payload::U64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::Bytes(b) => w.write_all(b)?,
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read_entries(r: &mut impl Read) -> Result<Vec<(String, Payload)>> {
    if &read_array::<4>(r)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a VCO1 checkpoint".into()));
    }
    let count = u32::from_le_bytes(read_array(r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated entry name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let code = read_array::<1>(r)?[0];
        let rank = u32::from_le_bytes(read_array(r)?) as usize;
        let dims = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_array(r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = match code {
            0 => {
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(f32::from_le_bytes(read_array(r)?));
                }
                Payload::F32(Tensor::from_parts(&dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?)
            }
            1 => Payload::U64((0..n).map(|_| Ok(u64::from_le_bytes(read_array(r)?))).collect::<Result<_>>()?),
            2 => {
                let mut b = vec![0u8; n];
                r.read_exact(&mut b)
                    .map_err(|e| Error::Format(format!("truncated entry {name}: {e}")))?;
                Payload::Bytes(b)
            }
            c => return Err(Error::Format(format!("entry {name} has unknown dtype {c}"))),
        };
        out.push((name, payload));
    }
    Ok(out)
}

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration as TOML.
    pub config: String,
    pub teacher_seed: u64,
    pub stats: FeatureStats,
    pub calibration: Calibration,
    pub step: u64,
    pub params: ParamStore,
    pub adam: AdamState,
    pub ema: EmaState,
}

impl Checkpoint {
    pub fn entries(&self) -> Vec<(String, Payload)> {
        let mut e = vec![
            ("config".to_string(), Payload::Bytes(self.config.as_bytes().to_vec())),
            ("teacher.seed".into(), Payload::U64(vec![self.teacher_seed])),
            ("stats.mean".into(), Payload::F32(vec_tensor(&self.stats.mean))),
            ("stats.std".into(), Payload::F32(vec_tensor(&self.stats.std))),
            (
                "calibration".into(),
                Payload::F32(vec_tensor(&[
                    self.calibration.rms_pixels,
                    self.calibration.rms_features,
                    self.calibration.alpha,
                ])),
            ),
            ("step".into(), Payload::U64(vec![self.step])),
            ("adam.step".into(), Payload::U64(vec![self.adam.step])),
            ("ema.decays".into(), Payload::F32(vec_tensor(&self.ema.decays))),
        ];
        for (i, name) in self.params.names().iter().enumerate() {
            e.push((format!("param/{name}"), Payload::F32(self.params.values()[i].clone())));
            e.push((format!("adam.m/{name}"), Payload::F32(self.adam.m[i].clone())));
            e.push((format!("adam.v/{name}"), Payload::F32(self.adam.v[i].clone())));
            for (k, shadow) in self.ema.shadows.iter().enumerate() {
                e.push((format!("ema.{k}/{name}"), Payload::F32(shadow[i].clone())));
            }
        }
        e
    }

    pub fn from_entries(entries: Vec<(String, Payload)>) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut map: HashMap<String, Payload> = HashMap::new();
        for (name, p) in entries {
            if let (Some(pname), Payload::F32(t)) = (name.strip_prefix("param/"), &p) {
                params.add(pname, t.clone());
            } else if map.insert(name.clone(), p).is_some() {
                return Err(Error::Format(format!("duplicate entry {name}")));
            }
        }
        let mut take = |name: &str| map.remove(name).ok_or_else(|| Error::Format(format!("missing entry {name}")));
        let f32s = |p: Payload, name: &str| match p {
            Payload::F32(t) => Ok(t),
            _ => Err(Error::Format(format!("entry {name} must be f32"))),
        };
        let u64_1 = |p: Payload, name: &str| match p {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Format(format!("entry {name} must be one u64"))),
        };
        let config = match take("config")? {
            Payload::Bytes(b) => String::from_utf8(b).map_err(|_| Error::Format("config is not UTF-8".into()))?,
            _ => return Err(Error::Format("config entry must be bytes".into())),
        };
        let teacher_seed = u64_1(take("teacher.seed")?, "teacher.seed")?;
        let step = u64_1(take("step")?, "step")?;
        let adam_step = u64_1(take("adam.step")?, "adam.step")?;
        let mean = f32s(take("stats.mean")?, "stats.mean")?.into_data();
        let std = f32s(take("stats.std")?, "stats.std")?.into_data();
        let cal = f32s(take("calibration")?, "calibration")?;
        if cal.len() != 3 {
            return Err(Error::Format("calibration entry must hold 3 values".into()));
        }
        let decays = f32s(take("ema.decays")?, "ema.decays")?.into_data();
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        let mut shadows = vec![Vec::with_capacity(params.len()); decays.len()];
        for (i, name) in params.names().iter().enumerate() {
            let shape = params.values()[i].shape();
            let mut get = |key: String| -> Result<Tensor> {
                let t = f32s(take(&key)?, &key)?;
                if t.shape() != shape {
                    return Err(Error::Format(format!("{key} has shape {:?}, param {:?}", t.shape(), shape)));
                }
                Ok(t)
            };
            m.push(get(format!("adam.m/{name}"))?);
            v.push(get(format!("adam.v/{name}"))?);
            for (k, s) in shadows.iter_mut().enumerate() {
                s.push(get(format!("ema.{k}/{name}"))?);
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected entry {extra}")));
        }
        Ok(Self {
            config,
            teacher_seed,
            stats: FeatureStats { mean, std },
            calibration: Calibration {
                rms_pixels: cal.data()[0],
                rms_features: cal.data()[1],
                alpha: cal.data()[2],
            },
            step,
            params,
            adam: AdamState { m, v, step: adam_step },
            ema: EmaState { decays, shadows },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_entries(&mut w, &self.entries())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::from_entries(read_entries(&mut r)?)
    }
}

fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::raw(vec![v.len()], v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(9);
        let mut params = ParamStore::new();
        params.add("pixel.a", Tensor::randn(&[2, 3], 1.0, &mut rng));
        params.add("cond.b", Tensor::randn(&[4], 1.0, &mut rng));
        let mut adam = AdamState::new(params.values());
        adam.step = 7;
        adam.m[0] = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let ema = EmaState::new(&[0.9, 0.99], params.values());
        Checkpoint {
            config: "seed = 3\n".into(),
            teacher_seed: 1234,
            stats: FeatureStats {
                mean: vec![0.1, -0.2],
                std: vec![1.0, 0.5],
            },
            calibration: Calibration {
                rms_pixels: 0.6,
                rms_features: 1.0,
                alpha: 0.6,
            },
            step: 42,
            params,
            adam,
            ema,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let mut buf = Vec::new();
        write_entries(&mut buf, &c.entries()).unwrap();
        let back = Checkpoint::from_entries(read_entries(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, c);
        let mut buf2 = Vec::new();
        write_entries(&mut buf2, &back.entries()).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut buf = Vec::new();
        write_entries(&mut buf, &sample().entries()).unwrap();
        assert!(read_entries(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_entries(&mut bad.as_slice()), Err(Error::Format(_))));
    }
}
