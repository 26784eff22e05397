//! Demonstration files.
//!
//! Little-endian binary: magic `PAIL`, version `u32`, trajectory count
//! `u32`; then per trajectory `T u32`, `stack u8`, `H u16`, `W u16`,
//! `act_dim u8` (0 when actions are absent), `(T + 1)·stack·H·W` frame
//! values and `T·act_dim` action values, all `f32`.
//!
//! Metadata (environment name, seed, per-trajectory returns) lives in a
//! `key=value` sidecar next to the binary, named `<file>.meta`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Cursor;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PAIL";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 12;
pub const TRAJECTORY_HEADER_BYTES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[T + 1, stack, H, W]`.
    pub observations: Tensor,
    /// `[T, act_dim]`.
    pub actions: Option<Tensor>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.shape()[0] - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(stack, H, W)`.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let s = self.observations.shape();
        (s[1], s[2], s[3])
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        self.observations.sample(t)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemoMeta {
    pub env: String,
    pub seed: u64,
    /// Ground-truth return of each trajectory.
    pub returns: Vec<f64>,
}

impl DemoMeta {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemoSet {
    pub trajectories: Vec<Trajectory>,
    pub meta: DemoMeta,
}

impl DemoSet {
    /// Total number of `(s, s')` pairs.
    pub fn num_pairs(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Trajectory index and time step of the `i`-th pair in file order.
    pub fn locate(&self, mut i: usize) -> Option<(usize, usize)> {
        for (k, t) in self.trajectories.iter().enumerate() {
            if i < t.len() {
                return Some((k, i));
            }
            i -= t.len();
        }
        None
    }

    /// Exact size of the binary file.
    pub fn file_size(&self) -> usize {
        HEADER_BYTES
            + self
                .trajectories
                .iter()
                .map(|t| {
                    let act = t.actions.as_ref().map_or(0, Tensor::numel);
                    TRAJECTORY_HEADER_BYTES + 4 * (t.observations.numel() + act)
                })
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.file_size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.trajectories.len()).map_err(too_big)?.to_le_bytes());
        for t in &self.trajectories {
            let s = t.observations.shape();
            if s.len() != 4 || s[0] == 0 {
                return Err(Error::Format(format!("trajectory observations must be [T+1, stack, H, W], got {s:?}")));
            }
            let steps = s[0] - 1;
            let act_dim = match &t.actions {
                Some(a) if a.shape().len() == 2 && a.shape()[0] == steps => a.shape()[1],
                Some(a) => {
                    return Err(Error::Format(format!(
                        "actions {:?} do not match {steps} steps",
                        a.shape()
                    )))
                }
                None => 0,
            };
            out.extend_from_slice(&u32::try_from(steps).map_err(too_big)?.to_le_bytes());
            out.push(u8::try_from(s[1]).map_err(too_big)?);
            out.extend_from_slice(&u16::try_from(s[2]).map_err(too_big)?.to_le_bytes());
            out.extend_from_slice(&u16::try_from(s[3]).map_err(too_big)?.to_le_bytes());
            out.push(u8::try_from(act_dim).map_err(too_big)?);
            for &v in t.observations.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            if let Some(a) = &t.actions {
                for &v in a.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Format("not a demonstration file (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported demonstration version {version}")));
        }
        let n = c.u32()? as usize;
        let mut trajectories = Vec::with_capacity(n);
        for _ in 0..n {
            let steps = c.u32()? as usize;
            let stack = c.u8()? as usize;
            let h = c.u16()? as usize;
            let w = c.u16()? as usize;
            let act_dim = c.u8()? as usize;
            let observations = Tensor::new(
                vec![steps + 1, stack, h, w],
                read_f32s(&mut c, (steps + 1) * stack * h * w)?,
            )?;
            let actions = if act_dim > 0 {
                Some(Tensor::new(vec![steps, act_dim], read_f32s(&mut c, steps * act_dim)?)?)
            } else {
                None
            };
            trajectories.push(Trajectory {
                observations,
                actions,
            });
        }
        if c.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {n} trajectories",
                bytes.len() - c.pos
            )));
        }
        Ok(DemoSet {
            trajectories,
            meta: DemoMeta::default(),
        })
    }
}

fn too_big<E>(_: E) -> Error {
    Error::Format("value does not fit its header field".into())
}

fn read_f32s(c: &mut Cursor<'_>, n: usize) -> Result<Vec<f64>> {
    let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn meta_to_string(m: &DemoMeta) -> String {
    let returns: Vec<String> = m.returns.iter().map(|r| format!("{r:?}")).collect();
    format!("env={}\nseed={}\nreturns={}\n", m.env, m.seed, returns.join(","))
}

fn meta_from_str(s: &str) -> Result<DemoMeta> {
    let mut m = DemoMeta::default();
    for line in s.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
        let bad = || Error::Format(format!("bad metadata value for `{k}`: `{v}`"));
        match k.trim() {
            "env" => m.env = v.trim().to_string(),
            "seed" => m.seed = v.trim().parse().map_err(|_| bad())?,
            "returns" => {
                m.returns = v
                    .split(',')
                    .filter(|x| !x.trim().is_empty())
                    .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Format(format!("unknown metadata key `{other}`"))),
        }
    }
    Ok(m)
}

/// Writes the binary file and its metadata sidecar.
pub fn save_demos(demos: &DemoSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, demos.to_bytes()?)?;
    fs::write(meta_path(path), meta_to_string(&demos.meta))?;
    Ok(())
}

/// Reads a demonstration file; the sidecar is optional.
pub fn load_demos(path: impl AsRef<Path>) -> Result<DemoSet> {
    let path = path.as_ref();
    let mut demos = DemoSet::from_bytes(&fs::read(path)?)?;
    let meta = meta_path(path);
    if meta.exists() {
        demos.meta = meta_from_str(&fs::read_to_string(meta)?)?;
    }
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(n: usize, with_actions: bool) -> DemoSet {
        let trajectories = (0..n)
            .map(|k| {
                let steps = 3 + k;
                let obs: Vec<f64> = (0..(steps + 1) * 2 * 4 * 5).map(|i| crate::env::dequantize((i % 256) as u8)).collect();
                Trajectory {
                    observations: Tensor::new(vec![steps + 1, 2, 4, 5], obs).unwrap(),
                    actions: with_actions.then(|| {
                        Tensor::new(vec![steps, 2], (0..steps * 2).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap()
                    }),
                }
            })
            .collect();
        DemoSet {
            trajectories,
            meta: DemoMeta {
                env: "point_mass".into(),
                seed: 3,
                returns: (0..n).map(|i| 200.0 + i as f64 / 3.0).collect(),
            },
        }
    }

    #[test]
    fn round_trip_is_exact_and_size_matches_formula() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pail");
        let d = demo(10, true);
        save_demos(&d, &path).unwrap();
        let bytes = fs::metadata(&path).unwrap().len() as usize;
        let mut expect = 12;
        for k in 0..10 {
            let steps = 3 + k;
            expect += 10 + 4 * ((steps + 1) * 40 + steps * 2);
        }
        assert_eq!(bytes, expect);
        assert_eq!(d.file_size(), expect);
        let back = load_demos(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn actions_are_optional() {
        let d = demo(2, false);
        let back = DemoSet::from_bytes(&d.to_bytes().unwrap()).unwrap();
        assert_eq!(back.trajectories, d.trajectories);
        assert_eq!(back.num_pairs(), 3 + 4);
        assert_eq!(back.locate(4), Some((1, 1)));
        assert_eq!(back.locate(7), None);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = demo(1, true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DemoSet::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(DemoSet::from_bytes(&v), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(DemoSet::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(m)) if m.contains("truncated")));
    }
}
