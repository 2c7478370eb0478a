//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RCAPSCKP"  u32 version  [u8; 32] config digest  u64 step
//! u64 n, n bytes of JSON metric history
//! u32 count, then per array:
//!   u32 name length, name (UTF-8), u8 element width (4 or 8),
//!   u32 rank, u64 extents, elements
//! ```
//!
//! Optimizer moments are stored as arrays named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Array, Real};
use crate::train::{AdamW, AdamWConfig, EpochMetrics};

pub const MAGIC: &[u8; 8] = b"RCAPSCKP";
pub const VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Lowercase hex rendering of a digest.
pub fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub digest: [u8; 32],
    pub step: u64,
    pub history: Vec<EpochMetrics>,
    pub arrays: Vec<(String, Array<T>)>,
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot of trained parameters, optimizer moments and history.
    pub fn capture(
        digest: [u8; 32],
        params: &ParamStore<T>,
        optimizer: Option<&AdamW<T>>,
        history: &[EpochMetrics],
    ) -> Self {
        let mut arrays: Vec<(String, Array<T>)> =
            params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let mut step = 0;
        if let Some(opt) = optimizer {
            step = opt.step;
            for ((name, _), (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
                arrays.push((format!("{MOMENT_M}{name}"), m.clone()));
                arrays.push((format!("{MOMENT_V}{name}"), v.clone()));
            }
        }
        Self {
            digest,
            step,
            history: history.to_vec(),
            arrays,
        }
    }

    fn find(&self, name: &str) -> Option<&Array<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    fn check_digest(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.digest != expected {
            return Err(Error::DigestMismatch {
                expected: hex(expected),
                found: hex(&self.digest),
            });
        }
        Ok(())
    }

    /// Overwrites every parameter of `params` with the stored value after
    /// checking that the checkpoint was written for the same architecture.
    pub fn restore(&self, params: &mut ParamStore<T>, expected_digest: &[u8; 32]) -> Result<()> {
        self.check_digest(expected_digest)?;
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let value = self
                .find(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {name}")))?;
            params.assign(&name, value.clone())?;
        }
        Ok(())
    }

    /// Optimizer state for `params`, zero moments where none were stored.
    pub fn optimizer(&self, params: &ParamStore<T>, config: AdamWConfig) -> AdamW<T> {
        let mut opt = AdamW::new(config, &params.values().iter().collect::<Vec<_>>());
        opt.step = self.step;
        for (i, (name, _)) in params.iter().enumerate() {
            if let Some(m) = self.find(&format!("{MOMENT_M}{name}")) {
                opt.m[i] = m.clone();
            }
            if let Some(v) = self.find(&format!("{MOMENT_V}{name}")) {
                opt.v[i] = v.clone();
            }
        }
        opt
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        let history = serde_json::to_vec(&self.history)
            .map_err(|e| Error::invalid(format!("history serialisation: {e}")))?;
        out.extend_from_slice(&(history.len() as u64).to_le_bytes());
        out.extend_from_slice(&history);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let width = std::mem::size_of::<T>() as u8;
        for (name, array) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(width);
            out.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
            for &d in array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in array.data() {
                if width == 4 {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint version {version}, expected {VERSION}"),
            ));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let len = r.u64()? as usize;
        let history = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format(path, format!("metric history: {e}")))?;
        let count = r.u32()?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "array name is not UTF-8"))?;
            let width = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<T> = match width {
                4 => r
                    .take(n.saturating_mul(4))?
                    .chunks_exact(4)
                    .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                    .collect(),
                8 => r
                    .take(n.saturating_mul(8))?
                    .chunks_exact(8)
                    .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect(),
                w => return Err(Error::format(path, format!("array {name}: element width {w}"))),
            };
            arrays.push((name, Array::from_vec(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last array"));
        }
        Ok(Self {
            digest,
            step,
            history,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.register("a.weight", Array::from_fn([2, 3], |i| i as f32 * 0.1 - 0.2));
        p.register("b", Array::scalar(1.5));
        p
    }

    fn history() -> Vec<EpochMetrics> {
        vec![EpochMetrics {
            epoch: 1,
            lr: 1e-3,
            train_loss: 2.1,
            train_acc: 0.25,
            suites: Some(vec![0.5, 0.4, 0.3, 0.2, 0.1]),
        }]
    }

    #[test]
    fn bytes_round_trip() {
        let params = store();
        let mut opt = AdamW::new(AdamWConfig::default(), &params.values().iter().collect::<Vec<_>>());
        opt.step = 7;
        opt.m[0] = Array::full([2, 3], 0.25);
        let ck = Checkpoint::capture([3; 32], &params, Some(&opt), &history());
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        let restored = back.optimizer(&params, AdamWConfig::default());
        assert_eq!(restored, opt);
    }

    #[test]
    fn restore_checks_the_digest() {
        let ck = Checkpoint::capture([1; 32], &store(), None, &[]);
        let mut target = store();
        target.values_mut()[1] = Array::scalar(0.0);
        assert!(matches!(
            ck.restore(&mut target, &[2; 32]),
            Err(Error::DigestMismatch { .. })
        ));
        ck.restore(&mut target, &[1; 32]).unwrap();
        assert_eq!(target.values(), store().values());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::capture([0; 32], &store(), None, &history()).to_bytes().unwrap();
        let p = Path::new("x");
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&[bytes.as_slice(), &[0]].concat(), p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad, p).is_err());
        let mut future = bytes;
        future[8] = 2;
        assert!(Checkpoint::<f32>::from_bytes(&future, p).is_err());
    }

    #[test]
    fn double_precision_is_kept() {
        let mut p = ParamStore::<f64>::new();
        p.register("x", Array::scalar(0.1));
        let ck = Checkpoint::capture([0; 32], &p, None, &[]);
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.arrays[0].1.data()[0], 0.1);
    }
}
