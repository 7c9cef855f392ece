//! Binary persistence for checkpoint sets and SGD trajectories.
//!
//! Both files start with the magic bytes `GREP` and a `u16` format version;
//! every following field is little-endian.
//!
//! ```text
//! checkpoints: count: u64, p: u64, then count × (step: u64, lr: f64, p × f64)
//! trajectory:  c: u64, steps: u64, then steps × (t: u64, lr: f64, batch_len: u64,
//!                                               batch_len × (index: u64, c × f64))
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::training::{Checkpoint, CheckpointSet, StepLog, TrajectoryRecord};

pub const MAGIC: &[u8; 4] = b"GREP";
pub const VERSION: u16 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Writer(buf)
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic bytes".into(),
            });
        }
        if buf.len() < 6 {
            return Err(Error::Format {
                offset: 4,
                message: "truncated header".into(),
            });
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported format version {version} (expected {VERSION})"),
            });
        }
        Ok(Reader { buf, pos: 6 })
    }

    fn take(&mut self) -> Result<[u8; 8]> {
        let bytes = self.buf.get(self.pos..self.pos + 8).ok_or(Error::Format {
            offset: self.pos,
            message: "truncated file".into(),
        })?;
        self.pos += 8;
        Ok(bytes.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    /// A count that must fit in the remaining bytes at `min_bytes` each.
    fn count(&mut self, min_bytes: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if min_bytes > 0 && n > remaining / min_bytes as u64 {
            return Err(Error::Format {
                offset: at,
                message: format!("count {n} exceeds the remaining file size"),
            });
        }
        Ok(n as usize)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: "trailing bytes".into(),
            });
        }
        Ok(())
    }
}

pub fn encode_checkpoints(set: &CheckpointSet) -> Vec<u8> {
    let mut w = Writer::new();
    let p = set.checkpoints.first().map_or(0, |c| c.params.len());
    w.u64(set.checkpoints.len() as u64);
    w.u64(p as u64);
    for c in &set.checkpoints {
        w.u64(c.step);
        w.f64(c.lr);
        for &v in c.params.as_slice() {
            w.f64(v);
        }
    }
    w.0
}

pub fn decode_checkpoints(buf: &[u8]) -> Result<CheckpointSet> {
    let mut r = Reader::new(buf)?;
    let count = r.count(16)?;
    let p = r.count(0)?;
    let mut checkpoints = Vec::with_capacity(count);
    for _ in 0..count {
        let step = r.u64()?;
        let lr = r.f64()?;
        let mut values = Vec::with_capacity(p.min(buf.len() / 8));
        for _ in 0..p {
            values.push(r.f64()?);
        }
        checkpoints.push(Checkpoint {
            step,
            params: ParamVector(values),
            lr,
        });
    }
    r.finish()?;
    Ok(CheckpointSet { checkpoints })
}

pub fn encode_trajectory(traj: &TrajectoryRecord) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(traj.output_dim as u64);
    w.u64(traj.steps.len() as u64);
    for s in &traj.steps {
        w.u64(s.step);
        w.f64(s.lr);
        w.u64(s.batch.len() as u64);
        for (&i, g) in s.batch.iter().zip(&s.loss_grads) {
            w.u64(i as u64);
            for &v in g {
                w.f64(v);
            }
        }
    }
    w.0
}

pub fn decode_trajectory(buf: &[u8]) -> Result<TrajectoryRecord> {
    let mut r = Reader::new(buf)?;
    let c = r.count(0)?;
    let n_steps = r.count(24)?;
    let mut steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let step = r.u64()?;
        let lr = r.f64()?;
        let len = r.count(8 * (1 + c))?;
        let mut batch = Vec::with_capacity(len);
        let mut loss_grads = Vec::with_capacity(len);
        for _ in 0..len {
            batch.push(r.u64()? as usize);
            let mut g = Vec::with_capacity(c);
            for _ in 0..c {
                g.push(r.f64()?);
            }
            loss_grads.push(g);
        }
        steps.push(StepLog {
            step,
            lr,
            batch,
            loss_grads,
        });
    }
    r.finish()?;
    Ok(TrajectoryRecord { output_dim: c, steps })
}

pub fn save_checkpoint_set(set: &CheckpointSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoints(set))?;
    Ok(())
}

pub fn load_checkpoint_set(path: &Path) -> Result<CheckpointSet> {
    decode_checkpoints(&std::fs::read(path)?)
}

pub fn save_trajectory(traj: &TrajectoryRecord, path: &Path) -> Result<()> {
    std::fs::write(path, encode_trajectory(traj))?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<TrajectoryRecord> {
    decode_trajectory(&std::fs::read(path)?)
}
