//! Binary datasets of input (and optional target) batches.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"QSDS" u32 version=1 u32 n_batches
//! per batch: u8 split (0 train, 1 eval) tensor input u8 has_target [tensor target]
//! tensor: u32 rank, rank x u32 dims, f32 values
//! ```

use std::path::Path;

use crate::error::{QsimError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"QSDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub split: Split,
    pub input: Tensor,
    pub target: Option<Tensor>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub batches: Vec<Batch>,
}

impl Dataset {
    pub fn push(&mut self, split: Split, input: Tensor, target: Option<Tensor>) {
        self.batches.push(Batch { split, input, target });
    }

    fn split(&self, split: Split) -> impl Iterator<Item = &Batch> {
        self.batches.iter().filter(move |b| b.split == split)
    }

    /// Inputs used for calibration: train batches, or every batch when the
    /// dataset has no train split.
    pub fn calibration_inputs(&self, limit: usize) -> Vec<Tensor> {
        let train: Vec<_> = self.split(Split::Train).collect();
        let pool = if train.is_empty() {
            self.batches.iter().collect()
        } else {
            train
        };
        pool.into_iter().take(limit).map(|b| b.input.clone()).collect()
    }

    fn pairs<'a>(batches: impl Iterator<Item = &'a Batch>) -> Result<Vec<(Tensor, Tensor)>> {
        batches
            .map(|b| {
                let t = b
                    .target
                    .clone()
                    .ok_or_else(|| QsimError::InvalidArgument("batch has no target".into()))?;
                Ok((b.input.clone(), t))
            })
            .collect()
    }

    /// Labeled training pairs; falls back to all batches without a train split.
    pub fn train_pairs(&self) -> Result<Vec<(Tensor, Tensor)>> {
        if self.split(Split::Train).next().is_none() {
            return Self::pairs(self.batches.iter());
        }
        Self::pairs(self.split(Split::Train))
    }

    /// Labeled evaluation pairs; falls back to all batches without an eval split.
    pub fn eval_pairs(&self) -> Result<Vec<(Tensor, Tensor)>> {
        if self.split(Split::Eval).next().is_none() {
            return Self::pairs(self.batches.iter());
        }
        Self::pairs(self.split(Split::Eval))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.batches.len() as u32).to_le_bytes());
        for b in &self.batches {
            out.push(match b.split {
                Split::Train => 0,
                Split::Eval => 1,
            });
            put_tensor(&mut out, &b.input);
            match &b.target {
                Some(t) => {
                    out.push(1);
                    put_tensor(&mut out, t);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.err("not a qsim dataset (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported dataset version {version}")));
        }
        let n = r.u32()?;
        let mut ds = Dataset::default();
        for _ in 0..n {
            let split = match r.u8()? {
                0 => Split::Train,
                1 => Split::Eval,
                s => return Err(r.err(&format!("bad split tag {s}"))),
            };
            let input = r.tensor()?;
            let target = match r.u8()? {
                0 => None,
                1 => Some(r.tensor()?),
                t => return Err(r.err(&format!("bad target flag {t}"))),
            };
            ds.push(split, input, target);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| QsimError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| QsimError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl Reader<'_> {
    fn err(&self, message: &str) -> QsimError {
        QsimError::Parse {
            path: self.origin.to_string(),
            line: 0,
            message: format!("byte {}: {message}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(&format!("tensor rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(shape, data)
    }
}
