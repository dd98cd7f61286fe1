//! `TDCK` checkpoints: weight matrices and biases stored as little-endian
//! `f32`.
//!
//! ```text
//! "TDCK" | version u16 | matrix count u16
//! per matrix: id len u16 | id utf-8 | rows u32 | cols u32 | prunable u8 | is_logits u8 | rows*cols f32
//! per bias vector (layer order): id len u16 | id utf-8 | len u32 | len f32
//! ```
//!
//! A checkpoint carries no architecture; [`restore`] copies it into a
//! network built from the run's configuration and checks every id and
//! shape on the way.

use std::fs;
use std::path::Path;

use sparsekit_core::{Network, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TDCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredMatrix {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub prunable: bool,
    pub is_logits: bool,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredBias {
    pub id: String,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub matrices: Vec<StoredMatrix>,
    pub biases: Vec<StoredBias>,
}

impl Checkpoint {
    pub fn of(net: &Network) -> Self {
        let matrices = net
            .matrices()
            .iter()
            .map(|m| StoredMatrix {
                id: m.id.clone(),
                rows: m.rows(),
                cols: m.cols(),
                prunable: m.prunable,
                is_logits: m.is_logits,
                values: m.values.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let biases = net
            .matrices()
            .iter()
            .zip(net.biases())
            .map(|(m, b)| StoredBias {
                id: m.id.clone(),
                values: b.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self { matrices, biases }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.matrices.len() as u16).to_le_bytes());
        for m in &self.matrices {
            put_id(&mut out, &m.id);
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            out.push(m.prunable as u8);
            out.push(m.is_logits as u8);
            m.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for b in &self.biases {
            put_id(&mut out, &b.id);
            out.extend_from_slice(&(b.values.len() as u32).to_le_bytes());
            b.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a TDCK checkpoint (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported TDCK version {version}")));
        }
        let count = r.u16()? as usize;
        let mut matrices = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.id()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let prunable = r.flag()?;
            let is_logits = r.flag()?;
            let values = r.f32s(rows * cols)?;
            matrices.push(StoredMatrix {
                id,
                rows,
                cols,
                prunable,
                is_logits,
                values,
            });
        }
        let mut biases = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.id()?;
            let len = r.u32()? as usize;
            biases.push(StoredBias {
                id,
                values: r.f32s(len)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { matrices, biases })
    }
}

fn put_id(out: &mut Vec<u8>, id: &str) {
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(self.path, format!("flag byte {b} at {}", self.pos - 1))),
        }
    }

    fn id(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "matrix id is not UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, Checkpoint::of(net).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Copies the checkpoint into `net`, which must have the same matrices
/// (ids, shapes and role flags) in the same order.
pub fn restore(ck: &Checkpoint, net: &mut Network, path: &Path) -> Result<()> {
    if ck.matrices.len() != net.matrices().len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint has {} matrices, network has {}",
                ck.matrices.len(),
                net.matrices().len()
            ),
        ));
    }
    for (s, m) in ck.matrices.iter().zip(net.matrices_mut()) {
        if s.id != m.id || s.rows != m.rows() || s.cols != m.cols() || s.prunable != m.prunable || s.is_logits != m.is_logits {
            return Err(Error::format(
                path,
                format!(
                    "matrix `{}` {}x{} does not match network matrix `{}` {}x{}",
                    s.id,
                    s.rows,
                    s.cols,
                    m.id,
                    m.rows(),
                    m.cols()
                ),
            ));
        }
        m.values = Tensor::new(vec![s.rows, s.cols], s.values.iter().map(|&v| v as f64).collect())?;
    }
    for (s, b) in ck.biases.iter().zip(net.biases_mut()) {
        if s.values.len() != b.len() {
            return Err(Error::format(path, format!("bias `{}` has length {}", s.id, s.values.len())));
        }
        b.iter_mut().zip(&s.values).for_each(|(d, &v)| *d = v as f64);
    }
    Ok(())
}

/// Rounds every parameter to `f32`, so the in-memory network equals what
/// a checkpoint would restore.
pub fn round_to_f32(net: &mut Network) {
    for m in net.matrices_mut() {
        m.values.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    for b in net.biases_mut() {
        b.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
