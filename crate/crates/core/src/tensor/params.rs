//! Named parameters and the `SFM1` checkpoint encoding.

use std::io::{self, Read, Write};
use std::path::Path;

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Running statistics are stored alongside weights but never updated by
    /// the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Overwrites every gradient: parameters absent from `grads` get zeros.
    pub fn set_grads(&mut self, grads: &Gradients) {
        self.zero_grad();
        for (id, g) in grads.params() {
            self.params[id.0].grad = g;
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        write_records(
            &mut f,
            self.params.iter().map(|p| (p.name.as_str(), &p.value)),
        )?;
        f.flush()?;
        Ok(())
    }

    /// Loads values by name into an already-built store. Every stored
    /// parameter must be present with an identical shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(
                path.display().to_string(),
                0,
                "bad checkpoint magic",
            ));
        }
        let records = read_records(&mut f)?;
        for p in &self.params {
            if !records.iter().any(|(n, _)| n == &p.name) {
                return Err(Error::parse(
                    path.display().to_string(),
                    0,
                    format!("missing parameter {}", p.name),
                ));
            }
        }
        for (name, value) in records {
            let id = self.find(&name).ok_or_else(|| {
                Error::parse(
                    path.display().to_string(),
                    0,
                    format!("unknown parameter {name}"),
                )
            })?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }
}

/// Writes `(name length, name, rank, dims, values)` records, all integers
/// and floats 64-bit little-endian.
pub fn write_records<'a, W: Write>(
    w: &mut W,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    for (name, t) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(io::ErrorKind::UnexpectedEof.into())
            };
        }
        got += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

fn need_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    read_u64(r)?.ok_or_else(|| io::ErrorKind::UnexpectedEof.into())
}

const MAX_RECORD_VALUES: u64 = 1 << 32;

/// Reads records until end of stream.
pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while let Some(len) = read_u64(r)? {
        if len > 4096 {
            return Err(Error::parse(
                "record",
                out.len(),
                format!("implausible name length {len}"),
            ));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::parse("record", out.len(), "name is not UTF-8"))?;
        let rank = need_u64(r)?;
        if rank == 0 || rank > 16 {
            return Err(Error::parse(
                "record",
                out.len(),
                format!("implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(need_u64(r)? as usize);
        }
        let count: u64 = shape.iter().map(|&d| d as u64).product();
        if count > MAX_RECORD_VALUES {
            return Err(Error::parse(
                "record",
                out.len(),
                format!("{name}: {count} values"),
            ));
        }
        let mut bytes = vec![0u8; count as usize * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}
