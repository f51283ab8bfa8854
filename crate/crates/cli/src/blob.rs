//! `HGM1` tensor files: 4-byte magic, dtype code, rank, two zero bytes,
//! little-endian `u32` dims, then the little-endian row-major payload.

use std::fs;
use std::path::Path;

use hgm_core::{HgmError, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"HGM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    I32 = 1,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I32 => "i32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "i32" => Ok(DType::I32),
            _ => Err(HgmError::Format(format!("unknown dtype {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub dims: Vec<u32>,
    pub data: BlobData,
}

impl Blob {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(dims, BlobData::F32(data))
    }

    pub fn i32(dims: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::checked(dims, BlobData::I32(data))
    }

    fn checked(dims: Vec<usize>, data: BlobData) -> Result<Self> {
        let n: usize = dims.iter().product();
        let len = match &data {
            BlobData::F32(v) => v.len(),
            BlobData::I32(v) => v.len(),
        };
        if n != len || dims.len() > u8::MAX as usize {
            return Err(HgmError::Shape(format!("{len} elements for dims {dims:?}")));
        }
        let dims = dims
            .into_iter()
            .map(|d| u32::try_from(d).map_err(|_| HgmError::Shape(format!("dim {d} exceeds u32"))))
            .collect::<Result<_>>()?;
        Ok(Self { dims, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::f32(t.shape().to_vec(), t.data().to_vec()).expect("tensor shapes are consistent")
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            BlobData::F32(_) => DType::F32,
            BlobData::I32(_) => DType::I32,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        let shape = self.shape();
        match self.data {
            BlobData::F32(v) => Tensor::new(shape, v),
            BlobData::I32(_) => Err(HgmError::Format("expected f32 blob, found i32".into())),
        }
    }

    pub fn into_i32(self) -> Result<Vec<i32>> {
        match self.data {
            BlobData::I32(v) => Ok(v),
            BlobData::F32(_) => Err(HgmError::Format("expected i32 blob, found f32".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype() as u8);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| HgmError::Format(m);
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing HGM1 header".into()));
        }
        let dtype = match bytes[4] {
            0 => DType::F32,
            1 => DType::I32,
            c => return Err(bad(format!("unknown dtype code {c}"))),
        };
        let ndim = bytes[5] as usize;
        if bytes[6] != 0 || bytes[7] != 0 {
            return Err(bad("reserved header bytes are not zero".into()));
        }
        let body = 8 + 4 * ndim;
        if bytes.len() < body {
            return Err(bad("truncated dims".into()));
        }
        let dims: Vec<u32> =
            bytes[8..body].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize)).ok_or_else(|| bad("dims overflow".into()))?;
        if bytes.len() - body != 4 * n {
            return Err(bad(format!("payload is {} bytes, dims {dims:?} need {}", bytes.len() - body, 4 * n)));
        }
        let words = bytes[body..].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match dtype {
            DType::F32 => BlobData::F32(words.map(f32::from_le_bytes).collect()),
            DType::I32 => BlobData::I32(words.map(i32::from_le_bytes).collect()),
        };
        Ok(Self { dims, data })
    }
}

pub fn write_blob(path: &Path, blob: &Blob) -> Result<()> {
    fs::write(path, blob.encode())?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    let bytes = fs::read(path).map_err(|e| HgmError::Format(format!("{}: {e}", path.display())))?;
    Blob::decode(&bytes).map_err(|e| HgmError::Format(format!("{}: {e}", path.display())))
}
