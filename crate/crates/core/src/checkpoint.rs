//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TMAG" | u32 version | u32 float bits (32|64) | u32 meta len | meta (UTF-8)
//! u32 tensor count
//! per tensor: u32 name len | name | u32 ndim | u64 dims.. | u64 byte offset
//! u64 payload len | payload (row-major floats)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autoencoder::AutoencoderParams;
use crate::augment::AugmentParams;
use crate::baseline::MfParams;
use crate::error::{Result, TmagError};
use crate::linalg::Matrix;
use crate::model::ModelParams;

pub const MAGIC: &[u8; 4] = b"TMAG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free text, normally the run configuration.
    pub metadata: String,
    /// 32 or 64.
    pub float_bits: u32,
    pub tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> TmagError {
    TmagError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("size overflows usize"))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>, float_bits: u32) -> Self {
        Self {
            metadata: metadata.into(),
            float_bits,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.to_owned(),
            shape,
            data,
        });
    }

    pub fn push_matrix(&mut self, name: &str, m: &Matrix) {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
    }

    pub fn push_vec(&mut self, name: &str, v: &[f64]) {
        self.push(name, vec![v.len()], v.to_vec());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("tensor {name:?} missing")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        match t.shape[..] {
            [r, c] => Matrix::from_vec(r, c, t.data.clone()),
            _ => Err(bad(format!("tensor {name:?} is not 2-d"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.shape.len() != 1 {
            return Err(bad(format!("tensor {name:?} is not 1-d")));
        }
        Ok(t.data.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = match self.float_bits {
            32 => 4,
            64 => 8,
            b => return Err(bad(format!("unsupported float width {b}"))),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.float_bits.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.data.len() * width) as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in &self.tensors {
            for &v in &t.data {
                if width == 4 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let float_bits = r.u32()?;
        let width = match float_bits {
            32 => 4,
            64 => 8,
            b => return Err(bad(format!("unsupported float width {b}"))),
        };
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let offset = r.usize()?;
            manifest.push((name, shape, offset));
        }
        let payload_len = r.usize()?;
        let payload = r.take(payload_len)?;
        let mut tensors = Vec::with_capacity(count);
        let mut expected = 0usize;
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            if offset != expected {
                return Err(bad(format!("tensor {name:?} offset {offset} overlaps or leaves a gap")));
            }
            let bytes = payload
                .get(offset..offset + n * width)
                .ok_or_else(|| bad(format!("tensor {name:?} runs past the payload")))?;
            let data = if width == 4 {
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect()
            } else {
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()
            };
            expected = offset + n * width;
            tensors.push(Tensor { name, shape, data });
        }
        if expected != payload_len {
            return Err(bad("payload has trailing bytes"));
        }
        Ok(Self {
            metadata,
            float_bits,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

pub fn push_autoencoder(c: &mut Checkpoint, prefix: &str, p: &AutoencoderParams) {
    c.push_matrix(&format!("{prefix}/W1"), &p.w1);
    c.push_vec(&format!("{prefix}/b1"), &p.b1);
    c.push_matrix(&format!("{prefix}/W2"), &p.w2);
    c.push_vec(&format!("{prefix}/b2"), &p.b2);
}

pub fn read_autoencoder(c: &Checkpoint, prefix: &str) -> Result<AutoencoderParams> {
    Ok(AutoencoderParams {
        w1: c.matrix(&format!("{prefix}/W1"))?,
        b1: c.vector(&format!("{prefix}/b1"))?,
        w2: c.matrix(&format!("{prefix}/W2"))?,
        b2: c.vector(&format!("{prefix}/b2"))?,
    })
}

pub fn push_model(c: &mut Checkpoint, p: &ModelParams) {
    c.push_matrix("emb/user", &p.user_emb);
    c.push_matrix("emb/item", &p.item_emb);
    c.push_matrix("aug/Wg", &p.aug.w_g);
    c.push_matrix("aug/Wa", &p.aug.w_a);
    push_autoencoder(c, "ae_user", &p.ae_user);
    push_autoencoder(c, "ae_item", &p.ae_item);
}

pub fn read_model(c: &Checkpoint) -> Result<ModelParams> {
    Ok(ModelParams {
        user_emb: c.matrix("emb/user")?,
        item_emb: c.matrix("emb/item")?,
        aug: AugmentParams {
            w_g: c.matrix("aug/Wg")?,
            w_a: c.matrix("aug/Wa")?,
        },
        ae_user: read_autoencoder(c, "ae_user")?,
        ae_item: read_autoencoder(c, "ae_item")?,
    })
}

pub fn push_mf(c: &mut Checkpoint, p: &MfParams) {
    c.push_matrix("mf/user", &p.user_emb);
    c.push_matrix("mf/item", &p.item_emb);
}

pub fn read_mf(c: &Checkpoint) -> Result<MfParams> {
    Ok(MfParams {
        user_emb: c.matrix("mf/user")?,
        item_emb: c.matrix("mf/item")?,
    })
}
