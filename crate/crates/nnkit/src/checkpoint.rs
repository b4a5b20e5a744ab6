//! Versioned little-endian checkpoint of named parameter blocks.
//!
//! ```text
//! magic "NNCK" | version u16 | manifest_len u32 | manifest (UTF-8 JSON)
//! count u32 | count × { name_len u16 | name | ndim u8 | dims u32… | f32 payload }
//! ```

use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::param::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NNCK";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub blocks: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_params(manifest: String, ps: &ParamSet<f32>) -> Self {
        Checkpoint {
            manifest,
            blocks: ps
                .iter()
                .map(|(_, p)| (p.name.clone(), (*p.value).clone()))
                .collect(),
        }
    }

    /// Copies every block into the parameter of the same name; names and
    /// shapes must match exactly.
    pub fn load_into(&self, ps: &mut ParamSet<f32>) -> Result<()> {
        if self.blocks.len() != ps.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} blocks, model has {}",
                self.blocks.len(),
                ps.len()
            )));
        }
        for (name, t) in &self.blocks {
            let id = ps
                .find(name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown block `{name}`")))?;
            if ps.value(id).shape() != t.shape() {
                return Err(NnError::Checkpoint(format!(
                    "block `{name}`: shape {:?} vs model {:?}",
                    t.shape(),
                    ps.value(id).shape()
                )));
            }
            ps.set_value(id, t.clone());
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.manifest.len() as u32).to_le_bytes())?;
        w.write_all(self.manifest.as_bytes())?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for (name, t) in &self.blocks {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_n(&mut r)?);
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = u32::from_le_bytes(read_n(&mut r)?) as usize;
        let mut mbytes = vec![0u8; mlen];
        r.read_exact(&mut mbytes)?;
        let manifest = String::from_utf8(mbytes)
            .map_err(|_| NnError::Checkpoint("manifest is not UTF-8".into()))?;
        let count = u32::from_le_bytes(read_n(&mut r)?) as usize;
        let mut blocks = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = u16::from_le_bytes(read_n(&mut r)?) as usize;
            let mut nb = vec![0u8; nlen];
            r.read_exact(&mut nb)?;
            let name =
                String::from_utf8(nb).map_err(|_| NnError::Checkpoint("block name is not UTF-8".into()))?;
            let [ndim] = read_n::<1>(&mut r)?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(read_n(&mut r)?) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (1 << 31))
                .ok_or_else(|| NnError::Checkpoint(format!("block `{name}` too large")))?;
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { manifest, blocks })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_n<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}
