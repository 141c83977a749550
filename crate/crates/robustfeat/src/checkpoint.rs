//! Binary checkpoint files. The layout is documented in `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use robustfeat_core::data::{NormMode, NormStats};
use robustfeat_core::loss::CenterRule;
use robustfeat_core::model::{Architecture, ArchitectureDescriptor, Model};
use robustfeat_core::{CenterBank, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RFEATCK\0";
pub const VERSION: u32 = 1;

/// A trained model with its center bank and the normalization it was
/// trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub bank: CenterBank,
    pub norm: Option<NormStats>,
}

fn scalar(v: f64) -> Tensor {
    Tensor::scalar(v)
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let rule = match self.bank.rule {
            CenterRule::BatchAveraged => 0.0,
            CenterRule::Gradient => 1.0,
        };
        out.push(("center/centers".into(), self.bank.centers.clone()));
        out.push(("center/alpha".into(), scalar(self.bank.alpha)));
        out.push(("center/lambda".into(), scalar(self.bank.lambda)));
        out.push(("center/rule".into(), scalar(rule)));
        if let Some(n) = &self.norm {
            let mode = match n.mode {
                NormMode::Global => 0.0,
                NormMode::PerPixel => 1.0,
            };
            out.push(("norm/mode".into(), scalar(mode)));
            out.push(("norm/mean".into(), Tensor::from_vec(n.mean.clone())));
            out.push(("norm/std".into(), Tensor::from_vec(n.std.clone())));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = self.model.descriptor();
        let tensors = self.tensors();
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(desc.variant.tag());
        for d in desc.input_shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.extend_from_slice(&(desc.num_classes as u32).to_le_bytes());
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.shape().len() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a robustfeat checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch, file is corrupt or truncated".into()));
        }
        let mut r = Reader { buf: body, pos: 8, path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let variant = Architecture::from_tag(r.u8()?)?;
        let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let num_classes = r.u32()? as usize;
        let desc = ArchitectureDescriptor {
            variant,
            input_shape,
            num_classes,
        };
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut reserved = std::collections::BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if name.starts_with("center/") || name.starts_with("norm/") {
                reserved.insert(name, t);
            } else {
                params.push((name, t));
            }
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let model = Model::from_params(desc, params)?;
        let take = |reserved: &mut std::collections::BTreeMap<String, Tensor>, k: &str| {
            reserved.remove(k).ok_or_else(|| bad(format!("missing tensor `{k}`")))
        };
        let mut get = |k: &str| take(&mut reserved, k);
        let centers = get("center/centers")?;
        let mut bank = CenterBank::new(num_classes, model.feature_dim(), get("center/alpha")?.item(), get("center/lambda")?.item())?;
        if centers.shape() != bank.centers.shape() {
            return Err(bad(format!("centers have shape {:?}, expected {:?}", centers.shape(), bank.centers.shape())));
        }
        bank.centers = centers;
        bank.rule = if get("center/rule")?.item() == 0.0 {
            CenterRule::BatchAveraged
        } else {
            CenterRule::Gradient
        };
        let norm = match reserved.remove("norm/mode") {
            None => None,
            Some(mode) => Some(NormStats {
                mode: if mode.item() == 0.0 {
                    NormMode::Global
                } else {
                    NormMode::PerPixel
                },
                mean: take(&mut reserved, "norm/mean")?.into_data(),
                std: take(&mut reserved, "norm/std")?.into_data(),
            }),
        };
        if let Some(extra) = reserved.keys().next() {
            return Err(bad(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self { model, bank, norm })
    }

    /// Writes through a temporary file so readers never see a partial
    /// checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
