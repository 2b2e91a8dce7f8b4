//! Versioned parameter container.
//!
//! ```text
//! "M2MC" | u16 version | u8 kind | u32 config length | config text (UTF-8)
//! u32 parameter count
//! per parameter, sorted by name:
//!   u16 name length | name | u8 rank | u32 dim * rank | f32 LE * elements
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use candle_nn::VarMap;

use super::sorted_vars;
use crate::dataset::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"M2MC";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ddpm,
    Vae,
    Decoder,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Ddpm => 0,
            ModelKind::Vae => 1,
            ModelKind::Decoder => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Ddpm),
            1 => Some(ModelKind::Vae),
            2 => Some(ModelKind::Decoder),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ddpm => "ddpm",
            ModelKind::Vae => "vae",
            ModelKind::Decoder => "decoder",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(ModelKind::Ddpm),
            "vae" => Ok(ModelKind::Vae),
            "decoder" => Ok(ModelKind::Decoder),
            other => Err(Error::config(format!(
                "unknown model kind `{other}` (expected ddpm, vae or decoder)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: String,
    pub params: Vec<Parameter>,
}

impl Checkpoint {
    pub fn from_vars(kind: ModelKind, config: String, vars: &VarMap) -> Result<Self> {
        let params = sorted_vars(vars)
            .into_iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                Ok(Parameter {
                    name,
                    dims: t.dims().to_vec(),
                    data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kind, config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 4 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut sorted: Vec<&Parameter> = self.params.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        for p in sorted {
            let name = p.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::contract(format!("parameter name too long: {}", p.name)))?;
            if p.dims.len() > u8::MAX as usize || p.dims.iter().product::<usize>() != p.data.len() {
                return Err(Error::contract(format!("parameter {} has inconsistent shape", p.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.dims.len() as u8);
            for &d in &p.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, expected M2MC"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported checkpoint version {version}")));
        }
        let kind_at = r.pos;
        let kind = ModelKind::from_tag(r.u8()?)
            .ok_or_else(|| r.error(kind_at, "unknown model kind tag"))?;
        let config_len = r.u32()? as usize;
        let config_at = r.pos;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| r.error(config_at, "config text is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.error(name_at, "parameter name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let elements: usize = dims.iter().product();
            let raw = r.take(elements.checked_mul(4).ok_or_else(|| r.error(r.pos, "shape overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(Parameter { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after last parameter"));
        }
        Ok(Self { kind, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Overwrites every variable of a freshly built model. The name and
    /// shape sets must match exactly.
    pub fn restore(&self, vars: &VarMap) -> Result<()> {
        let existing = sorted_vars(vars);
        let mut params: Vec<&Parameter> = self.params.iter().collect();
        params.sort_by(|a, b| a.name.cmp(&b.name));
        if existing.len() != params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model has {}",
                params.len(),
                existing.len()
            )));
        }
        for ((name, var), p) in existing.iter().zip(params) {
            if *name != p.name {
                return Err(Error::contract(format!(
                    "checkpoint parameter `{}` does not match model parameter `{name}`",
                    p.name
                )));
            }
            if var.dims() != p.dims.as_slice() {
                return Err(Error::contract(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    p.dims,
                    var.dims()
                )));
            }
            let value = Tensor::from_vec(p.data.clone(), p.dims.as_slice(), var.device())?
                .to_dtype(var.dtype())?;
            var.set(&value)?;
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::contract(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, format!("truncated: needed {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Denoiser, DenoiserConfig};
    use candle_core::Device;

    fn tiny() -> Denoiser {
        Denoiser::new(&DenoiserConfig::tiny(8, 8, 2), 5, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let model = tiny();
        let ck = Checkpoint::from_vars(ModelKind::Ddpm, model.net.config().to_text(), &model.vars).unwrap();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(ck.parameter_count(), crate::model::parameter_count(&model.vars));
    }

    #[test]
    fn restore_reproduces_outputs() {
        let a = tiny();
        let b = Denoiser::new(a.net.config(), 99, DType::F32, &Device::Cpu).unwrap();
        let y = Tensor::randn(0f32, 1.0, (1, 8, 8, 2), &Device::Cpu).unwrap();
        let ck = Checkpoint::from_vars(ModelKind::Ddpm, String::new(), &a.vars).unwrap();
        ck.restore(&b.vars).unwrap();
        let pa = a.net.forward(&y, &[3]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let pb = b.net.forward(&y, &[3]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn restore_rejects_other_architecture() {
        let a = tiny();
        let other = Denoiser::new(&DenoiserConfig::tiny(8, 8, 3), 0, DType::F32, &Device::Cpu).unwrap();
        let ck = Checkpoint::from_vars(ModelKind::Ddpm, String::new(), &a.vars).unwrap();
        assert!(ck.restore(&other.vars).is_err());
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let model = tiny();
        let bytes = Checkpoint::from_vars(ModelKind::Vae, "a = 1\n".into(), &model.vars)
            .unwrap()
            .encode()
            .unwrap();
        match Checkpoint::decode(&bytes[..bytes.len() - 3]) {
            Err(Error::Checkpoint { offset, .. }) => assert!(offset > 0 && offset < bytes.len()),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checkpoint { offset: 6, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [ModelKind::Ddpm, ModelKind::Vae, ModelKind::Decoder] {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ModelKind>().is_err());
    }
}
