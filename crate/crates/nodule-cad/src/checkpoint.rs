//! Self-describing model checkpoints: a magic header, the model's
//! configuration as a `key = value` document, and the named parameter
//! tensors in the binary tensor format.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{apply_detector, apply_fpr, emit_detector, emit_fpr, KvDoc};
use crate::detector::{DetectorConfig, DetectorModel};
use crate::fpr::{Fpr3dConfig, Fpr3dModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"NMDL";
const VERSION: u32 = 1;
const KIND_DETECTOR: u8 = 1;
const KIND_FPR: u8 = 2;

fn write_blob(
    w: &mut impl Write,
    kind: u8,
    config_text: &str,
    params: &[(String, Tensor)],
) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(&(config_text.len() as u32).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

fn read_blob(r: &mut impl Read) -> Result<(u8, String, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if magic != MAGIC {
        return Err(Error::Parse(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(trunc)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).map_err(trunc)?;
    r.read_exact(&mut u32b).map_err(trunc)?;
    let clen = u32::from_le_bytes(u32b) as usize;
    let mut cbuf = vec![0u8; clen];
    r.read_exact(&mut cbuf).map_err(trunc)?;
    let config_text =
        String::from_utf8(cbuf).map_err(|e| Error::Parse(format!("config not utf-8: {e}")))?;
    r.read_exact(&mut u32b).map_err(trunc)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32b).map_err(trunc)?;
        let nlen = u32::from_le_bytes(u32b) as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf).map_err(trunc)?;
        let name = String::from_utf8(nbuf)
            .map_err(|e| Error::Parse(format!("tensor name not utf-8: {e}")))?;
        let mut t = Tensor::read_from(r)?;
        t.set_requires_grad(true);
        params.push((name, t));
    }
    Ok((kind[0], config_text, params))
}

fn trunc(e: std::io::Error) -> Error {
    Error::Parse(format!("truncated checkpoint: {e}"))
}

pub fn save_detector(path: &Path, model: &DetectorModel) -> Result<()> {
    let mut doc = KvDoc::new();
    emit_detector(&model.config, &mut doc);
    let mut buf = Vec::new();
    write_blob(&mut buf, KIND_DETECTOR, &doc.to_text(), &model.params)
        .map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (kind, config_text, params) = read_blob(&mut data.as_slice())?;
    if kind != KIND_DETECTOR {
        return Err(Error::Parse(format!(
            "{}: not a detector checkpoint (kind {kind})",
            path.display()
        )));
    }
    let mut config = DetectorConfig::full();
    apply_detector(&mut config, &KvDoc::parse(&config_text)?)?;
    let model = DetectorModel { config, params };
    let expected = model.config.param_count();
    if model.param_count() != expected {
        return Err(Error::Parse(format!(
            "checkpoint parameter count {} does not match its config ({expected})",
            model.param_count()
        )));
    }
    Ok(model)
}

pub fn save_fpr(path: &Path, model: &Fpr3dModel) -> Result<()> {
    let mut doc = KvDoc::new();
    emit_fpr(&model.config, &mut doc);
    let mut buf = Vec::new();
    write_blob(&mut buf, KIND_FPR, &doc.to_text(), &model.params)
        .map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_fpr(path: &Path) -> Result<Fpr3dModel> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (kind, config_text, params) = read_blob(&mut data.as_slice())?;
    if kind != KIND_FPR {
        return Err(Error::Parse(format!(
            "{}: not a false-positive-reduction checkpoint (kind {kind})",
            path.display()
        )));
    }
    let mut config = Fpr3dConfig::full();
    apply_fpr(&mut config, &KvDoc::parse(&config_text)?)?;
    let model = Fpr3dModel { config, params };
    let expected = model.config.param_count();
    if model.param_count() != expected {
        return Err(Error::Parse(format!(
            "checkpoint parameter count {} does not match its config ({expected})",
            model.param_count()
        )));
    }
    Ok(model)
}
