//! `CKPT1` container: `b"CKPT1"`, u32 metadata length, UTF-8 `key=value`
//! lines, u32 entry count, then per entry a u16 name length, the name, a u64
//! payload length and a `TNS1` payload. All integers little endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::denoiser::{is_lora_name, ArchConfig, ModelParams, EMBED};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numerics::tns::{self, DType};

pub const MAGIC: &[u8; 5] = b"CKPT1";

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        format: "CKPT1",
        offset,
        reason: reason.into(),
    }
}

/// Serialized container plus the count of fp16-saturated values.
pub fn encode(meta: &BTreeMap<String, String>, store: &ParamStore, dtype: DType) -> Result<(Vec<u8>, usize)> {
    let mut text = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("unencodable metadata key {k:?}")));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut saturated = 0;
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid("tensor name too long"))?;
        let (bytes, sat) = tns::encode(t, dtype)?;
        saturated += sat;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    Ok((out, saturated))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(self.buf.len(), format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<(BTreeMap<String, String>, ParamStore)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let meta_len = c.u32("metadata length")? as usize;
    let meta_at = c.pos;
    let text = std::str::from_utf8(c.take(meta_len, "metadata")?).map_err(|_| corrupt(meta_at, "metadata is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt(meta_at, format!("bad metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let count = c.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_at = c.pos;
        let n = c.u16("entry name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "entry name")?).map_err(|_| corrupt(name_at, "entry name is not UTF-8"))?;
        let len = c.u64("entry length")? as usize;
        let at = c.pos;
        let payload = c.take(len.min(buf.len() - at), "entry payload")?;
        let (t, _, used) = tns::decode_at(payload, at)?;
        if used != len {
            return Err(corrupt(at + used, format!("entry {name} length mismatch")));
        }
        if store.contains(name) {
            return Err(corrupt(name_at, format!("duplicate entry {name}")));
        }
        store.insert(name, t);
    }
    if c.pos != buf.len() {
        return Err(corrupt(c.pos, "trailing bytes"));
    }
    Ok((meta, store))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn arch_meta(arch: &ArchConfig, meta: &mut BTreeMap<String, String>) {
    meta.insert("width".into(), arch.width.to_string());
    meta.insert("hidden".into(), arch.hidden.to_string());
    meta.insert("time_dim".into(), arch.time_dim.to_string());
    meta.insert("embed_dim".into(), arch.embed_dim.to_string());
    meta.insert("grid".into(), arch.grid.to_string());
    meta.insert("lora_rank".into(), arch.lora_rank.to_string());
    // Debug formatting of f64 round-trips exactly.
    meta.insert("lora_alpha".into(), format!("{:?}", arch.lora_alpha));
}

fn meta_field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt(0, format!("missing or bad metadata field {key}")))
}

fn arch_from_meta(meta: &BTreeMap<String, String>) -> Result<ArchConfig> {
    Ok(ArchConfig {
        width: meta_field(meta, "width")?,
        hidden: meta_field(meta, "hidden")?,
        time_dim: meta_field(meta, "time_dim")?,
        embed_dim: meta_field(meta, "embed_dim")?,
        grid: meta_field(meta, "grid")?,
        lora_rank: meta_field(meta, "lora_rank")?,
        lora_alpha: meta_field(meta, "lora_alpha")?,
    })
}

/// Saves every tensor of `p`; returns the number of fp16-saturated values.
pub fn save_checkpoint(p: &ModelParams, path: &Path, dtype: DType) -> Result<usize> {
    let mut meta = BTreeMap::new();
    arch_meta(&p.arch, &mut meta);
    meta.insert("kind".into(), "full".into());
    meta.insert("frozen_base".into(), p.frozen_base.to_string());
    meta.insert("dtype".into(), dtype.as_str().into());
    let (bytes, sat) = encode(&meta, p.store(), dtype)?;
    if sat > 0 {
        log::warn!("{sat} values saturated to the fp16 range in {}", path.display());
    }
    write_atomic(path, &bytes)?;
    Ok(sat)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, store) = decode(&bytes)?;
    if meta.get("kind").map(String::as_str) != Some("full") {
        return Err(corrupt(0, "not a full checkpoint"));
    }
    let arch = arch_from_meta(&meta)?;
    let frozen: bool = meta_field(&meta, "frozen_base")?;
    ModelParams::from_store(arch, store, frozen)
}

/// Saves only the adapters and the token embedding table.
pub fn save_adapters(p: &ModelParams, path: &Path, dtype: DType) -> Result<usize> {
    if !p.has_lora() {
        return Err(Error::invalid("model has no adapters to save"));
    }
    let mut store = ParamStore::new();
    for (n, t) in p.store().iter() {
        if is_lora_name(n) || n == EMBED {
            store.insert(n, t.clone());
        }
    }
    let mut meta = BTreeMap::new();
    arch_meta(&p.arch, &mut meta);
    meta.insert("kind".into(), "adapter".into());
    meta.insert("base_digest".into(), p.base_digest());
    meta.insert("dtype".into(), dtype.as_str().into());
    let (bytes, sat) = encode(&meta, &store, dtype)?;
    write_atomic(path, &bytes)?;
    Ok(sat)
}

/// Applies a saved adapter file to `base`, replacing its embedding table.
pub fn load_adapters(base: &ModelParams, path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, adapters) = decode(&bytes)?;
    if meta.get("kind").map(String::as_str) != Some("adapter") {
        return Err(corrupt(0, "not an adapter file"));
    }
    let arch = arch_from_meta(&meta)?;
    if arch != base.arch {
        return Err(Error::invalid("adapter architecture does not match the base model"));
    }
    if meta.get("base_digest").map(String::as_str) != Some(base.base_digest().as_str()) {
        log::warn!("adapter {} was trained against different base weights", path.display());
    }
    let mut store = base.store().clone();
    for (n, t) in adapters.iter() {
        store.insert(n, t.clone());
    }
    ModelParams::from_store(arch, store, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn model() -> ModelParams {
        let arch = ArchConfig {
            width: 4,
            hidden: 8,
            time_dim: 8,
            embed_dim: 4,
            grid: 4,
            lora_rank: 2,
            lora_alpha: 3.0,
        };
        let mut p = ModelParams::init(&mut Rng::new(4, 0), arch).unwrap();
        p.attach_lora(&mut Rng::new(5, 0));
        p
    }

    #[test]
    fn fp32_roundtrip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = model();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path, DType::F32).unwrap();
        let q = load_checkpoint(&path).unwrap();
        for ((n, a), (m, b)) in p.store().iter().zip(q.store().iter()) {
            assert_eq!(n, m);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        // A second save of the loaded model reproduces the same bytes.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&q, &path2, DType::F32).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn fp64_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = model();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path, DType::F64).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn fp16_roundtrip_within_half_ulp() {
        let dir = tempfile::tempdir().unwrap();
        let p = model();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path, DType::F16).unwrap();
        let q = load_checkpoint(&path).unwrap();
        for ((_, a), (_, b)) in p.store().iter().zip(q.store().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                if x.abs() >= 6.2e-5 {
                    assert!(((x - y) / x).abs() <= 2f64.powi(-11), "{x} {y}");
                }
            }
        }
    }

    #[test]
    fn truncation_reports_offset_and_leaves_nothing_partial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &path, DType::F32).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            match load_checkpoint(&path) {
                Err(Error::Corrupt { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { offset: 0, .. })));
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn adapters_apply_onto_base() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = model();
        for (n, t) in p.store_mut().iter_mut() {
            if n.ends_with("lora_b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.25);
            }
        }
        let path = dir.path().join("a.ckpt");
        save_adapters(&p, &path, DType::F64).unwrap();
        let base = ModelParams::from_store(
            p.arch.clone(),
            {
                let mut s = p.store().clone();
                s.remove_where(is_lora_name);
                s
            },
            false,
        )
        .unwrap();
        let q = load_adapters(&base, &path).unwrap();
        assert_eq!(q.store(), p.store());
        assert!(load_checkpoint(&path).is_err());
    }
}
