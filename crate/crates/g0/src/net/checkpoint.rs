//! Checkpoint file format, magic "G0CK": version, config hash, named tensor
//! table (values), optimizer moment tables, step/anomaly counters, and a meta
//! JSON blob. Loading refuses a mismatched config hash unless a transfer map
//! says how to reuse the tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::store::ParamStore;
use crate::net::tensor::Tensor;

const MAGIC: &[u8; 4] = b"G0CK";
const VERSION: u32 = 1;

/// How to load tensors across architectures. Used by the curriculum's weight
/// transfer: copy matching names, leave the rest to fresh initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMap {
    /// Copy tensors whose names exist in the target and skip the others; the
    /// caller provides freshly initialized values for the remainder.
    CopyMatchingNames,
}

pub fn save_checkpoint(
    store: &ParamStore,
    config_hash: u64,
    meta: &str,
    path: &Path,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash.to_le_bytes());
    buf.extend_from_slice(&store.step.to_le_bytes());
    buf.extend_from_slice(&store.anomalies.to_le_bytes());
    buf.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for (name, p) in &store.entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(p.value.shape.len() as u32).to_le_bytes());
        for d in &p.value.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for t in [&p.value, &p.m, &p.v] {
            for x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mb = meta.as_bytes();
    buf.extend_from_slice(&(mb.len() as u32).to_le_bytes());
    buf.extend_from_slice(mb);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub store: ParamStore,
    pub config_hash: u64,
    pub meta: String,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated: wanted {n} more bytes"),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Raw load (no hash check); callers decide what matching policy to apply.
pub fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut data = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
        path,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected G0CK"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let config_hash = r.u64()?;
    let step = r.u64()?;
    let anomalies = r.u64()?;
    let n_tensors = r.u32()? as usize;
    let mut store = ParamStore::new();
    store.step = step;
    store.anomalies = anomalies;
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, r.pos as u64, "tensor name not utf-8"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let value = Tensor::from_vec(&shape, r.f32s(len)?);
        let m = Tensor::from_vec(&shape, r.f32s(len)?);
        let v = Tensor::from_vec(&shape, r.f32s(len)?);
        store.insert(&name, value);
        let p = store.entries.get_mut(&name).unwrap();
        p.m = m;
        p.v = v;
    }
    let meta_len = r.u32()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::format(path, r.pos as u64, "meta not utf-8"))?;
    Ok(LoadedCheckpoint {
        store,
        config_hash,
        meta,
    })
}

/// Strict load: the stored config hash must equal `expect_hash`.
pub fn load_checkpoint(path: &Path, expect_hash: u64) -> Result<LoadedCheckpoint> {
    let loaded = read_checkpoint(path)?;
    if loaded.config_hash != expect_hash {
        return Err(Error::contract(format!(
            "checkpoint config hash {:#018x} does not match expected {:#018x}; \
             supply a transfer map to reuse tensors across architectures",
            loaded.config_hash, expect_hash
        )));
    }
    Ok(loaded)
}

/// Load under a transfer map: tensors whose names exist in `target` are
/// copied in (values only; moments reset); everything else keeps the fresh
/// initialization already present in `target`. Names in `require` must all be
/// found in the checkpoint.
pub fn load_with_transfer(
    path: &Path,
    target: &mut ParamStore,
    _map: TransferMap,
    require: &[String],
) -> Result<()> {
    let loaded = read_checkpoint(path)?;
    let missing: Vec<&String> = require
        .iter()
        .filter(|n| !loaded.store.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::contract(format!(
            "checkpoint {} is missing required tensors: {missing:?}",
            path.display()
        )));
    }
    for (name, p) in loaded.store.entries {
        if let Some(dst) = target.entries.get_mut(&name) {
            if dst.value.shape != p.value.shape {
                return Err(Error::contract(format!(
                    "transfer shape mismatch on `{name}`"
                )));
            }
            dst.value = p.value;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::{add_expert_params, init_backbone, tiny_config};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = init_backbone(&cfg, &mut rng);
        store.step = 42;
        store.entries.get_mut("head.ar.w").unwrap().m.data[3] = 0.5;
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.g0ck");
        save_checkpoint(&store, cfg.hash(), "{\"stage\":\"test\"}", &path).unwrap();
        let loaded = load_checkpoint(&path, cfg.hash()).unwrap();
        assert_eq!(loaded.store.step, 42);
        assert_eq!(loaded.meta, "{\"stage\":\"test\"}");
        for (name, p) in &store.entries {
            let q = loaded.store.get(name).unwrap();
            assert_eq!(p.value, q.value, "{name}");
            assert_eq!(p.m, q.m, "{name}");
        }
    }

    #[test]
    fn hash_mismatch_is_refused() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = init_backbone(&cfg, &mut rng);
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.g0ck");
        save_checkpoint(&store, cfg.hash(), "", &path).unwrap();
        let err = load_checkpoint(&path, cfg.hash() ^ 1).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("hash"), "{msg}");
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = init_backbone(&cfg, &mut rng);
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.g0ck");
        save_checkpoint(&store, cfg.hash(), "", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(crate::error::Error::Format { .. })
        ));
    }

    #[test]
    fn transfer_copies_backbone_keeps_fresh_expert() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stage1 = init_backbone(&cfg, &mut rng);
        let dir = tempdir().unwrap();
        let path = dir.path().join("s1.g0ck");
        save_checkpoint(&stage1, cfg.hash(), "", &path).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let mut target = init_backbone(&cfg, &mut rng2);
        add_expert_params(&mut target, &cfg, 5, 4, &mut rng2);
        let fresh_expert = target.get("expert.out.w").unwrap().value.clone();
        let require: Vec<String> = target
            .names()
            .filter(|n| !n.starts_with("expert."))
            .cloned()
            .collect();
        load_with_transfer(&path, &mut target, TransferMap::CopyMatchingNames, &require).unwrap();
        assert_eq!(
            target.get("head.ar.w").unwrap().value,
            stage1.get("head.ar.w").unwrap().value
        );
        assert_eq!(target.get("expert.out.w").unwrap().value, fresh_expert);
    }

    #[test]
    fn transfer_missing_tensor_lists_names() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stage1 = init_backbone(&cfg, &mut rng);
        let dir = tempdir().unwrap();
        let path = dir.path().join("s1.g0ck");
        save_checkpoint(&stage1, cfg.hash(), "", &path).unwrap();
        let mut target = init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let err = load_with_transfer(
            &path,
            &mut target,
            TransferMap::CopyMatchingNames,
            &["not.a.tensor".to_string()],
        )
        .unwrap_err();
        assert!(format!("{err}").contains("not.a.tensor"));
    }
}
