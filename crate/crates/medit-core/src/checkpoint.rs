//! Binary weight snapshots.
//!
//! Layout: magic "MEDT", u32 version, u32 tensor count, then per tensor
//! {u16 name length, UTF-8 name, u8 rank, u32 dims..., f32 little-endian
//! payload}, and finally the SHA-256 of every preceding byte. Tensors are
//! written in sorted-name order, so identical parameters always produce
//! identical files and the content hash doubles as a model identity.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MEDT";
pub const VERSION: u32 = 1;

/// Serialize a parameter store; returns the content hash that was appended.
pub fn save(path: &Path, store: &ParamStore) -> Result<[u8; 32]> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::contract(format!("tensor name too long: {name}")));
        }
        if tensor.shape.len() > u8::MAX as usize {
            return Err(Error::contract(format!("tensor rank too large: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape.len() as u8);
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&hash);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, &buf)?;
    Ok(hash)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::integrity(format!("{}: truncated", self.path.display())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Load and hash-verify a checkpoint; returns the store and its content hash.
pub fn load(path: &Path) -> Result<(ParamStore, [u8; 32])> {
    let buf = fs::read(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    if buf.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::integrity(format!("{}: too short", path.display())));
    }
    let (body, stored) = buf.split_at(buf.len() - 32);
    let actual: [u8; 32] = Sha256::digest(body).into();
    if actual != stored {
        return Err(Error::integrity(format!("{}: content hash mismatch", path.display())));
    }
    let mut r = Reader { buf: body, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::integrity(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::integrity(format!(
            "{}: version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::integrity(format!("{}: non-UTF-8 name", path.display())))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.contains(&name) {
            return Err(Error::integrity(format!(
                "{}: duplicate tensor {name}",
                path.display()
            )));
        }
        store.insert(&name, Tensor::new(&shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::integrity(format!("{}: trailing bytes", path.display())));
    }
    Ok((store, actual))
}

/// Content hash of an existing checkpoint, verifying it in the process.
pub fn peek_hash(path: &Path) -> Result<[u8; 32]> {
    Ok(load(path)?.1)
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// A frozen upstream model's identity number, stored inside a downstream
/// checkpoint as a tiny tensor so the pairing survives round-trips.
pub fn embed_dependency_hash(store: &mut ParamStore, key: &str, hash: &[u8; 32]) {
    let data: Vec<f32> = hash.iter().map(|&b| b as f32).collect();
    store.insert(key, Tensor::new(&[32], data).unwrap());
}

/// Read back a hash stored with `embed_dependency_hash`.
pub fn read_dependency_hash(store: &ParamStore, key: &str) -> Result<[u8; 32]> {
    let t = store
        .get(key)
        .map_err(|_| Error::config(format!("checkpoint lacks dependency hash {key}")))?;
    if t.shape != [32] {
        return Err(Error::integrity(format!("{key}: bad hash shape {:?}", t.shape)));
    }
    let mut out = [0u8; 32];
    for (o, &v) in out.iter_mut().zip(&t.data) {
        if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
            return Err(Error::integrity(format!("{key}: corrupt hash byte {v}")));
        }
        *o = v as u8;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    fn sample_store() -> ParamStore {
        let mut rng = Rng::seeded(5);
        let mut s = ParamStore::new();
        s.insert("b.weight", Tensor::randn(&[3, 4], &mut rng));
        s.insert("a.bias", Tensor::randn(&[7], &mut rng));
        s.insert("c.scalar", Tensor::scalar(0.25));
        s
    }

    #[test]
    fn roundtrip_preserves_exact_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = sample_store();
        let h = save(&path, &store).unwrap();
        let (back, h2) = load(&path).unwrap();
        assert_eq!(h, h2);
        assert_eq!(store.len(), back.len());
        for (name, t) in store.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(t.shape, b.shape);
            assert_eq!(t.data, b.data, "{name}");
        }
    }

    #[test]
    fn saves_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save(&p1, &sample_store()).unwrap();
        save(&p2, &sample_store()).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &sample_store()).unwrap();
        let orig = fs::read(&path).unwrap();

        let mut flipped = orig.clone();
        flipped[20] ^= 0x40;
        fs::write(&path, &flipped).unwrap();
        assert_eq!(load(&path).unwrap_err().kind(), crate::ErrorKind::Integrity);

        fs::write(&path, &orig[..orig.len() - 7]).unwrap();
        assert_eq!(load(&path).unwrap_err().kind(), crate::ErrorKind::Integrity);

        fs::write(&path, &orig).unwrap();
        let expect: [u8; 32] = Sha256::digest(&orig[..orig.len() - 32]).into();
        assert_eq!(peek_hash(&path).unwrap(), expect);
    }

    #[test]
    fn dependency_hash_roundtrip() {
        let mut store = sample_store();
        let hash = [7u8; 32];
        embed_dependency_hash(&mut store, "meta.embedder_hash", &hash);
        assert_eq!(read_dependency_hash(&store, "meta.embedder_hash").unwrap(), hash);
        assert!(read_dependency_hash(&store, "meta.other").is_err());
        assert_eq!(hash_hex(&hash), "07".repeat(32));
    }
}
