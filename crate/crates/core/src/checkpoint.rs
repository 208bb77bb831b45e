//! Binary container for named f64 tensors.
//!
//! Layout: magic `SSDK`, format version `u16` LE, then per entry:
//! name length `u16` LE, UTF-8 name, rank `u8`, extents `u32` LE each,
//! raw `f64` LE values. Entries are written in sorted name order, so a
//! store serializes to identical bytes every time. BN running statistics
//! travel as ordinary named entries.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Network, ParamStore};

pub const MAGIC: &[u8; 4] = b"SSDK";
pub const VERSION: u16 = 1;

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, p) in store.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(p.shape.len() as u8);
        for &e in &p.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("magic mismatch, not an SSDK file".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut store = ParamStore::new();
    while pos < bytes.len() {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, shape, values)?;
    }
    Ok(store)
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = to_bytes(store);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Replace a network's parameters from a checkpoint, requiring an exact
/// match of names and shapes against the architecture.
pub fn load_into(net: &mut Network, path: &Path) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != net.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, network expects {}",
            loaded.len(),
            net.params.len()
        )));
    }
    for (name, p) in net.params.iter() {
        let l = loaded
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
        if l.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {:?}, network {:?}",
                l.shape, p.shape
            )));
        }
    }
    net.params = loaded;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("fc.weight", vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-300, -0.125])
            .unwrap();
        s.insert("fc.bias", vec![3], vec![0.5, 0.25, -0.75]).unwrap();
        s.insert("bn.running_mean", vec![3], vec![0.0, 1.0, 2.0])
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let store = sample_store();
        let bytes = to_bytes(&store);
        assert_eq!(&bytes[..4], MAGIC);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(store, back);
        // serialization is canonical
        assert_eq!(bytes, to_bytes(&back));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("params.ssdk");
        let store = sample_store();
        save(&store, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(store, back);
    }

    #[test]
    fn magic_mismatch_is_rejected() {
        let mut bytes = to_bytes(&sample_store());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = to_bytes(&sample_store());
        let cut = &bytes[..bytes.len() - 3];
        match from_bytes(cut) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
