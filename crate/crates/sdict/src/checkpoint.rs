//! Parameter checkpoints: a flat binary file plus a JSON manifest.
//!
//! Layout: magic "SDV1", little-endian u32 tensor count, then per tensor a
//! length-prefixed name and u32 rows/cols, then every tensor's f64 values
//! back to back in declaration order. The manifest mirrors the header
//! (names, shapes, byte offsets) so the blob can be sliced without parsing
//! the binary header. Writes are deterministic: the same store produces the
//! same bytes.

use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{Result, SdictError};
use crate::matrix::RMatrix;

const MAGIC: &[u8; 4] = b"SDV1";

fn header_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
    }
    buf
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf = header_bytes(store);
    let mut offsets = Vec::with_capacity(store.len());
    for (_, _, t) in store.iter() {
        offsets.push(buf.len());
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf)?;

    let tensors: Vec<_> = store
        .iter()
        .zip(&offsets)
        .map(|((_, name, t), &off)| {
            serde_json::json!({
                "name": name,
                "rows": t.rows,
                "cols": t.cols,
                "offset": off,
            })
        })
        .collect();
    let manifest = serde_json::json!({ "format": "SDV1", "tensors": tensors });
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

/// Rebuild a parameter store from a checkpoint, names and declaration order
/// included.
pub fn load(path: &Path) -> Result<ParamStore> {
    let buf = std::fs::read(path)?;
    let fail = |m: &str| SdictError::Config(format!("{}: {m}", path.display()));
    if buf.len() < 8 || &buf[0..4] != MAGIC {
        return Err(fail("not an SDV1 checkpoint"));
    }
    fn read_u32(buf: &[u8], o: &mut usize) -> Option<usize> {
        let v = u32::from_le_bytes(buf.get(*o..*o + 4)?.try_into().unwrap());
        *o += 4;
        Some(v as usize)
    }
    let mut o = 4;
    let n = read_u32(&buf, &mut o).ok_or_else(|| fail("truncated header"))?;
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(&buf, &mut o).ok_or_else(|| fail("truncated header"))?;
        let raw = buf
            .get(o..o + name_len)
            .ok_or_else(|| fail("truncated name"))?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| fail("name is not utf-8"))?
            .to_string();
        o += name_len;
        let rows = read_u32(&buf, &mut o).ok_or_else(|| fail("truncated header"))?;
        let cols = read_u32(&buf, &mut o).ok_or_else(|| fail("truncated header"))?;
        shapes.push((name, rows, cols));
    }
    let want: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
    if buf.len() != o + want {
        return Err(fail("data section has the wrong length"));
    }
    let mut store = ParamStore::new();
    for (name, rows, cols) in shapes {
        let mut t = RMatrix::zeros(rows, cols);
        for v in t.data.iter_mut() {
            *v = f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
            o += 8;
        }
        store.register(&name, t)?;
    }
    Ok(store)
}

/// Copy checkpoint values into an existing store. Names, shapes, and order
/// must agree exactly; a model can only resume from its own architecture.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != store.len() {
        return Err(SdictError::Config(format!(
            "checkpoint has {} tensors, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    let pairs: Vec<_> = loaded
        .iter()
        .zip(store.iter())
        .map(|((_, ln, lt), (id, sn, st))| {
            if ln != sn {
                return Err(SdictError::Config(format!(
                    "tensor order mismatch: checkpoint {ln:?} vs model {sn:?}"
                )));
            }
            if (lt.rows, lt.cols) != (st.rows, st.cols) {
                return Err(SdictError::Config(format!(
                    "{ln}: checkpoint {}x{} vs model {}x{}",
                    lt.rows, lt.cols, st.rows, st.cols
                )));
            }
            Ok((id, lt.clone()))
        })
        .collect::<Result<_>>()?;
    for (id, t) in pairs {
        *store.get_mut(id) = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, r, c) in [("enc.w", 3usize, 5usize), ("enc.b", 1, 5), ("head.w", 5, 2)] {
            let mut t = RMatrix::zeros(r, c);
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            store.register(name, t).unwrap();
        }
        store
    }

    #[test]
    fn roundtrip_is_bit_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sdv1");
        let store = random_store(5);
        save(&path, &store).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), store.len());
        for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        // Same store, same bytes.
        let again = dir.path().join("again.sdv1");
        save(&again, &store).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn manifest_offsets_address_the_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sdv1");
        let store = random_store(9);
        save(&path, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(manifest["format"], "SDV1");
        let tensors = manifest["tensors"].as_array().unwrap();
        assert_eq!(tensors.len(), 3);
        for (t, (_, name, tensor)) in tensors.iter().zip(store.iter()) {
            assert_eq!(t["name"], name);
            assert_eq!(t["rows"].as_u64().unwrap() as usize, tensor.rows);
            let off = t["offset"].as_u64().unwrap() as usize;
            let first = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            assert_eq!(first, tensor.data[0], "{name} offset points at its data");
        }
    }

    #[test]
    fn load_into_replaces_values_and_rejects_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sdv1");
        let store = random_store(5);
        save(&path, &store).unwrap();

        let mut target = random_store(6);
        load_into(&path, &mut target).unwrap();
        for ((_, _, a), (_, _, b)) in store.iter().zip(target.iter()) {
            assert_eq!(a, b);
        }

        // A store with a different tensor name refuses the checkpoint.
        let mut other = ParamStore::new();
        other.register("enc.w", RMatrix::zeros(3, 5)).unwrap();
        other.register("enc.bias", RMatrix::zeros(1, 5)).unwrap();
        other.register("head.w", RMatrix::zeros(5, 2)).unwrap();
        assert!(load_into(&path, &mut other).is_err());

        // Same names, wrong shape.
        let mut wrong = ParamStore::new();
        wrong.register("enc.w", RMatrix::zeros(3, 5)).unwrap();
        wrong.register("enc.b", RMatrix::zeros(1, 4)).unwrap();
        wrong.register("head.w", RMatrix::zeros(5, 2)).unwrap();
        assert!(load_into(&path, &mut wrong).is_err());

        // Wrong magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
    }
}
