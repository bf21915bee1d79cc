//! Named-array container: `GAI1` magic, little-endian `u64` manifest length, JSON
//! manifest, then the little-endian `f64` payload in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GAI1";
const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    dims: Vec<usize>,
}

pub fn encode_arrays<'a>(arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let arrays: Vec<_> = arrays.into_iter().collect();
    let manifest: Vec<Entry> = arrays
        .iter()
        .map(|(name, t)| Entry {
            name: name.to_string(),
            dtype: DTYPE.into(),
            dims: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&manifest)?;
    let payload: usize = arrays.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(12 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing GAI1 magic"));
    }
    let mlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if mlen > body.len() {
        return Err(bad("truncated manifest"));
    }
    let manifest: Vec<Entry> =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad(&format!("bad manifest: {e}")))?;
    let mut payload = &body[mlen..];
    let expected: usize = manifest.iter().map(|e| e.dims.iter().product::<usize>() * 8).sum();
    if payload.len() != expected {
        return Err(bad(&format!(
            "payload is {} bytes, manifest describes {expected}",
            payload.len()
        )));
    }
    manifest
        .into_iter()
        .map(|e| {
            if e.dtype != DTYPE {
                return Err(bad(&format!("unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.dims.iter().product();
            let (chunk, rest) = payload.split_at(n * 8);
            payload = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Ok((e.name, Tensor::new(&e.dims, data)?))
        })
        .collect()
}

pub fn write_arrays<'a>(path: &Path, arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    fs::write(path, encode_arrays(arrays)?)?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_arrays(&fs::read(path)?)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    write_arrays(path, store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
}

/// Loads into a store that already holds the same parameter names and shapes.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    store.load_named(read_arrays(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(4);
        s.glorot("a.weight", &[3, 2, 1, 1], 2, 3);
        s.uniform("a.bias", &[3], 1.0);
        s.add("odd", Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, 1e300, -7.25]));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gai1");
        let s = store();
        save_checkpoint(&s, &path).unwrap();
        let mut t = ParamStore::new(99);
        t.zeros("a.weight", &[3, 2, 1, 1]);
        t.zeros("a.bias", &[3]);
        t.zeros("odd", &[4]);
        load_checkpoint(&mut t, &path).unwrap();
        for ((_, p), (_, q)) in s.iter().zip(t.iter()) {
            let a: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let again = dir.path().join("m2.gai1");
        save_checkpoint(&t, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn layout_matches_format() {
        let t = Tensor::from_vec(vec![1.5]);
        let bytes = encode_arrays([("x", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"GAI1");
        let mlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[12..12 + mlen]).unwrap();
        assert_eq!(manifest, serde_json::json!([{"name": "x", "dtype": "f64le", "dims": [1]}]));
        assert_eq!(&bytes[12 + mlen..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let good = encode_arrays([("w", &t)]).unwrap();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_arrays(&magic), Err(Error::Checkpoint(_))));
        assert!(decode_arrays(&good[..good.len() - 3]).is_err());
        assert!(decode_arrays(&good[..6]).is_err());
        // manifest claims more elements than the payload carries
        let s = String::from_utf8_lossy(&good).replace("[2,3]", "[2,4]");
        assert!(decode_arrays(s.as_bytes()).is_err());
        assert!(decode_arrays(&[good.clone(), vec![0u8; 8]].concat()).is_err());
    }

    #[test]
    fn load_rejects_mismatched_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gai1");
        save_checkpoint(&store(), &path).unwrap();
        let mut t = ParamStore::new(0);
        t.zeros("a.weight", &[3, 2, 1, 1]);
        assert!(load_checkpoint(&mut t, &path).is_err());
        let mut t = ParamStore::new(0);
        t.zeros("a.weight", &[3, 2, 1, 1]);
        t.zeros("a.bias", &[4]);
        t.zeros("odd", &[4]);
        assert!(load_checkpoint(&mut t, &path).is_err());
    }
}
