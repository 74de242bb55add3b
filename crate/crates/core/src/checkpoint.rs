//! Checkpoint container: named tensors as raw little-endian doubles behind a
//! version header, plus key=value metadata. Also writes loss curves as CSV.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PFCKPT\0\0";
const VERSION: u32 = 1;

/// Serialize the store (sorted by name) plus metadata lines.
pub fn encode_checkpoint(store: &ParamStore, metadata: &[(String, String)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta: String = metadata
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let meta_bytes = meta.as_bytes();
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(meta_bytes);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, tensor) in store.iter() {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a checkpoint back into a store and its metadata.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, Vec<(String, String)>)> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Io("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::Io("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Io(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let meta_str = std::str::from_utf8(take(&mut pos, meta_len)?)
        .map_err(|_| Error::Io("bad checkpoint metadata".into()))?
        .to_string();
    let metadata: Vec<(String, String)> = meta_str
        .lines()
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect();
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Io("bad tensor name".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert_raw(&name, Tensor::new(shape, data)?);
    }
    Ok((store, metadata))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, metadata: &[(String, String)]) -> Result<()> {
    let bytes = encode_checkpoint(store, metadata)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Vec<(String, String)>)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loss curve as comma-separated text: `step,loss,smoothed`.
pub fn write_loss_curve(path: &Path, raw: &[f64], smoothed: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss,smoothed\n");
    for (i, (r, m)) in raw.iter().zip(smoothed.iter()).enumerate() {
        s.push_str(&format!("{},{:.12e},{:.12e}\n", i, r, m));
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::InitSpec;
    use crate::rng::Rng;

    #[test]
    fn round_trip_bit_exact() {
        let rng = Rng::new(1);
        let mut store = ParamStore::new();
        store
            .create("a.weight", &[3, 2], InitSpec::TruncNormal { std: 1.0 }, &rng)
            .unwrap();
        store
            .create("b.bias", &[5], InitSpec::TruncNormal { std: 0.5 }, &rng)
            .unwrap();
        let meta = vec![("config_hash".to_string(), "abc123".to_string())];
        let bytes = encode_checkpoint(&store, &meta).unwrap();
        let (back, meta_back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta_back, meta);
        for name in store.names() {
            let a = store.get(&name).unwrap();
            let b = back.get(&name).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Deterministic encoding.
        assert_eq!(bytes, encode_checkpoint(&store, &meta).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint(b"not a checkpoint").is_err());
        let rng = Rng::new(2);
        let mut store = ParamStore::new();
        store.create("x", &[2], InitSpec::Zeros, &rng).unwrap();
        let bytes = encode_checkpoint(&store, &[]).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    }
}
