use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Param, ParamStore, Result, TensorError};

const MAGIC: &[u8; 8] = b"PDNCKPT\x01";
const VERSION: u32 = 1;

/// Serialize the store: versioned header, then per group the name, shape,
/// and row-major little-endian f64 values. Round trip is bit-exact.
pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&store.step().to_le_bytes());
    let count = store.iter().count() as u32;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.rows as u64).to_le_bytes());
        out.extend_from_slice(&(p.cols as u64).to_le_bytes());
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Content hash of a checkpoint; ties index files to the model that
/// produced them.
pub fn model_id(store: &ParamStore) -> String {
    let digest = Sha256::digest(checkpoint_bytes(store));
    hex_encode(&digest)
}

pub(crate) fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(store))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TensorError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorError::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let step = r.u64()?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| TensorError::CorruptCheckpoint("non-utf8 group name".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let mut p = Param::zeros(rows, cols);
        for v in p.value.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
        store.insert(&name, p)?;
    }
    if r.pos != bytes.len() {
        return Err(TensorError::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    store.set_step(step);
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("a/w0", Param::glorot(4, 3, &mut rng)).unwrap();
        store.insert("b/emb", Param::glorot(10, 2, &mut rng)).unwrap();
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store();
        let bytes = checkpoint_bytes(&store);
        let loaded = parse_checkpoint(&bytes).unwrap();
        assert_eq!(bytes, checkpoint_bytes(&loaded));
        for ((n1, p1), (n2, p2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       p2.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = checkpoint_bytes(&sample_store());
        let err = parse_checkpoint(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn model_id_tracks_values() {
        let store = sample_store();
        let id1 = model_id(&store);
        let mut store2 = store.clone();
        store2.get_mut("a/w0").unwrap().value[0] += 1e-9;
        assert_ne!(id1, model_id(&store2));
        assert_eq!(id1, model_id(&store));
    }
}
