//! Fixed-dimension embedding sets with a binary on-disk container.
//!
//! Layout after the 8-byte magic/version header: `dim: u32`, `count: u32`,
//! then per entry a u16-length-prefixed UTF-8 id followed by `dim` f32
//! little-endian values. Values are stored f32 end to end so a save/load
//! round trip is bitwise exact.

use std::path::Path;

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SVEB";
pub const EMBEDDING_VERSION: u32 = 1;

/// Insertion-ordered map from utterance (or model) id to an embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        EmbeddingSet {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: &str, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding for {id:?} has dim {}, set expects {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding for {id:?}")));
        }
        if self.ids.iter().any(|e| e == id) {
            return Err(Error::DuplicateUttId(id.to_string()));
        }
        self.ids.push(id.to_string());
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.ids
            .iter()
            .position(|e| e == id)
            .map(|i| self.vectors[i].as_slice())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// Embedding as f64 for scoring math.
    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(|v| v.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ContainerWriter::new(EMBEDDING_MAGIC, EMBEDDING_VERSION);
        w.put_u32(self.dim as u32);
        w.put_u32(self.len() as u32);
        for (id, vec) in self.iter() {
            w.put_str(id)?;
            w.put_f32_slice(vec);
        }
        w.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = ContainerReader::open(path, EMBEDDING_MAGIC, EMBEDDING_VERSION)?;
        let dim = r.get_u32()? as usize;
        let count = r.get_u32()? as usize;
        let mut set = EmbeddingSet::new(dim);
        for _ in 0..count {
            let id = r.get_str()?;
            let vec = r.get_f32_vec(dim)?;
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::container(path, format!("non-finite embedding for {id:?}")));
            }
            set.insert(&id, vec)
                .map_err(|e| Error::container(path, e.to_string()))?;
        }
        r.finish()?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn insert_checks_dim_and_duplicates() {
        let mut set = EmbeddingSet::new(3);
        set.insert("a", vec![1.0, 2.0, 3.0]).unwrap();
        assert!(set.insert("a", vec![0.0; 3]).is_err());
        assert!(set.insert("b", vec![0.0; 4]).is_err());
        assert!(set.insert("c", vec![f32::NAN, 0.0, 0.0]).is_err());
        assert_eq!(set.get("a"), Some(&[1.0f32, 2.0, 3.0][..]));
        assert_eq!(set.get("missing"), None);
    }

    #[test]
    fn load_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\0\0\0\0").unwrap();
        assert!(EmbeddingSet::load(&path).is_err());
    }

    #[test]
    fn load_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut set = EmbeddingSet::new(4);
        set.insert("spk1-utt1", vec![0.5, -0.25, 1.0, 2.0]).unwrap();
        set.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(EmbeddingSet::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise_exact(
            dim in 1usize..16,
            count in 0usize..8,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = crate::util::rng_from_seed(seed);
            let mut set = EmbeddingSet::new(dim);
            for i in 0..count {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-8.0f32..8.0)).collect();
                set.insert(&format!("utt-{i}"), v).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("emb.bin");
            set.save(&path).unwrap();
            let back = EmbeddingSet::load(&path).unwrap();
            prop_assert_eq!(back.dim(), set.dim());
            prop_assert_eq!(back.ids(), set.ids());
            for (id, v) in set.iter() {
                let w = back.get(id).unwrap();
                prop_assert_eq!(v.len(), w.len());
                for (a, b) in v.iter().zip(w) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
