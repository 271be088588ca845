//! Model checkpoint container: architecture as a JSON block, the init seed,
//! then every tensor as raw little-endian f32 in declaration order.

use std::path::Path;

use super::arch::ArchSpec;
use super::model::Model;
use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVNN";
const VERSION: u32 = 1;

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ContainerWriter::new(MAGIC, VERSION);
    let arch_json = serde_json::to_string(&model.arch)
        .map_err(|e| Error::Config(format!("architecture serialization failed: {e}")))?;
    w.put_block(&arch_json);
    let mut n_tensors = 0u32;
    for layer in &model.layers {
        n_tensors += layer.tensor_slices().len() as u32;
    }
    w.put_u32(n_tensors);
    for layer in &model.layers {
        for s in layer.tensor_slices() {
            w.put_u32(s.len() as u32);
            let f32s: Vec<f32> = s.iter().map(|&v| v as f32).collect();
            w.put_f32_slice(&f32s);
        }
    }
    w.write_to(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut r = ContainerReader::open(path, MAGIC, VERSION)?;
    let arch_json = r.get_block()?;
    let arch: ArchSpec = serde_json::from_str(&arch_json)
        .map_err(|e| Error::container(r.path(), format!("bad architecture block: {e}")))?;
    let mut model = Model::init(&arch, 0)?;
    let n_tensors = r.get_u32()? as usize;
    let expected: usize = model.layers.iter().map(|l| l.tensor_slices().len()).sum();
    if n_tensors != expected {
        return Err(Error::container(
            r.path(),
            format!("{n_tensors} tensors, architecture needs {expected}"),
        ));
    }
    for layer in &mut model.layers {
        for s in layer.tensor_slices_mut() {
            let n = r.get_u32()? as usize;
            if n != s.len() {
                return Err(Error::container(
                    r.path(),
                    format!("tensor of {n} values where {} expected", s.len()),
                ));
            }
            let vals = r.get_f32_vec(n)?;
            for (dst, v) in s.iter_mut().zip(vals) {
                *dst = v as f64;
            }
        }
    }
    r.finish()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::arch::ArchSpec;

    #[test]
    fn roundtrip_preserves_arch_and_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.svnn");
        let arch = ArchSpec::mini_xvec_ftdnn(6, 3);
        let model = Model::init(&arch, 99).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.arch.name, arch.name);

        // A second save must be byte-identical: weights already passed
        // through the f32 quantizer once.
        let path2 = dir.path().join("model2.svnn");
        save_model(&loaded, &path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);

        let reloaded = load_model(&path2).unwrap();
        for (a, b) in loaded.layers.iter().zip(&reloaded.layers) {
            for (sa, sb) in a.tensor_slices().iter().zip(b.tensor_slices().iter()) {
                assert_eq!(sa, sb);
            }
        }
    }

    #[test]
    fn truncated_and_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.svnn");
        let arch = ArchSpec::mini_xvec_tdnn(4, 2);
        let model = Model::init(&arch, 1).unwrap();
        save_model(&model, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.svnn");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load_model(&cut).is_err());

        let garbled = dir.path().join("bad.svnn");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&garbled, &b).unwrap();
        assert!(load_model(&garbled).is_err());
    }

    #[test]
    fn loaded_model_forwards_like_saved_model_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.svnn");
        let arch = ArchSpec::mini_xvec_tdnn(5, 2);
        let model = Model::init(&arch, 5).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();

        let feats = ndarray::Array2::from_shape_fn((20, 5), |(t, j)| {
            ((t * 7 + j * 3) as f64 * 0.37).sin()
        });
        let e1 = model.embedding(&feats.view()).unwrap();
        let e2 = loaded.embedding(&feats.view()).unwrap();
        for (a, b) in e1.iter().zip(e2.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
