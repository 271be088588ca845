//! Architecture descriptions: layer specs, validation, frame bookkeeping,
//! and the preset zoo.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Tdnn,
    Ftdnn,
    LstmP,
    Dense,
    MfmTdnnResblock,
    StatsPooling,
    SoftmaxHead,
    AsoftmaxHead,
}

impl LayerKind {
    pub fn is_head(self) -> bool {
        matches!(self, LayerKind::SoftmaxHead | LayerKind::AsoftmaxHead)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmDims {
    pub cell_dim: usize,
    /// Recurrent connections read the state this many frames back; must be
    /// negative.
    pub delay: i64,
    pub recurrent_proj: usize,
    pub nonrecurrent_proj: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Frame offsets for the first (or only) linear stage.
    #[serde(default)]
    pub context_factor1: Vec<i64>,
    /// Frame offsets for the second linear stage (factorized layers only).
    #[serde(default)]
    pub context_factor2: Vec<i64>,
    /// Index of an earlier layer whose output is concatenated to this
    /// layer's input, center-cropped to the current frame range.
    #[serde(default)]
    pub skip_from: Option<usize>,
    pub size: usize,
    #[serde(default)]
    pub inner_size: Option<usize>,
    #[serde(default)]
    pub lstm: Option<LstmDims>,
    /// Width multiplier for residual blocks.
    #[serde(default)]
    pub f: Option<usize>,
}

impl LayerSpec {
    pub fn tdnn(context: &[i64], size: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Tdnn,
            context_factor1: context.to_vec(),
            context_factor2: Vec::new(),
            skip_from: None,
            size,
            inner_size: None,
            lstm: None,
            f: None,
        }
    }

    pub fn ftdnn(ctx1: &[i64], ctx2: &[i64], inner: usize, size: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Ftdnn,
            context_factor1: ctx1.to_vec(),
            context_factor2: ctx2.to_vec(),
            skip_from: None,
            size,
            inner_size: Some(inner),
            lstm: None,
            f: None,
        }
    }

    pub fn ftdnn_skip(ctx1: &[i64], ctx2: &[i64], inner: usize, size: usize, from: usize) -> Self {
        LayerSpec {
            skip_from: Some(from),
            ..LayerSpec::ftdnn(ctx1, ctx2, inner, size)
        }
    }

    pub fn lstm_p(cell_dim: usize, delay: i64, rproj: usize, nrproj: usize) -> Self {
        LayerSpec {
            kind: LayerKind::LstmP,
            context_factor1: Vec::new(),
            context_factor2: Vec::new(),
            skip_from: None,
            size: rproj + nrproj,
            inner_size: None,
            lstm: Some(LstmDims {
                cell_dim,
                delay,
                recurrent_proj: rproj,
                nonrecurrent_proj: nrproj,
            }),
            f: None,
        }
    }

    pub fn dense(size: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            context_factor1: Vec::new(),
            context_factor2: Vec::new(),
            skip_from: None,
            size,
            inner_size: None,
            lstm: None,
            f: None,
        }
    }

    pub fn resblock(size: usize, f: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MfmTdnnResblock,
            context_factor1: vec![-1, 0, 1],
            context_factor2: Vec::new(),
            skip_from: None,
            size,
            inner_size: None,
            lstm: None,
            f: Some(f),
        }
    }

    pub fn stats_pooling() -> Self {
        LayerSpec {
            kind: LayerKind::StatsPooling,
            context_factor1: Vec::new(),
            context_factor2: Vec::new(),
            skip_from: None,
            size: 0,
            inner_size: None,
            lstm: None,
            f: None,
        }
    }

    pub fn head(kind: LayerKind, num_speakers: usize) -> Self {
        LayerSpec {
            kind,
            context_factor1: Vec::new(),
            context_factor2: Vec::new(),
            skip_from: None,
            size: num_speakers,
            inner_size: None,
            lstm: None,
            f: None,
        }
    }

    /// Frames this layer removes from the sequence (valid-context shrink).
    pub fn shrink(&self) -> usize {
        let extent = |ctx: &[i64]| -> usize {
            match (ctx.iter().min(), ctx.iter().max()) {
                (Some(lo), Some(hi)) => (hi - lo) as usize,
                _ => 0,
            }
        };
        match self.kind {
            LayerKind::Tdnn => extent(&self.context_factor1),
            LayerKind::Ftdnn => extent(&self.context_factor1) + extent(&self.context_factor2),
            // Residual blocks pad with edge replication; LSTM and the rest
            // keep frame count.
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_dim: usize,
    pub num_speakers: usize,
    pub layers: Vec<LayerSpec>,
    /// Dense layer whose pre-activation is the utterance embedding.
    pub embedding_layer_index: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_speakers < 2 {
            return Err(Error::Config(
                "architecture needs input_dim > 0 and at least 2 speakers".into(),
            ));
        }
        if self.layers.len() < 3 {
            return Err(Error::Config("architecture too shallow".into()));
        }
        let n_pool = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::StatsPooling)
            .count();
        if n_pool != 1 {
            return Err(Error::Config(format!(
                "expected exactly one stats_pooling layer, found {n_pool}"
            )));
        }
        let pool_idx = self
            .layers
            .iter()
            .position(|l| l.kind == LayerKind::StatsPooling)
            .expect("counted above");
        let last = self.layers.len() - 1;
        if !self.layers[last].kind.is_head() {
            return Err(Error::Config("last layer must be a training head".into()));
        }
        if self.layers[..last].iter().any(|l| l.kind.is_head()) {
            return Err(Error::Config("training head before the end".into()));
        }
        if self.layers[last].size != self.num_speakers {
            return Err(Error::Config("head size must equal num_speakers".into()));
        }
        let emb = self.embedding_layer_index;
        if emb <= pool_idx || emb >= last || self.layers[emb].kind != LayerKind::Dense {
            return Err(Error::Config(
                "embedding layer must be a dense layer between pooling and the head".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let ctx_ok = match layer.kind {
                LayerKind::Tdnn => {
                    !layer.context_factor1.is_empty() && layer.context_factor2.is_empty()
                }
                LayerKind::Ftdnn => {
                    !layer.context_factor1.is_empty() && !layer.context_factor2.is_empty()
                }
                _ => layer.context_factor1.is_empty() && layer.context_factor2.is_empty()
                    || layer.kind == LayerKind::MfmTdnnResblock,
            };
            if !ctx_ok {
                return Err(Error::Config(format!("layer {i}: bad context lists")));
            }
            if (layer.inner_size.is_some()) != (layer.kind == LayerKind::Ftdnn) {
                return Err(Error::Config(format!(
                    "layer {i}: inner_size is required exactly for factorized layers"
                )));
            }
            if let Some(from) = layer.skip_from {
                if layer.kind != LayerKind::Ftdnn {
                    return Err(Error::Config(format!(
                        "layer {i}: skip connections only apply to factorized layers"
                    )));
                }
                if from >= i {
                    return Err(Error::Config(format!(
                        "layer {i}: skip_from {from} must reference an earlier layer"
                    )));
                }
                if i > pool_idx || from > pool_idx {
                    return Err(Error::Config(format!(
                        "layer {i}: skips must stay before pooling"
                    )));
                }
            }
            match layer.kind {
                LayerKind::LstmP => {
                    let dims = layer.lstm.as_ref().ok_or_else(|| {
                        Error::Config(format!("layer {i}: missing lstm dims"))
                    })?;
                    if dims.delay >= 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: recurrent delay must be negative"
                        )));
                    }
                    if dims.cell_dim == 0 || dims.recurrent_proj == 0 {
                        return Err(Error::Config(format!("layer {i}: zero lstm dims")));
                    }
                    if layer.size != dims.recurrent_proj + dims.nonrecurrent_proj {
                        return Err(Error::Config(format!(
                            "layer {i}: size must be recurrent_proj + nonrecurrent_proj"
                        )));
                    }
                }
                LayerKind::MfmTdnnResblock => {
                    if layer.f.is_none_or(|f| f == 0) {
                        return Err(Error::Config(format!(
                            "layer {i}: residual blocks need a width multiplier"
                        )));
                    }
                }
                _ => {
                    if layer.lstm.is_some() {
                        return Err(Error::Config(format!("layer {i}: stray lstm dims")));
                    }
                    if layer.f.is_some() {
                        return Err(Error::Config(format!("layer {i}: stray width multiplier")));
                    }
                }
            }
            if layer.kind != LayerKind::StatsPooling && layer.size == 0 {
                return Err(Error::Config(format!("layer {i}: zero output size")));
            }
            let sequential = matches!(
                layer.kind,
                LayerKind::Tdnn | LayerKind::Ftdnn | LayerKind::LstmP | LayerKind::MfmTdnnResblock
            );
            if sequential && i > pool_idx {
                return Err(Error::Config(format!(
                    "layer {i}: frame-level layer after pooling"
                )));
            }
        }
        Ok(())
    }

    /// Total frames removed between input and pooling.
    pub fn total_shrink(&self) -> usize {
        self.layers.iter().map(LayerSpec::shrink).sum()
    }

    /// Shortest input the network accepts.
    pub fn min_input_frames(&self) -> usize {
        self.total_shrink() + 1
    }

    pub fn pooling_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::StatsPooling)
            .expect("validated architectures have a pooling layer")
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.embedding_layer_index].size
    }

    fn finish(name: &str, input_dim: usize, num_speakers: usize, mut layers: Vec<LayerSpec>, head: LayerKind) -> ArchSpec {
        let pool_at = layers.len();
        layers.push(LayerSpec::stats_pooling());
        let emb = layers.len();
        layers.push(LayerSpec::dense(512));
        layers.push(LayerSpec::dense(512));
        layers.push(LayerSpec::head(head, num_speakers));
        let _ = pool_at;
        ArchSpec {
            name: name.to_string(),
            input_dim,
            num_speakers,
            layers,
            embedding_layer_index: emb,
        }
    }

    pub fn xvec_tdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        let layers = vec![
            LayerSpec::tdnn(&[-2, -1, 0, 1, 2], 512),
            LayerSpec::tdnn(&[-2, 0, 2], 512),
            LayerSpec::tdnn(&[-3, 0, 3], 512),
            LayerSpec::tdnn(&[0], 512),
            LayerSpec::tdnn(&[0], 1500),
        ];
        Self::finish("Xvec-TDNN", input_dim, num_speakers, layers, LayerKind::SoftmaxHead)
    }

    pub fn xvec_tdnn_lstm(input_dim: usize, num_speakers: usize) -> ArchSpec {
        let mut arch = Self::xvec_tdnn(input_dim, num_speakers);
        arch.name = "Xvec-TDNN-LSTM".into();
        arch.layers[3] = LayerSpec::lstm_p(512, -3, 256, 256);
        arch
    }

    pub fn xvec_ext_tdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        let layers = vec![
            LayerSpec::tdnn(&[-2, -1, 0, 1, 2], 512),
            LayerSpec::tdnn(&[0], 512),
            LayerSpec::tdnn(&[-2, 0, 2], 512),
            LayerSpec::tdnn(&[0], 512),
            LayerSpec::tdnn(&[-3, 0, 3], 512),
            LayerSpec::tdnn(&[0], 512),
            LayerSpec::tdnn(&[-4, 0, 4], 512),
            LayerSpec::tdnn(&[0], 512),
            LayerSpec::tdnn(&[0], 512),
            LayerSpec::tdnn(&[0], 1500),
        ];
        Self::finish("Xvec-Ext-TDNN", input_dim, num_speakers, layers, LayerKind::SoftmaxHead)
    }

    pub fn xvec_ext_tdnn_lstm(input_dim: usize, num_speakers: usize) -> ArchSpec {
        let mut arch = Self::xvec_ext_tdnn(input_dim, num_speakers);
        arch.name = "Xvec-Ext-TDNN-LSTM".into();
        arch.layers[8] = LayerSpec::lstm_p(512, -3, 256, 256);
        arch
    }

    pub fn xvec_ftdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        let layers = vec![
            LayerSpec::tdnn(&[-2, -1, 0, 1, 2], 512),
            LayerSpec::ftdnn(&[-2, 0], &[2, 0], 256, 512),
            LayerSpec::ftdnn(&[0], &[0], 256, 512),
            LayerSpec::ftdnn(&[-3, 0], &[-3, 0], 256, 512),
            LayerSpec::ftdnn_skip(&[0], &[0], 256, 512, 2),
            LayerSpec::ftdnn(&[-3, 0], &[3, 0], 256, 512),
            LayerSpec::ftdnn_skip(&[0], &[0], 256, 512, 4),
            LayerSpec::ftdnn_skip(&[-3, 0], &[3, 0], 256, 512, 3),
            LayerSpec::ftdnn(&[0], &[0], 256, 512),
            LayerSpec::tdnn(&[0], 1536),
        ];
        Self::finish("Xvec-FTDNN", input_dim, num_speakers, layers, LayerKind::SoftmaxHead)
    }

    fn cvec(name: &str, input_dim: usize, num_speakers: usize, n_blocks: usize, f: usize) -> ArchSpec {
        let mut layers = vec![LayerSpec::tdnn(&[-1, 0, 1], 64)];
        for _ in 0..n_blocks {
            layers.push(LayerSpec::resblock(64, f));
        }
        layers.push(LayerSpec::tdnn(&[0], 512));
        Self::finish(name, input_dim, num_speakers, layers, LayerKind::AsoftmaxHead)
    }

    pub fn cvec_res_tdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        Self::cvec("Cvec-ResTDNN", input_dim, num_speakers, 20, 1)
    }

    pub fn cvec_ext_res_tdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        Self::cvec("Cvec-ExtResTDNN", input_dim, num_speakers, 20, 2)
    }

    pub fn cvec_wide_res_tdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        Self::cvec("Cvec-Wide-ResTDNN", input_dim, num_speakers, 20, 4)
    }

    pub fn cvec_wide_ext_res_tdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        Self::cvec("Cvec-Wide-ExtResTDNN", input_dim, num_speakers, 24, 5)
    }

    /// Shrunken x-vector for smoke tests and the bundled demo corpus.
    pub fn mini_xvec_tdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        let layers = vec![
            LayerSpec::tdnn(&[-1, 0, 1], 48),
            LayerSpec::tdnn(&[-2, 0, 2], 48),
            LayerSpec::tdnn(&[0], 96),
            LayerSpec::stats_pooling(),
            LayerSpec::dense(64),
            LayerSpec::dense(64),
            LayerSpec::head(LayerKind::SoftmaxHead, num_speakers),
        ];
        ArchSpec {
            name: "Mini-Xvec-TDNN".into(),
            input_dim,
            num_speakers,
            layers,
            embedding_layer_index: 4,
        }
    }

    /// Shrunken factorized variant exercising skips and both context stages.
    pub fn mini_xvec_ftdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        let layers = vec![
            LayerSpec::tdnn(&[-1, 0, 1], 48),
            LayerSpec::ftdnn(&[-1, 0], &[1, 0], 24, 48),
            LayerSpec::ftdnn_skip(&[0], &[0], 24, 48, 0),
            LayerSpec::tdnn(&[0], 96),
            LayerSpec::stats_pooling(),
            LayerSpec::dense(64),
            LayerSpec::dense(64),
            LayerSpec::head(LayerKind::SoftmaxHead, num_speakers),
        ];
        ArchSpec {
            name: "Mini-Xvec-FTDNN".into(),
            input_dim,
            num_speakers,
            layers,
            embedding_layer_index: 5,
        }
    }

    /// Shrunken residual-block variant with MFM activations.
    pub fn mini_cvec_res_tdnn(input_dim: usize, num_speakers: usize) -> ArchSpec {
        let mut layers = vec![LayerSpec::tdnn(&[-1, 0, 1], 32)];
        for _ in 0..4 {
            layers.push(LayerSpec::resblock(32, 2));
        }
        layers.push(LayerSpec::tdnn(&[0], 96));
        layers.push(LayerSpec::stats_pooling());
        layers.push(LayerSpec::dense(64));
        layers.push(LayerSpec::dense(64));
        layers.push(LayerSpec::head(LayerKind::AsoftmaxHead, num_speakers));
        ArchSpec {
            name: "Mini-Cvec-ResTDNN".into(),
            input_dim,
            num_speakers,
            layers,
            embedding_layer_index: 7,
        }
    }

    /// Full-size preset names.
    pub fn zoo() -> &'static [&'static str] {
        &[
            "Xvec-TDNN",
            "Xvec-TDNN-LSTM",
            "Xvec-Ext-TDNN",
            "Xvec-Ext-TDNN-LSTM",
            "Xvec-FTDNN",
            "Cvec-ResTDNN",
            "Cvec-ExtResTDNN",
            "Cvec-Wide-ResTDNN",
            "Cvec-Wide-ExtResTDNN",
        ]
    }

    pub fn preset(name: &str, input_dim: usize, num_speakers: usize) -> Option<ArchSpec> {
        let arch = match name {
            "Xvec-TDNN" => Self::xvec_tdnn(input_dim, num_speakers),
            "Xvec-TDNN-LSTM" => Self::xvec_tdnn_lstm(input_dim, num_speakers),
            "Xvec-Ext-TDNN" => Self::xvec_ext_tdnn(input_dim, num_speakers),
            "Xvec-Ext-TDNN-LSTM" => Self::xvec_ext_tdnn_lstm(input_dim, num_speakers),
            "Xvec-FTDNN" => Self::xvec_ftdnn(input_dim, num_speakers),
            "Cvec-ResTDNN" => Self::cvec_res_tdnn(input_dim, num_speakers),
            "Cvec-ExtResTDNN" => Self::cvec_ext_res_tdnn(input_dim, num_speakers),
            "Cvec-Wide-ResTDNN" => Self::cvec_wide_res_tdnn(input_dim, num_speakers),
            "Cvec-Wide-ExtResTDNN" => Self::cvec_wide_ext_res_tdnn(input_dim, num_speakers),
            "Mini-Xvec-TDNN" => Self::mini_xvec_tdnn(input_dim, num_speakers),
            "Mini-Xvec-FTDNN" => Self::mini_xvec_ftdnn(input_dim, num_speakers),
            "Mini-Cvec-ResTDNN" => Self::mini_cvec_res_tdnn(input_dim, num_speakers),
            _ => return None,
        };
        Some(arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_embed_at_512() {
        for name in ArchSpec::zoo() {
            let arch = ArchSpec::preset(name, 40, 100).unwrap();
            arch.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(arch.embedding_dim(), 512, "{name}");
            assert_eq!(arch.name, *name);
        }
    }

    #[test]
    fn shrink_bookkeeping_matches_context_extents() {
        let cases = [
            ("Xvec-TDNN", 4 + 4 + 6),
            ("Xvec-TDNN-LSTM", 4 + 4 + 6),
            ("Xvec-Ext-TDNN", 4 + 4 + 6 + 8),
            ("Xvec-Ext-TDNN-LSTM", 4 + 4 + 6 + 8),
            ("Xvec-FTDNN", 4 + 4 + 6 + 6 + 6),
            ("Cvec-ResTDNN", 2),
        ];
        for (name, want) in cases {
            let arch = ArchSpec::preset(name, 40, 50).unwrap();
            assert_eq!(arch.total_shrink(), want, "{name}");
            assert_eq!(arch.min_input_frames(), want + 1, "{name}");
        }
    }

    #[test]
    fn factorized_layer_shrinks_by_both_stages() {
        let layer = LayerSpec::ftdnn(&[-2, 0], &[2, 0], 256, 512);
        assert_eq!(layer.shrink(), 4);
        let layer = LayerSpec::ftdnn(&[0], &[0], 256, 512);
        assert_eq!(layer.shrink(), 0);
    }

    #[test]
    fn validation_catches_structural_errors() {
        let mut arch = ArchSpec::mini_xvec_tdnn(24, 5);
        arch.validate().unwrap();

        let mut bad = arch.clone();
        bad.embedding_layer_index = 2;
        assert!(bad.validate().is_err(), "embedding before pooling");

        let mut bad = arch.clone();
        bad.layers[1].kind = LayerKind::StatsPooling;
        bad.layers[1].context_factor1.clear();
        assert!(bad.validate().is_err(), "two pooling layers");

        let mut bad = arch.clone();
        bad.layers.last_mut().unwrap().size = 7;
        assert!(bad.validate().is_err(), "head size != num_speakers");

        let bad_skip = ArchSpec {
            layers: {
                let mut layers = ArchSpec::mini_xvec_ftdnn(24, 5).layers;
                layers[2].skip_from = Some(2);
                layers
            },
            ..ArchSpec::mini_xvec_ftdnn(24, 5)
        };
        assert!(bad_skip.validate().is_err(), "self-referential skip");

        arch.layers[0].lstm = Some(LstmDims {
            cell_dim: 8,
            delay: -1,
            recurrent_proj: 4,
            nonrecurrent_proj: 4,
        });
        assert!(arch.validate().is_err(), "stray lstm dims");
    }

    #[test]
    fn serde_roundtrip_preserves_spec() {
        let arch = ArchSpec::xvec_ftdnn(40, 1000);
        let json = serde_json::to_string(&arch).unwrap();
        let back: ArchSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(arch, back);
    }
}
