//! Cosine scoring and a discriminatively trained linear transform under
//! which cosine similarity separates speakers better, trained with a
//! within-batch hardest-negative triplet hinge.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng_from_seed};

const MAGIC: &[u8; 4] = b"SVCB";
const VERSION: u32 = 1;

pub fn cosine_score(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine of a zero-norm embedding".into()));
    }
    Ok(u.dot(&v) / (nu * nv))
}

#[derive(Debug, Clone)]
pub struct CsmlModel {
    pub a: Array2<f64>,
    pub margin: f64,
    pub seed: u64,
}

impl CsmlModel {
    pub fn identity(dim: usize) -> Self {
        CsmlModel { a: Array2::eye(dim), margin: 0.0, seed: 0 }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn score(&self, u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
        if u.len() != self.dim() || v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "transform is {}x{}, embeddings are {} and {}",
                self.a.nrows(),
                self.a.ncols(),
                u.len(),
                v.len()
            )));
        }
        let tu = self.a.dot(&u);
        let tv = self.a.dot(&v);
        cosine_score(tu.view(), tv.view())
    }

    /// The stored transform is only what scoring needs; margin and seed are
    /// training-time settings and reset to defaults on load.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ContainerWriter::new(MAGIC, VERSION);
        w.put_u32(self.dim() as u32);
        let flat: Vec<f32> = self.a.iter().map(|&v| v as f32).collect();
        w.put_f32_slice(&flat);
        w.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = ContainerReader::open(path, MAGIC, VERSION)?;
        let dim = r.get_u32()? as usize;
        if dim == 0 {
            return Err(Error::container(r.path(), "zero transform dim"));
        }
        let flat = r.get_f32_vec(dim * dim)?;
        r.finish()?;
        let a = Array2::from_shape_vec((dim, dim), flat.iter().map(|&v| v as f64).collect())
            .expect("length checked");
        Ok(CsmlModel { a, margin: 0.0, seed: 0 })
    }
}

fn default_margin() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    0.01
}
fn default_decay() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    20
}
fn default_p() -> usize {
    8
}
fn default_k() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsmlTrainConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Learning-rate factor applied when an epoch fails to improve the loss.
    #[serde(default = "default_decay")]
    pub plateau_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Speakers per batch.
    #[serde(default = "default_p")]
    pub speakers_per_batch: usize,
    /// Utterances per speaker per batch.
    #[serde(default = "default_k")]
    pub utts_per_speaker: usize,
}

impl Default for CsmlTrainConfig {
    fn default() -> Self {
        CsmlTrainConfig {
            margin: default_margin(),
            learning_rate: default_lr(),
            plateau_decay: default_decay(),
            epochs: default_epochs(),
            speakers_per_batch: default_p(),
            utts_per_speaker: default_k(),
        }
    }
}

impl CsmlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config("triplet margin must be positive".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.plateau_decay) || self.plateau_decay == 0.0 {
            return Err(Error::Config("plateau decay must be in (0, 1]".into()));
        }
        if self.speakers_per_batch < 2 || self.utts_per_speaker < 2 {
            return Err(Error::Config(
                "triplet batches need >= 2 speakers and >= 2 utterances each".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LabeledEmbedding {
    pub speaker: String,
    pub vector: Array1<f64>,
}

struct Transformed {
    t: Array2<f64>,
    norms: Array1<f64>,
}

fn transform_batch(a: &Array2<f64>, batch: &[&LabeledEmbedding]) -> Transformed {
    let dim = a.nrows();
    let mut t = Array2::zeros((batch.len(), dim));
    let mut norms = Array1::zeros(batch.len());
    for (i, e) in batch.iter().enumerate() {
        let tv = a.dot(&e.vector);
        norms[i] = tv.dot(&tv).sqrt().max(1e-12);
        t.row_mut(i).assign(&tv);
    }
    Transformed { t, norms }
}

fn pair_cos(tr: &Transformed, i: usize, j: usize) -> f64 {
    tr.t.row(i).dot(&tr.t.row(j)) / (tr.norms[i] * tr.norms[j])
}

/// d cos(p, q) / dp with p = t[i], q = t[j].
fn dcos_dp(tr: &Transformed, i: usize, j: usize) -> Array1<f64> {
    let c = pair_cos(tr, i, j);
    let p = tr.t.row(i);
    let q = tr.t.row(j);
    q.mapv(|v| v / (tr.norms[i] * tr.norms[j])) - p.mapv(|v| c * v / (tr.norms[i] * tr.norms[i]))
}

/// Hinge loss and its gradient in A over one batch, averaged over every
/// (anchor, positive) pair with the hardest in-batch negative.
fn batch_loss_grad(
    a: &Array2<f64>,
    batch: &[&LabeledEmbedding],
    margin: f64,
) -> (f64, Array2<f64>, usize) {
    let tr = transform_batch(a, batch);
    let n = batch.len();
    let mut loss = 0.0;
    let mut grad = Array2::zeros(a.raw_dim());
    let mut n_triplets = 0usize;

    for anchor in 0..n {
        let mut hardest: Option<(usize, f64)> = None;
        for neg in 0..n {
            if batch[neg].speaker == batch[anchor].speaker {
                continue;
            }
            let c = pair_cos(&tr, anchor, neg);
            if hardest.map(|(_, best)| c > best).unwrap_or(true) {
                hardest = Some((neg, c));
            }
        }
        let (neg, neg_cos) = match hardest {
            Some(h) => h,
            None => continue,
        };
        for pos in 0..n {
            if pos == anchor || batch[pos].speaker != batch[anchor].speaker {
                continue;
            }
            n_triplets += 1;
            let pos_cos = pair_cos(&tr, anchor, pos);
            let h = margin - pos_cos + neg_cos;
            if h <= 0.0 {
                continue;
            }
            loss += h;
            // dL/dt accumulated per participant, then dL/dA = dL/dt . xᵀ.
            let da = dcos_dp(&tr, anchor, neg) - dcos_dp(&tr, anchor, pos);
            let dp = dcos_dp(&tr, pos, anchor).mapv(|v| -v);
            let dn = dcos_dp(&tr, neg, anchor);
            for (row_grad, idx) in [(da, anchor), (dp, pos), (dn, neg)] {
                let x = &batch[idx].vector;
                for r in 0..grad.nrows() {
                    let g = row_grad[r];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..grad.ncols() {
                        grad[[r, c]] += g * x[c];
                    }
                }
            }
        }
    }
    if n_triplets > 0 {
        let inv = 1.0 / n_triplets as f64;
        loss *= inv;
        grad.mapv_inplace(|v| v * inv);
    }
    (loss, grad, n_triplets)
}

/// Mean triplet hinge loss over all batches without updating the transform.
pub fn csml_eval_loss(
    a: &Array2<f64>,
    by_speaker: &[(String, Vec<Array1<f64>>)],
    margin: f64,
) -> f64 {
    let all: Vec<LabeledEmbedding> = by_speaker
        .iter()
        .flat_map(|(spk, vs)| {
            vs.iter().map(|v| LabeledEmbedding { speaker: spk.clone(), vector: v.clone() })
        })
        .collect();
    let refs: Vec<&LabeledEmbedding> = all.iter().collect();
    let (loss, _, n) = batch_loss_grad(a, &refs, margin);
    if n == 0 {
        0.0
    } else {
        loss
    }
}

fn group_by_speaker(embeddings: &[LabeledEmbedding]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, e) in embeddings.iter().enumerate() {
        match groups.iter_mut().find(|(s, _)| *s == e.speaker) {
            Some((_, idxs)) => idxs.push(i),
            None => groups.push((e.speaker.clone(), vec![i])),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    groups
}

/// Trains the transform from identity. Deterministic under the seed.
pub fn train_csml(
    embeddings: &[LabeledEmbedding],
    cfg: &CsmlTrainConfig,
    seed: u64,
) -> Result<CsmlModel> {
    cfg.validate()?;
    if embeddings.is_empty() {
        return Err(Error::Empty("backend training embeddings".into()));
    }
    let dim = embeddings[0].vector.len();
    if embeddings.iter().any(|e| e.vector.len() != dim) {
        return Err(Error::Shape("embeddings have mixed dims".into()));
    }
    let groups = group_by_speaker(embeddings);
    let usable: Vec<&(String, Vec<usize>)> = groups.iter().filter(|(_, v)| v.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(Error::Config(
            "triplet training needs >= 2 speakers with >= 2 utterances each".into(),
        ));
    }

    let mut a = Array2::eye(dim);
    let mut lr = cfg.learning_rate;
    let mut best_loss = f64::INFINITY;
    let mut rng = rng_from_seed(derive_seed(seed, "csml"));

    for _epoch in 0..cfg.epochs {
        // Sample speaker groups, then utterances within each, per batch.
        let mut speaker_order: Vec<usize> = (0..usable.len()).collect();
        speaker_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_triplets = 0usize;

        for chunk in speaker_order.chunks(cfg.speakers_per_batch) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch: Vec<&LabeledEmbedding> = Vec::new();
            for &g in chunk {
                let idxs = &usable[g].1;
                let mut order = idxs.clone();
                order.shuffle(&mut rng);
                for &i in order.iter().take(cfg.utts_per_speaker) {
                    batch.push(&embeddings[i]);
                }
            }
            let (loss, grad, n_triplets) = batch_loss_grad(&a, &batch, cfg.margin);
            if n_triplets == 0 {
                continue;
            }
            ndarray::Zip::from(&mut a).and(&grad).for_each(|av, &g| {
                *av -= lr * g;
            });
            epoch_loss += loss * n_triplets as f64;
            epoch_triplets += n_triplets;
        }
        if epoch_triplets == 0 {
            continue;
        }
        let mean_loss = epoch_loss / epoch_triplets as f64;
        if mean_loss + 1e-9 >= best_loss {
            lr *= cfg.plateau_decay;
        } else {
            best_loss = mean_loss;
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("backend training diverged".into()));
        }
    }
    Ok(CsmlModel { a, margin: cfg.margin, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Array1<f64> {
        Array1::from_vec(v)
    }

    #[test]
    fn cosine_basics() {
        let u = unit(vec![1.0, 0.0, 2.0]);
        assert!((cosine_score(u.view(), u.view()).unwrap() - 1.0).abs() < 1e-12);
        let v = unit(vec![0.0, 3.0, 0.0]);
        assert!(cosine_score(u.view(), v.view()).unwrap().abs() < 1e-12);
        let u2 = u.mapv(|x| 2.0 * x);
        assert!((cosine_score(u.view(), u2.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_score(u.view(), unit(vec![0.0, 0.0, 0.0]).view()).is_err());
        assert!(cosine_score(u.view(), unit(vec![1.0, 2.0]).view()).is_err());
    }

    #[test]
    fn identity_and_scaled_identity_match_cosine() {
        let mut rng = rng_from_seed(31);
        for _ in 0..10 {
            let u = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            let v = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            let id = CsmlModel::identity(6);
            let plain = cosine_score(u.view(), v.view()).unwrap();
            assert!((id.score(u.view(), v.view()).unwrap() - plain).abs() < 1e-12);
            let scaled = CsmlModel { a: Array2::eye(6) * 3.5, margin: 0.0, seed: 0 };
            assert!((scaled.score(u.view(), v.view()).unwrap() - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_matches_two_step_oracle_and_is_symmetric() {
        let mut rng = rng_from_seed(32);
        let a = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let model = CsmlModel { a: a.clone(), margin: 0.2, seed: 0 };
        for _ in 0..10 {
            let u = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
            let v = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
            let tu = a.dot(&u);
            let tv = a.dot(&v);
            let oracle = tu.dot(&tv) / (tu.dot(&tu).sqrt() * tv.dot(&tv).sqrt());
            let got = model.score(u.view(), v.view()).unwrap();
            assert!((got - oracle).abs() < 1e-12);
            let rev = model.score(v.view(), u.view()).unwrap();
            assert!((got - rev).abs() < 1e-12);
            // Positive rescaling of A or either input changes nothing.
            let model2 = CsmlModel { a: a.mapv(|x| 2.0 * x), margin: 0.2, seed: 0 };
            assert!((model2.score(u.view(), v.view()).unwrap() - got).abs() < 1e-12);
            let u3 = u.mapv(|x| 3.0 * x);
            assert!((model.score(u3.view(), v.view()).unwrap() - got).abs() < 1e-12);
        }
    }

    fn gaussian_clusters(
        n_speakers: usize,
        n_per: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    ) -> Vec<LabeledEmbedding> {
        let mut rng = rng_from_seed(seed);
        let mut out = Vec::new();
        for s in 0..n_speakers {
            let center = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
            for _ in 0..n_per {
                let v = &center
                    + &Array1::from_shape_fn(dim, |_| rng.random_range(-spread..spread));
                out.push(LabeledEmbedding { speaker: format!("spk{s}"), vector: v });
            }
        }
        out
    }

    #[test]
    fn zero_learning_rate_returns_exact_identity() {
        let data = gaussian_clusters(3, 4, 6, 0.5, 33);
        let cfg = CsmlTrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            speakers_per_batch: 2,
            utts_per_speaker: 2,
            ..CsmlTrainConfig::default()
        };
        let model = train_csml(&data, &cfg, 1).unwrap();
        assert_eq!(model.a, Array2::<f64>::eye(6));
    }

    #[test]
    fn separated_clusters_have_inactive_hinge() {
        // Orthogonal, tight clusters: all triplets already satisfy the
        // margin, so gradients vanish and A stays identity.
        let mut data = Vec::new();
        for s in 0..3 {
            for k in 0..3 {
                let mut v = Array1::zeros(6);
                v[s] = 10.0;
                v[3 + s] = 0.01 * k as f64;
                data.push(LabeledEmbedding { speaker: format!("spk{s}"), vector: v });
            }
        }
        let cfg = CsmlTrainConfig {
            epochs: 2,
            speakers_per_batch: 3,
            utts_per_speaker: 3,
            margin: 0.2,
            ..CsmlTrainConfig::default()
        };
        let model = train_csml(&data, &cfg, 2).unwrap();
        for (got, want) in model.a.iter().zip(Array2::<f64>::eye(6).iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(34);
        let data = gaussian_clusters(3, 3, 4, 0.8, 35);
        let refs: Vec<&LabeledEmbedding> = data.iter().collect();
        let mut a = Array2::eye(4) + Array2::from_shape_fn((4, 4), |_| rng.random_range(-0.1..0.1));
        let (_, grad, n) = batch_loss_grad(&a, &refs, 0.4);
        assert!(n > 0);
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..4 {
                let orig = a[[r, c]];
                a[[r, c]] = orig + h;
                let (up, _, _) = batch_loss_grad(&a, &refs, 0.4);
                a[[r, c]] = orig - h;
                let (dn, _, _) = batch_loss_grad(&a, &refs, 0.4);
                a[[r, c]] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grad[[r, c]];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(rel < 1e-4, "A[{r},{c}]: fd {fd} vs an {an}");
            }
        }
    }

    /// Train and held-out draws around shared speaker centers.
    fn split_clusters(
        n_speakers: usize,
        n_train: usize,
        n_held: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    ) -> (Vec<LabeledEmbedding>, Vec<LabeledEmbedding>) {
        let mut rng = rng_from_seed(seed);
        let mut train = Vec::new();
        let mut held = Vec::new();
        for s in 0..n_speakers {
            let center = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
            for (count, out) in [(n_train, &mut train), (n_held, &mut held)] {
                for _ in 0..count {
                    let v = &center
                        + &Array1::from_shape_fn(dim, |_| rng.random_range(-spread..spread));
                    out.push(LabeledEmbedding { speaker: format!("spk{s}"), vector: v });
                }
            }
        }
        (train, held)
    }

    #[test]
    fn training_reduces_held_out_loss_and_separation() {
        let (train, held) = split_clusters(6, 6, 6, 8, 0.9, 36);
        let by_spk: Vec<(String, Vec<Array1<f64>>)> = {
            let mut m: Vec<(String, Vec<Array1<f64>>)> = Vec::new();
            for e in &held {
                match m.iter_mut().find(|(s, _)| *s == e.speaker) {
                    Some((_, v)) => v.push(e.vector.clone()),
                    None => m.push((e.speaker.clone(), vec![e.vector.clone()])),
                }
            }
            m
        };
        let cfg = CsmlTrainConfig {
            epochs: 40,
            speakers_per_batch: 6,
            utts_per_speaker: 6,
            learning_rate: 0.02,
            ..CsmlTrainConfig::default()
        };
        let model = train_csml(&train, &cfg, 3).unwrap();
        let before = csml_eval_loss(&Array2::eye(8), &by_spk, cfg.margin);
        let after = csml_eval_loss(&model.a, &by_spk, cfg.margin);
        assert!(
            after <= before,
            "held-out loss went up: {before} -> {after}"
        );
    }

    #[test]
    fn degenerate_labelings_are_rejected() {
        let one = gaussian_clusters(1, 5, 4, 0.5, 38);
        assert!(train_csml(&one, &CsmlTrainConfig::default(), 1).is_err());
        let singletons = gaussian_clusters(4, 1, 4, 0.5, 39);
        assert!(train_csml(&singletons, &CsmlTrainConfig::default(), 1).is_err());
        assert!(train_csml(&[], &CsmlTrainConfig::default(), 1).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backend.svcb");
        let mut rng = rng_from_seed(40);
        let a = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
        let model = CsmlModel { a, margin: 0.2, seed: 9 };
        model.save(&path).unwrap();
        let loaded = CsmlModel::load(&path).unwrap();
        assert_eq!(loaded.dim(), 6);
        for (x, y) in model.a.iter().zip(loaded.a.iter()) {
            assert_eq!(*x as f32, *y as f32);
        }
        let again = dir.path().join("again.svcb");
        loaded.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn same_seed_reproduces_transform() {
        let data = gaussian_clusters(4, 4, 5, 0.7, 41);
        let cfg = CsmlTrainConfig {
            epochs: 5,
            speakers_per_batch: 3,
            utts_per_speaker: 2,
            ..CsmlTrainConfig::default()
        };
        let m1 = train_csml(&data, &cfg, 7).unwrap();
        let m2 = train_csml(&data, &cfg, 7).unwrap();
        for (x, y) in m1.a.iter().zip(m2.a.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
