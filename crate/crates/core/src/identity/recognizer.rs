//! Toy face recognizer: an MLP embedding trained with a large-margin cosine loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::attention::linear;
use crate::model::{Binder, ParamGroup, ParamStore};
use crate::rng::{normal_vec, stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::optim::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognizerRole {
    /// Feeds the identity encoder.
    EncoderA,
    /// Used only for evaluation metrics.
    EvalB,
}

impl RecognizerRole {
    pub fn purpose(self) -> &'static str {
        match self {
            RecognizerRole::EncoderA => "recognizer.encoder_a",
            RecognizerRole::EvalB => "recognizer.eval_b",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cosine logit scale.
    pub scale: f64,
    pub margin: f64,
    /// Std of additive pixel noise during training.
    pub noise: f64,
    pub accuracy_gate: f64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            input_dim: 16 * 16 * 3,
            hidden: vec![128, 64],
            feature_dim: 32,
            steps: 1500,
            batch: 64,
            lr: 2e-3,
            scale: 16.0,
            margin: 0.2,
            noise: 0.03,
            accuracy_gate: 0.9,
        }
    }
}

/// A labeled training image.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: usize,
}

/// Embedding of flattened images `[M × input_dim]` through `facenet.*`, L2-normalized.
pub fn facenet_forward(tape: &mut Tape, b: &mut Binder, x: Var, layers: usize) -> Result<Var> {
    let mut h = x;
    for l in 0..layers {
        let w = b.get(tape, &format!("facenet.l{l}.weight"))?;
        let bias = b.get(tape, &format!("facenet.l{l}.bias"))?;
        h = linear(tape, h, w, bias)?;
        if l + 1 < layers {
            h = tape.gelu(h)?;
        }
    }
    tape.l2_normalize_rows(h)
}

/// Number of `facenet.l*` layers present in a store.
pub fn facenet_layers(store: &ParamStore) -> usize {
    (0..).take_while(|l| store.contains(&format!("facenet.l{l}.weight"))).count()
}

pub fn flatten_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("no images".into()))?;
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::shape("flatten_images", "images do not share extents"));
    }
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for i in images {
        data.extend_from_slice(i.data());
    }
    Tensor::new(vec![images.len(), first.numel()], data)
}

/// Feature rows for `images` using the `facenet.*` parameters in `store`.
pub fn extract_face_features(store: &ParamStore, images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Invalid("extract_face_features needs at least one image".into()));
    }
    let mut tape = Tape::new();
    let mut b = Binder::frozen(store);
    let x = tape.constant(flatten_images(images)?);
    let out = facenet_forward(&mut tape, &mut b, x, facenet_layers(store))?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recognizer {
    pub role: RecognizerRole,
    pub seed: u64,
    pub config: RecognizerConfig,
    /// `facenet.*` plus the training-only `head.weight`.
    pub params: ParamStore,
    pub holdout_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecognizerMeta {
    role: RecognizerRole,
    seed: u64,
    config: RecognizerConfig,
    holdout_accuracy: f64,
}

impl Recognizer {
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let meta = RecognizerMeta {
            role: self.role,
            seed: self.seed,
            config: self.config.clone(),
            holdout_accuracy: self.holdout_accuracy,
        };
        crate::model::save_checkpoint(dir, &meta, &self.params)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (m, params): (RecognizerMeta, _) = crate::model::load_checkpoint(dir)?;
        Ok(Recognizer { role: m.role, seed: m.seed, config: m.config, params, holdout_accuracy: m.holdout_accuracy })
    }

    pub fn embed(&self, images: &[&Tensor]) -> Result<Tensor> {
        extract_face_features(&self.params, images)
    }

    /// Only the embedding network, as copied into a PVA model.
    pub fn facenet(&self) -> ParamStore {
        self.params.subset(&[ParamGroup::IdEncoderFacenet])
    }

    /// Nearest class by cosine to the normalized head weights.
    pub fn classify(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        let e = self.embed(images)?;
        let head = normalize_rows(self.params.get("head.weight")?);
        let mut out = Vec::with_capacity(images.len());
        for i in 0..e.rows() {
            let row = e.row(i);
            let best = (0..head.rows())
                .map(|c| (c, dot(row, head.row(c))))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            out.push(best.0);
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut d = t.data().to_vec();
    for r in d.chunks_mut(c) {
        let n = dot(r, r).sqrt().max(1e-12);
        r.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(t.shape().to_vec(), d).expect("normalized rows stay finite")
}

pub fn init_facenet(cfg: &RecognizerConfig, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    let mut dims = vec![cfg.input_dim];
    dims.extend(&cfg.hidden);
    dims.push(cfg.feature_dim);
    for (l, w) in dims.windows(2).enumerate() {
        s.insert(format!("facenet.l{l}.weight"), Tensor::randn(&[w[0], w[1]], (1.0 / w[0] as f64).sqrt(), rng));
        s.insert(format!("facenet.l{l}.bias"), Tensor::zeros(&[w[1]]));
    }
    s
}

fn augment(img: &Tensor, noise: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let base = if rng.random_bool(0.5) { img.flip_horizontal()? } else { img.clone() };
    let z = normal_vec(rng, base.numel());
    Tensor::new(base.shape().to_vec(), base.data().iter().zip(z).map(|(v, e)| v + noise * e).collect())
}

/// Trains a recognizer over `n_classes` identities and enforces the held-out
/// accuracy gate.
pub fn train_recognizer(
    role: RecognizerRole,
    train: &[LabeledImage],
    holdout: &[LabeledImage],
    n_classes: usize,
    cfg: &RecognizerConfig,
    seed: u64,
) -> Result<Recognizer> {
    if train.is_empty() || holdout.is_empty() || n_classes < 2 {
        return Err(Error::Invalid("recognizer training needs data for ≥ 2 identities".into()));
    }
    let mut rng = stream(seed, role.purpose());
    let mut params = init_facenet(cfg, &mut rng);
    params.insert("head.weight", Tensor::randn(&[n_classes, cfg.feature_dim], 1.0, &mut rng));
    let layers = cfg.hidden.len() + 1;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for _ in 0..cfg.steps {
        let mut imgs = Vec::with_capacity(cfg.batch);
        let mut labels = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let item = &train[order[cursor]];
            cursor += 1;
            imgs.push(augment(&item.image, cfg.noise, &mut rng)?);
            labels.push(item.label);
        }
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut tape = Tape::new();
        let mut b = Binder::new(&params, &[ParamGroup::IdEncoderFacenet]);
        let x = tape.constant(flatten_images(&refs)?);
        let e = facenet_forward(&mut tape, &mut b, x, layers)?;
        let head = tape.param(params.get("head.weight")?.clone());
        let hn = tape.l2_normalize_rows(head)?;
        let cos = tape.matmul_t(e, hn)?;
        let mut margin = vec![0.0; cfg.batch * n_classes];
        for (i, &l) in labels.iter().enumerate() {
            margin[i * n_classes + l] = -cfg.margin;
        }
        let m = tape.constant(Tensor::new(vec![cfg.batch, n_classes], margin)?);
        let shifted = tape.add(cos, m)?;
        let logits = tape.scale(shifted, cfg.scale)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        tape.backward(loss)?;
        let mut grads = b.gradients(&tape)?;
        grads.insert("head.weight".into(), tape.grad(head)?);
        opt.step(&mut params, &grads, |_| cfg.lr)?;
    }
    let mut rec = Recognizer { role, seed, config: cfg.clone(), params, holdout_accuracy: 0.0 };
    let refs: Vec<&Tensor> = holdout.iter().map(|h| &h.image).collect();
    let pred = rec.classify(&refs)?;
    let correct = pred.iter().zip(holdout).filter(|(p, h)| **p == h.label).count();
    rec.holdout_accuracy = correct as f64 / holdout.len() as f64;
    if rec.holdout_accuracy < cfg.accuracy_gate {
        return Err(Error::Gate(format!(
            "{:?} recognizer held-out accuracy {:.3} below gate {}",
            role, rec.holdout_accuracy, cfg.accuracy_gate
        )));
    }
    Ok(rec)
}
