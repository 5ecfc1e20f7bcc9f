//! Attribute classifier scoring how well an output matches its edit prompt.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::recognizer::flatten_images;
use crate::model::vocab::ATTRIBUTES;
use crate::model::{load_checkpoint, save_checkpoint, ParamStore};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub noise: f64,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        AttributeConfig { hidden: 64, steps: 800, batch: 64, lr: 2e-3, noise: 0.02 }
    }
}

/// An image with one 0/1 label per entry of the attribute vocabulary.
#[derive(Clone, Debug)]
pub struct AttributeExample {
    pub image: Tensor,
    pub labels: [bool; ATTRIBUTES.len()],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeClassifier {
    pub config: AttributeConfig,
    pub params: ParamStore,
    /// Held-out accuracy per attribute.
    pub accuracy: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: AttributeConfig,
    accuracy: Vec<f64>,
}

fn logits(tape: &mut Tape, w: [Var; 4], x: Var) -> Result<Var> {
    let h = tape.matmul(x, w[0])?;
    let h = tape.add_broadcast(h, w[1])?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, w[2])?;
    tape.add_broadcast(o, w[3])
}

const NAMES: [&str; 4] = ["attr.l0.weight", "attr.l0.bias", "attr.l1.weight", "attr.l1.bias"];

pub fn attribute_index(word: &str) -> Result<usize> {
    ATTRIBUTES
        .iter()
        .position(|a| *a == word)
        .ok_or_else(|| Error::Invalid(format!("unknown attribute {word:?}; known: {ATTRIBUTES:?}")))
}

impl AttributeClassifier {
    pub fn train(train: &[AttributeExample], holdout: &[AttributeExample], cfg: &AttributeConfig, seed: u64) -> Result<Self> {
        if train.is_empty() || holdout.is_empty() {
            return Err(Error::Invalid("attribute classifier needs training and held-out images".into()));
        }
        let mut rng = stream(seed, "attributes");
        let d = train[0].image.numel();
        let k = ATTRIBUTES.len();
        let mut params = ParamStore::new();
        params.insert(NAMES[0], Tensor::randn(&[d, cfg.hidden], (1.0 / d as f64).sqrt(), &mut rng));
        params.insert(NAMES[1], Tensor::zeros(&[cfg.hidden]));
        params.insert(NAMES[2], Tensor::randn(&[cfg.hidden, k], (1.0 / cfg.hidden as f64).sqrt(), &mut rng));
        params.insert(NAMES[3], Tensor::zeros(&[k]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            let mut imgs = Vec::with_capacity(cfg.batch);
            let mut targets = Vec::with_capacity(cfg.batch * k);
            for _ in 0..cfg.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let ex = &train[order[cursor]];
                cursor += 1;
                let noisy = Tensor::randn(ex.image.shape(), cfg.noise, &mut rng);
                imgs.push(ex.image.zip_map(&noisy, |a, b| a + b)?);
                targets.extend(ex.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
            }
            let mut tape = Tape::new();
            let w = NAMES.map(|n| tape.param(params.get(n).expect("initialized").clone()));
            let x = tape.constant(flatten_images(&imgs.iter().collect::<Vec<_>>())?);
            let out = logits(&mut tape, w, x)?;
            let loss = tape.bce_with_logits(out, &targets)?;
            tape.backward(loss)?;
            let mut grads = std::collections::BTreeMap::new();
            for (n, v) in NAMES.iter().zip(w) {
                grads.insert(n.to_string(), tape.grad(v)?);
            }
            opt.step(&mut params, &grads, |_| cfg.lr)?;
        }
        let mut clf = AttributeClassifier { config: cfg.clone(), params, accuracy: Vec::new() };
        let p = clf.probabilities(&holdout.iter().map(|h| &h.image).collect::<Vec<_>>())?;
        clf.accuracy = (0..k)
            .map(|a| {
                let ok = holdout.iter().enumerate().filter(|(i, h)| (p.row(*i)[a] >= 0.5) == h.labels[a]).count();
                ok as f64 / holdout.len() as f64
            })
            .collect();
        Ok(clf)
    }

    /// `images × attributes` probabilities.
    pub fn probabilities(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut v = Vec::with_capacity(NAMES.len());
        for n in NAMES {
            v.push(tape.constant(self.params.get(n)?.clone()));
        }
        let w = [v[0], v[1], v[2], v[3]];
        let x = tape.constant(flatten_images(images)?);
        let out = logits(&mut tape, w, x)?;
        tape.value(out).map(|z| 1.0 / (1.0 + (-z).exp()))
    }

    /// Probability that `image` shows `attribute`.
    pub fn prompt_alignment(&self, image: &Tensor, attribute: &str) -> Result<f64> {
        let a = attribute_index(attribute)?;
        Ok(self.probabilities(&[image])?.row(0)[a])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &Meta { config: self.config.clone(), accuracy: self.accuracy.clone() }, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, params): (Meta, _) = load_checkpoint(dir)?;
        Ok(AttributeClassifier { config: m.config, params, accuracy: m.accuracy })
    }
}
