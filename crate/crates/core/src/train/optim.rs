//! Adam with decoupled weight decay.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: BTreeMap::new() }
    }

    /// Updates every parameter named in `grads` with learning rate `lr(name)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: impl Fn(&str) -> f64) -> Result<()> {
        let c = &self.config;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("{name}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            let rate = lr(name);
            let mut data = p.data().to_vec();
            for (i, (&gi, w)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *w -= rate * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut steps = BTreeMap::new();
        for (name, st) in &self.state {
            let n = st.m.len();
            m.insert(name.clone(), Tensor::new(vec![n], st.m.clone())?);
            v.insert(name.clone(), Tensor::new(vec![n], st.v.clone())?);
            steps.insert(name.clone(), st.t);
        }
        m.save(&dir.join("m"))?;
        v.save(&dir.join("v"))?;
        let path = dir.join("steps.json");
        let json = serde_json::to_string_pretty(&(&self.config, steps))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("steps.json");
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (config, steps): (AdamWConfig, BTreeMap<String, u64>) = serde_json::from_str(&text)?;
        let m = ParamStore::load(&dir.join("m"))?;
        let v = ParamStore::load(&dir.join("v"))?;
        let mut state = BTreeMap::new();
        for (name, t) in steps {
            state.insert(
                name.clone(),
                Moments { m: m.get(&name)?.data().to_vec(), v: v.get(&name)?.data().to_vec(), t },
            );
        }
        Ok(AdamW { config, state })
    }
}
