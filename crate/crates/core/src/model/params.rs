//! Named parameters, parameter groups, and tape binding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor, Var};

/// Training partitions of the parameter set; membership follows the name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    PvaMatrices,
    IdEncoderTransformer,
    IdEncoderFacenet,
    SpecialToken,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Base,
        ParamGroup::PvaMatrices,
        ParamGroup::IdEncoderTransformer,
        ParamGroup::IdEncoderFacenet,
        ParamGroup::SpecialToken,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Base => "base.",
            ParamGroup::PvaMatrices => "pva.",
            ParamGroup::IdEncoderTransformer => "idenc.",
            ParamGroup::IdEncoderFacenet => "facenet.",
            ParamGroup::SpecialToken => "special_token",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Base => "base",
            ParamGroup::PvaMatrices => "pva_matrices",
            ParamGroup::IdEncoderTransformer => "id_encoder_transformer",
            ParamGroup::IdEncoderFacenet => "id_encoder_facenet",
            ParamGroup::SpecialToken => "special_token",
        };
        f.write_str(s)
    }
}

const TENSOR_EXT: &str = "pvat";

/// Ordered map of parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter of `other`, replacing existing entries.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Parameters belonging to any of `groups`.
    pub fn subset(&self, groups: &[ParamGroup]) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| ParamGroup::of(k).is_some_and(|g| groups.contains(&g)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { params }
    }

    /// True when every parameter of `group` is bitwise equal in both stores.
    pub fn group_bit_eq(&self, other: &ParamStore, group: ParamGroup) -> bool {
        let mine = self.subset(&[group]);
        let theirs = other.subset(&[group]);
        mine.params.len() == theirs.params.len()
            && mine
                .params
                .iter()
                .all(|(k, v)| theirs.params.get(k).is_some_and(|o| o.bit_eq(v)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in &self.params {
            write_tensor(t, &dir.join(format!("{name}.{TENSOR_EXT}")))?;
        }
        Ok(())
    }

    /// Loads every `*.pvat` file in `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::MissingArtifact(dir.to_path_buf()));
        }
        let mut params = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(TENSOR_EXT) {
                continue;
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Format {
                    path: path.clone(),
                    reason: "non-utf8 parameter name".into(),
                })?
                .to_string();
            params.insert(name, read_tensor(&path)?);
        }
        Ok(ParamStore { params })
    }
}

/// Places parameters on a tape on first use, marking those of trainable groups
/// as gradient leaves.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: BTreeSet<ParamGroup>,
    extra: BTreeSet<String>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[ParamGroup]) -> Self {
        Binder {
            store,
            trainable: trainable.iter().copied().collect(),
            extra: BTreeSet::new(),
            bound: BTreeMap::new(),
        }
    }

    /// Additionally marks individual parameters of otherwise frozen groups as trainable.
    pub fn with_extra(mut self, names: impl IntoIterator<Item = String>) -> Self {
        self.extra.extend(names);
        self
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.extra.contains(name) || ParamGroup::of(name).is_some_and(|g| self.trainable.contains(&g))
    }

    /// A binder that treats every parameter as a constant.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Binder::new(store, &[])
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.store.contains(name)
    }

    /// Routes `name` to an existing tape variable instead of the stored value.
    pub fn set_override(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = tape.leaf(t, self.is_trainable(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn gradients(&self, tape: &Tape) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.bound {
            if tape.requires_grad(*v) {
                out.insert(name.clone(), tape.grad(*v)?);
            }
        }
        Ok(out)
    }
}
