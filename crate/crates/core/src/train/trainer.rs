//! The training phases: base pretraining, the two PVA stages and per-identity finetuning.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::sampling::{sample_caption, sample_reference_subset, stratified_times, uniform_to_step};
use crate::dataset::{merged_random_mask, Corpus, MaskPool, RegionBoxes, Split, StrokeParams};
use crate::diffusion::{assemble_inpaint_input, diffuse_to, MaskedImage, NoiseSchedule};
use crate::error::{Error, Result};
use crate::identity::{init_encoder, pad_references, visual_tokens_var, Recognizer, ReferenceSet};
use crate::model::denoiser::patchify_batch;
use crate::model::{forward, init_base, init_pva, Binder, DenoiseItem, Denoiser, DenoiserConfig, ParamGroup, ParamStore, PromptTokens};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainBase,
    PvaStage1,
    PvaStage2,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::PretrainBase => "pretrain",
            Phase::PvaStage1 => "stage1",
            Phase::PvaStage2 => "stage2",
            Phase::Finetune => "finetune",
        }
    }

    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            Phase::PretrainBase => &[Base],
            Phase::PvaStage1 => &[PvaMatrices, IdEncoderTransformer, SpecialToken],
            Phase::PvaStage2 => &[PvaMatrices, IdEncoderTransformer, SpecialToken, IdEncoderFacenet],
            Phase::Finetune => &[PvaMatrices],
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    /// Distinct draws per step; each is replicated over `strata` diffusion times.
    pub batch: usize,
    pub strata: usize,
    pub lr: f64,
    /// Cosine decay of both learning rates to this fraction over the phase; 1 keeps them constant.
    pub final_lr_frac: f64,
    pub special_token_lr: f64,
    pub weight_decay: f64,
    /// Probability of training on the empty prompt.
    pub cond_drop: f64,
    pub flip_prob: f64,
    /// Finetune only: also adapt the text cross-attention Q, K, V.
    pub finetune_cross_attention: bool,
    pub mask_pool: usize,
    pub dilation: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy(Phase::PretrainBase)
    }
}

impl TrainConfig {
    /// Scaled-down settings that train the toy model on one CPU core.
    pub fn toy(phase: Phase) -> Self {
        let (steps, batch, strata, lr, final_lr_frac) = match phase {
            Phase::PretrainBase => (6000, 8, 1, 2e-3, 0.05),
            Phase::PvaStage1 => (8000, 8, 1, 2e-3, 0.1),
            Phase::PvaStage2 => (500, 8, 1, 3e-4, 1.0),
            Phase::Finetune => (40, 1, 4, 1e-3, 1.0),
        };
        TrainConfig {
            phase,
            steps,
            batch,
            strata,
            lr,
            final_lr_frac,
            special_token_lr: 1e-3,
            weight_decay: 1e-2,
            cond_drop: if phase == Phase::PretrainBase { 0.1 } else { 0.0 },
            flip_prob: 0.5,
            finetune_cross_attention: false,
            mask_pool: 500,
            dilation: crate::dataset::masks::DEFAULT_DILATION,
            seed: 0,
        }
    }

    /// Schedule of the original large-scale recipe.
    pub fn full(phase: Phase) -> Self {
        let steps = match phase {
            Phase::PretrainBase | Phase::PvaStage1 | Phase::PvaStage2 => 100_000,
            Phase::Finetune => 40,
        };
        TrainConfig {
            steps,
            batch: if phase == Phase::Finetune { 1 } else { 16 },
            lr: 1.6e-5,
            final_lr_frac: 1.0,
            ..TrainConfig::toy(phase)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.strata == 0 {
            return bad("batch and strata must be positive".into());
        }
        if !(self.lr > 0.0 && self.special_token_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return bad("final_lr_frac must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.cond_drop) || !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.cond_drop > 0.0 && self.phase != Phase::PretrainBase {
            return bad(format!("condition dropping is a pretraining option, not {}", self.phase));
        }
        if self.finetune_cross_attention && self.phase != Phase::Finetune {
            return bad("finetune_cross_attention is only valid for finetuning".into());
        }
        if self.mask_pool == 0 {
            return bad("mask_pool must be positive".into());
        }
        Ok(())
    }

    /// Learning-rate multiplier at 0-based step `k` of the phase.
    pub fn lr_factor(&self, k: usize) -> f64 {
        if self.final_lr_frac >= 1.0 || self.steps <= 1 {
            return 1.0;
        }
        let progress = k as f64 / (self.steps - 1) as f64;
        let f = self.final_lr_frac;
        f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    fn extra_trainable(&self, model: &DenoiserConfig) -> Vec<String> {
        if !self.finetune_cross_attention {
            return Vec::new();
        }
        (0..model.blocks)
            .flat_map(|i| ["q", "k", "v"].map(|m| format!("base.blocks.{i}.cross.{m}")))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub time_ms: f64,
}

pub const LOG_HEADER: &str = "step,phase,loss,time_ms";

/// Appends step records to a CSV file.
pub struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        writeln!(out, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(CsvLog { out })
    }

    pub fn record(&mut self, s: &StepLog) -> Result<()> {
        writeln!(self.out, "{},{},{},{:.3}", s.step, s.phase, s.loss, s.time_ms)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("<train log>", e))
    }
}

/// Parameters, optimizer moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub step: usize,
    pub params: ParamStore,
    pub opt: AdamW,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    phase: Phase,
    step: usize,
}

impl TrainState {
    pub fn new(phase: Phase, params: ParamStore, weight_decay: f64) -> Self {
        let opt = AdamW::new(AdamWConfig { weight_decay, ..AdamWConfig::default() });
        TrainState { phase, step: 0, params, opt }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(&dir.join("params"))?;
        self.opt.save(&dir.join("optimizer"))?;
        let path = dir.join("state.json");
        let json = serde_json::to_string_pretty(&StateMeta { phase: self.phase, step: self.step })?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: StateMeta = serde_json::from_str(&text)?;
        Ok(TrainState {
            phase: meta.phase,
            step: meta.step,
            params: ParamStore::load(&dir.join("params"))?,
            opt: AdamW::load(&dir.join("optimizer"))?,
        })
    }
}

/// One training example before noise is drawn.
#[derive(Clone, Debug)]
pub struct Draw {
    pub x0: Tensor,
    pub mask: Tensor,
    pub prompt: PromptTokens,
    pub refs: Option<Vec<Tensor>>,
}

/// Applies `grads` after checking every name belongs to a group trainable in `phase`;
/// both learning rates are multiplied by `factor`.
pub fn apply_update(
    state: &mut TrainState,
    cfg: &TrainConfig,
    factor: f64,
    extra: &[String],
    grads: &std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    let groups = cfg.phase.trainable_groups();
    for name in grads.keys() {
        let ok = extra.contains(name) || ParamGroup::of(name).is_some_and(|g| groups.contains(&g));
        if !ok {
            let group = ParamGroup::of(name).map_or_else(|| name.clone(), |g| g.to_string());
            return Err(Error::FrozenGroup { group, phase: cfg.phase.to_string() });
        }
    }
    let (lr, special) = (cfg.lr * factor, cfg.special_token_lr * factor);
    state.opt.step(&mut state.params, grads, |name| {
        if ParamGroup::of(name) == Some(ParamGroup::SpecialToken) {
            special
        } else {
            lr
        }
    })?;
    state.step += 1;
    Ok(())
}

/// Denoising loss of a batch on a fresh tape, with gradients for the trainable parameters.
/// `times[i]` lists the diffusion steps at which `draws[i]` is replicated.
pub fn dsm_loss_and_grads(
    params: &ParamStore,
    model: &DenoiserConfig,
    sched: &NoiseSchedule,
    groups: &[ParamGroup],
    extra: &[String],
    draws: &[Draw],
    times: &[Vec<usize>],
    rng: &mut impl Rng,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    if draws.len() != times.len() {
        return Err(Error::Invalid("one time list per draw".into()));
    }
    let mut tape = Tape::new();
    let mut b = Binder::new(params, groups).with_extra(extra.iter().cloned());
    let mut inputs = Vec::new();
    let mut noise = Vec::new();
    let mut visual = Vec::new();
    let mut meta = Vec::new();
    for (d, ts) in draws.iter().zip(times) {
        let g_v = match &d.refs {
            Some(r) => Some(visual_tokens_var(&mut tape, &mut b, model, &r.iter().collect::<Vec<_>>())?),
            None => None,
        };
        let masked = MaskedImage::new(&d.x0, &d.mask)?;
        for &t in ts {
            let eps = Tensor::randn(d.x0.shape(), 1.0, rng);
            let x_t = diffuse_to(&d.x0, t, &eps, sched)?;
            inputs.push(assemble_inpaint_input(&x_t, &masked)?);
            noise.push(eps);
            visual.push(g_v);
            meta.push((&d.prompt, t));
        }
    }
    let items: Vec<DenoiseItem> = inputs
        .iter()
        .zip(&visual)
        .zip(&meta)
        .map(|((z, v), (p, t))| DenoiseItem { z_tilde: z, prompt: p, visual: *v, t: *t })
        .collect();
    let pred = forward(&mut tape, &mut b, model, &items)?;
    let target = tape.constant(patchify_batch(model, &noise.iter().collect::<Vec<_>>())?);
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("dsm loss"));
    }
    tape.backward(loss)?;
    Ok((value, b.gradients(&tape)?))
}

/// Runs `cfg.steps` optimizer steps, drawing each batch with `draw`.
fn run_phase(
    state: &mut TrainState,
    model: &DenoiserConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
    mut draw: impl FnMut(&mut StreamRng) -> Result<Draw>,
    log: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    state.phase = cfg.phase;
    let extra = cfg.extra_trainable(model);
    for k in 0..cfg.steps {
        let start = Instant::now();
        let draws = (0..cfg.batch).map(|_| draw(rng)).collect::<Result<Vec<_>>>()?;
        let times = if cfg.strata == 1 {
            (0..cfg.batch).map(|_| vec![uniform_to_step(rng.random(), sched.t_max())]).collect()
        } else {
            let strata = stratified_times(cfg.strata, cfg.batch, sched.t_max(), rng)?;
            (0..cfg.batch).map(|i| strata.iter().map(|g| g[i]).collect()).collect::<Vec<_>>()
        };
        let step = state.step + 1;
        let diverged = |detail: String| Error::Diverged { phase: cfg.phase.to_string(), step, detail };
        let (loss, grads) =
            match dsm_loss_and_grads(&state.params, model, sched, cfg.phase.trainable_groups(), &extra, &draws, &times, rng) {
                Ok(r) => r,
                Err(Error::NonFinite(op)) => return Err(diverged(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
        apply_update(state, cfg, cfg.lr_factor(k), &extra, &grads)?;
        if let Some((name, _)) = state.params.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(diverged(format!("parameter {name} became non-finite")));
        }
        log(&StepLog { step, phase: cfg.phase, loss, time_ms: start.elapsed().as_secs_f64() * 1e3 })?;
    }
    Ok(())
}

fn flip_maybe(img: &Tensor, boxes: &RegionBoxes, p: f64, rng: &mut impl Rng) -> Result<(Tensor, RegionBoxes)> {
    if rng.random_bool(p) {
        let w = img.shape()[1];
        Ok((img.flip_horizontal()?, boxes.flip_horizontal(w)))
    } else {
        Ok((img.clone(), *boxes))
    }
}

fn train_pool(cfg: &TrainConfig, extent: usize) -> Result<MaskPool> {
    MaskPool::generate(cfg.mask_pool, extent, &StrokeParams::default(), &mut stream(cfg.seed, "train.mask_pool"))
}

fn check_corpus(corpus: &Corpus, model: &DenoiserConfig) -> Result<()> {
    if corpus.extent() != model.image_size {
        return Err(Error::Config(format!(
            "corpus images are {}px, model expects {}px",
            corpus.extent(),
            model.image_size
        )));
    }
    if corpus.split(Split::Train).is_empty() {
        return Err(Error::Config("corpus has no training identities".into()));
    }
    Ok(())
}

/// Trains the base inpainting denoiser on every training-split image.
pub fn pretrain_base(
    corpus: &Corpus,
    model: &DenoiserConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<TrainState> {
    if cfg.phase != Phase::PretrainBase {
        return Err(Error::Config(format!("pretrain_base needs the pretrain phase, got {}", cfg.phase)));
    }
    model.validate()?;
    check_corpus(corpus, model)?;
    let params = init_base(model, derive_seed(cfg.seed, "init.base"))?;
    let mut state = TrainState::new(Phase::PretrainBase, params, cfg.weight_decay);
    continue_pretrain(&mut state, corpus, model, sched, cfg, log)?;
    Ok(state)
}

/// More pretraining steps on an existing state.
pub fn continue_pretrain(
    state: &mut TrainState,
    corpus: &Corpus,
    model: &DenoiserConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    check_corpus(corpus, model)?;
    let pool = train_pool(cfg, model.image_size)?;
    let renders: Vec<_> = corpus
        .split(Split::Train)
        .into_iter()
        .flat_map(|id| id.references.iter().chain(id.inference.iter().map(|i| &i.render)))
        .collect();
    let mut rng = stream(derive_seed(cfg.seed, "train.pretrain"), &state.step.to_string());
    run_phase(
        state,
        model,
        sched,
        cfg,
        &mut rng,
        |rng| {
            let r = renders[rng.random_range(0..renders.len())];
            let (x0, boxes) = flip_maybe(&r.image, &r.record.boxes, cfg.flip_prob, rng)?;
            let mask = merged_random_mask(&pool, &boxes, model.image_size, cfg.dilation, rng)?;
            let prompt = if rng.random_bool(cfg.cond_drop) {
                PromptTokens::empty()
            } else {
                sample_caption(&r.record, rng)?
            };
            Ok(Draw { x0, mask, prompt, refs: None })
        },
        log,
    )
}

/// Assembles the PVA model: base weights, PVA matrices and `S*` copied from
/// the text path, a fresh query transformer and recognizer A's network.
pub fn init_pva_params(base: &ParamStore, model: &DenoiserConfig, recognizer: &Recognizer, seed: u64) -> Result<ParamStore> {
    let mut params = base.subset(&[ParamGroup::Base]);
    if params.is_empty() {
        return Err(Error::Invalid("base parameters are empty".into()));
    }
    init_pva(model, &mut params)?;
    params.merge(&init_encoder(model, derive_seed(seed, "init.encoder"))?);
    let facenet = recognizer.facenet();
    let first = facenet.get("facenet.l0.weight")?;
    if first.rows() != model.image_numel() {
        return Err(Error::Config(format!(
            "recognizer input is {} values, images have {}",
            first.rows(),
            model.image_numel()
        )));
    }
    params.merge(&facenet);
    Ok(params)
}

/// One PVA stage (`cfg.phase` is stage 1 or 2): targets are inference images of
/// training identities, conditioned on a random subset of their references.
pub fn train_pva(
    state: &mut TrainState,
    corpus: &Corpus,
    model: &DenoiserConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    if !matches!(cfg.phase, Phase::PvaStage1 | Phase::PvaStage2) {
        return Err(Error::Config(format!("train_pva needs a PVA stage, got {}", cfg.phase)));
    }
    check_corpus(corpus, model)?;
    let pool = train_pool(cfg, model.image_size)?;
    let ids: Vec<_> = corpus
        .split(Split::Train)
        .into_iter()
        .filter(|i| i.references.len() >= super::sampling::MAX_REFERENCES && !i.inference.is_empty())
        .collect();
    if ids.is_empty() {
        return Err(Error::Config("no training identity has 5 references and an inference image".into()));
    }
    let mut rng = stream(derive_seed(cfg.seed, &format!("train.{}", cfg.phase)), &state.step.to_string());
    run_phase(
        state,
        model,
        sched,
        cfg,
        &mut rng,
        |rng| {
            let id = ids[rng.random_range(0..ids.len())];
            let target = &id.inference[rng.random_range(0..id.inference.len())].render;
            let (x0, boxes) = flip_maybe(&target.image, &target.record.boxes, cfg.flip_prob, rng)?;
            let mask = merged_random_mask(&pool, &boxes, model.image_size, cfg.dilation, rng)?;
            let refs = sample_reference_subset(&id.reference_images(), rng)?.images;
            let prompt = sample_caption(&target.record, rng)?.with_identity_token();
            Ok(Draw { x0, mask, prompt, refs: Some(refs) })
        },
        log,
    )
}

/// Adapts the PVA matrices to one reference set. Each step holds one reference
/// out as the target and conditions on the rest, padded back to the full count.
pub fn finetune_identity(
    refs: &ReferenceSet,
    model: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<Denoiser> {
    if cfg.phase != Phase::Finetune {
        return Err(Error::Config(format!("finetune_identity needs the finetune phase, got {}", cfg.phase)));
    }
    if refs.is_empty() {
        return Err(Error::Invalid("finetuning needs at least one reference".into()));
    }
    let c = &model.config;
    let pool = train_pool(cfg, c.image_size)?;
    let boxes = RegionBoxes::canonical(c.image_size)?;
    let prompt = PromptTokens::neutral().with_identity_token();
    let mut state = TrainState::new(Phase::Finetune, model.params.clone(), cfg.weight_decay);
    let mut rng = stream(derive_seed(cfg.seed, "train.finetune"), &refs.id);
    run_phase(
        &mut state,
        c,
        sched,
        cfg,
        &mut rng,
        |rng| {
            let j = rng.random_range(0..refs.len());
            let target = &refs.images()[j];
            let rest = pad_references(&refs.without(j), refs.len(), Some(target), rng)?;
            let mask = merged_random_mask(&pool, &boxes, c.image_size, cfg.dilation, rng)?;
            Ok(Draw { x0: target.clone(), mask, prompt: prompt.clone(), refs: Some(rest.images().to_vec()) })
        },
        log,
    )?;
    Ok(Denoiser { config: c.clone(), params: state.params })
}

/// Discards step records.
pub fn no_log(_: &StepLog) -> Result<()> {
    Ok(())
}
