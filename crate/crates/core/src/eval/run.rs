//! Evaluation over the test split, per mask region, and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::attributes::{attribute_index, AttributeClassifier, AttributeExample};
use super::metrics::{cosine, frechet_distance, kid_mmd, mean_sd};
use super::report::{csv_fields, MetricReport, RegionRow};
use crate::dataset::pngio::write_rgb_png;
use crate::dataset::{Corpus, IdentityData, RegionKind, Split};
use crate::diffusion::{build_guidance_conditions, sample_inpaint, GuidanceTask, MaskedImage, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::identity::{visual_tokens, LabeledImage, Recognizer, ReferenceSet};
use crate::model::vocab::ATTRIBUTES;
use crate::model::{Denoiser, ParamGroup, PromptTokens};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{finetune_identity, no_log, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub regions: Vec<RegionKind>,
    pub split: Split,
    /// Upper bound on evaluated identities, taken in manifest order.
    pub max_identities: usize,
    pub images_per_identity: usize,
    /// References given to the identity encoder; 0 evaluates the text-only base path.
    pub n_refs: usize,
    pub guidance_scale: f64,
    /// Attribute added to the prompt for controlled inpainting.
    pub edit_attribute: Option<String>,
    /// Attribute scored for prompt alignment; defaults to the edit attribute.
    pub score_attribute: Option<String>,
    pub sampler: SamplerConfig,
    /// Per-identity finetuning before sampling.
    pub finetune: Option<TrainConfig>,
    pub threads: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            regions: RegionKind::ALL.to_vec(),
            split: Split::Test,
            max_identities: usize::MAX,
            images_per_identity: 1,
            n_refs: 5,
            guidance_scale: 1.0,
            edit_attribute: None,
            score_attribute: None,
            sampler: SamplerConfig::default(),
            finetune: None,
            threads: 0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() || self.images_per_identity == 0 || self.max_identities == 0 {
            return Err(Error::Config("evaluation needs regions, identities and images".into()));
        }
        if self.n_refs > 5 {
            return Err(Error::Config(format!("n_refs {} exceeds the 5 stored references", self.n_refs)));
        }
        for a in self.edit_attribute.iter().chain(&self.score_attribute) {
            attribute_index(a).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.finetune.is_some() && self.n_refs == 0 {
            return Err(Error::Config("finetuning needs references".into()));
        }
        Ok(())
    }

    fn scored_attribute(&self) -> Option<&str> {
        self.score_attribute.as_deref().or(self.edit_attribute.as_deref())
    }
}

/// One inpainted output.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub identity: String,
    pub image: String,
    pub region: RegionKind,
    pub seed: u64,
    pub guidance_scale: f64,
    pub id_similarity: f64,
    pub prompt_alignment: Option<f64>,
    pub output: Tensor,
    pub truth: Tensor,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub samples: Vec<EvalSample>,
}

#[derive(Serialize)]
struct IndexEntry<'a> {
    image: String,
    identity: &'a str,
    source: &'a str,
    region: &'a str,
    seed: u64,
    guidance_scale: f64,
}

/// Writes each output as PNG with an `index.json` listing them.
pub fn write_outputs(dir: &Path, samples: &[EvalSample]) -> Result<()> {
    let mut index = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}_{}_{}.png", s.identity, s.region.name());
        write_rgb_png(&s.output, &dir.join(&name))?;
        index.push(IndexEntry {
            image: name,
            identity: &s.identity,
            source: &s.image,
            region: s.region.name(),
            seed: s.seed,
            guidance_scale: s.guidance_scale,
        });
    }
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
}

fn has_pva(model: &Denoiser) -> bool {
    model.params.names().any(|n| ParamGroup::of(n) == Some(ParamGroup::PvaMatrices))
}

fn evaluate_identity(
    id: &IdentityData,
    model: &Denoiser,
    sched: &NoiseSchedule,
    eval_b: &Recognizer,
    classifier: Option<&AttributeClassifier>,
    cfg: &EvalConfig,
) -> Result<Vec<EvalSample>> {
    let mut finetuned = None;
    let visual = if cfg.n_refs > 0 {
        let refs = ReferenceSet::new(
            id.id.clone(),
            id.references.iter().take(cfg.n_refs).map(|r| r.image.clone()).collect(),
        )?;
        let m = match &cfg.finetune {
            Some(ft) => finetuned.insert(finetune_identity(&refs, model, sched, ft, &mut no_log)?),
            None => model,
        };
        Some(visual_tokens(&m.params, &m.config, &refs.image_refs())?)
    } else {
        None
    };
    let model = finetuned.as_ref().unwrap_or(model);
    let neutral = PromptTokens::neutral();
    let edit = cfg.edit_attribute.as_deref().map(|a| PromptTokens::with_attributes([a])).transpose()?;
    let task = match (&visual, &edit) {
        (None, _) => GuidanceTask::Default,
        (Some(_), Some(_)) => GuidanceTask::Controlled,
        (Some(_), None) => GuidanceTask::InpaintOnly,
    };
    let guidance = build_guidance_conditions(task, &neutral, edit.as_ref(), visual.as_ref(), cfg.guidance_scale)?;
    let mut out = Vec::new();
    for (j, item) in id.inference.iter().take(cfg.images_per_identity).enumerate() {
        let truth = &item.render.image;
        for &region in &cfg.regions {
            let mask = &item.masks[&region];
            let masked = MaskedImage::new(truth, mask)?;
            let seed = derive_seed(cfg.seed, &format!("eval/{}/{j}/{}", id.id, region.name()));
            let scfg = SamplerConfig { seed, task, guidance_scale: cfg.guidance_scale, ..cfg.sampler.clone() };
            let output = sample_inpaint(model, sched, &masked, &guidance, &scfg)?;
            let e = eval_b.embed(&[&output, truth])?;
            let prompt_alignment = match (classifier, cfg.scored_attribute()) {
                (Some(c), Some(a)) => Some(c.prompt_alignment(&output, a)?),
                _ => None,
            };
            out.push(EvalSample {
                identity: id.id.clone(),
                image: item.render.path.clone(),
                region,
                seed,
                guidance_scale: cfg.guidance_scale,
                id_similarity: cosine(e.row(0), e.row(1))?,
                prompt_alignment,
                output,
                truth: truth.clone(),
            });
        }
    }
    Ok(out)
}

fn worker_count(cfg: &EvalConfig, jobs: usize) -> usize {
    let n = if cfg.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.threads
    };
    n.clamp(1, jobs.max(1))
}

/// Inpaints every evaluated image under each region's mask and aggregates metrics.
pub fn evaluate_per_region(
    model: &Denoiser,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    eval_b: &Recognizer,
    classifier: Option<&AttributeClassifier>,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    if eval_b.role != crate::identity::RecognizerRole::EvalB {
        return Err(Error::Config("metrics must use the evaluation recognizer".into()));
    }
    if cfg.n_refs > 0 && !has_pva(model) {
        return Err(Error::Config("reference conditioning needs a PVA checkpoint".into()));
    }
    if cfg.scored_attribute().is_some() && classifier.is_none() {
        return Err(Error::Config("prompt alignment needs an attribute classifier".into()));
    }
    let ids: Vec<&IdentityData> = corpus
        .split(cfg.split)
        .into_iter()
        .filter(|i| !i.inference.is_empty())
        .take(cfg.max_identities)
        .collect();
    if ids.is_empty() {
        return Err(Error::Config(format!("no {:?} identities with inference images", cfg.split)));
    }
    let workers = worker_count(cfg, ids.len());
    let chunk = ids.len().div_ceil(workers);
    let results: Vec<Result<Vec<EvalSample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || -> Result<Vec<EvalSample>> {
                    let mut v = Vec::new();
                    for id in part {
                        v.extend(evaluate_identity(id, model, sched, eval_b, classifier, cfg)?);
                    }
                    Ok(v)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut samples = Vec::new();
    for r in results {
        samples.extend(r?);
    }

    let mut rows = Vec::with_capacity(cfg.regions.len());
    for &region in &cfg.regions {
        let of: Vec<&EvalSample> = samples.iter().filter(|s| s.region == region).collect();
        let sims: Vec<f64> = of.iter().map(|s| s.id_similarity).collect();
        let (id_sim_mean, id_sim_sd) = mean_sd(&sims);
        let gen = eval_b.embed(&of.iter().map(|s| &s.output).collect::<Vec<_>>())?;
        let real = eval_b.embed(&of.iter().map(|s| &s.truth).collect::<Vec<_>>())?;
        let (fid_like, kid_like) = if of.len() >= 2 {
            (frechet_distance(&gen, &real)?, kid_mmd(&gen, &real)?)
        } else {
            (f64::NAN, f64::NAN)
        };
        let prompt_alignment = if of.iter().all(|s| s.prompt_alignment.is_some()) {
            Some(of.iter().filter_map(|s| s.prompt_alignment).sum::<f64>() / of.len() as f64)
        } else {
            None
        };
        rows.push(RegionRow {
            region: region.name().to_string(),
            id_sim_mean,
            id_sim_sd,
            fid_like,
            kid_like,
            prompt_alignment,
        });
    }
    Ok(EvalOutcome { report: MetricReport::from_rows(rows)?, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "grid")]
pub enum Ablation {
    Guidance(Vec<f64>),
    RefCount(Vec<usize>),
    Finetune(Vec<bool>),
}

impl Ablation {
    pub fn default_grid(kind: &str) -> Result<Self> {
        match kind {
            "guidance" => Ok(Ablation::Guidance(vec![1.0, 2.0, 4.0, 6.0])),
            "ref_count" => Ok(Ablation::RefCount((1..=5).collect())),
            "finetune" => Ok(Ablation::Finetune(vec![false, true])),
            other => Err(Error::Config(format!("unknown ablation {other:?}; expected guidance, ref_count or finetune"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Guidance(_) => "guidance",
            Ablation::RefCount(_) => "ref_count",
            Ablation::Finetune(_) => "finetune",
        }
    }

    fn points(&self) -> Vec<String> {
        match self {
            Ablation::Guidance(g) => g.iter().map(|v| v.to_string()).collect(),
            Ablation::RefCount(g) => g.iter().map(|v| v.to_string()).collect(),
            Ablation::Finetune(g) => g.iter().map(|v| v.to_string()).collect(),
        }
    }
}

pub const ABLATION_HEADER: &str = "kind,value,region,id_sim_mean,id_sim_sd,fid_like,kid_like,prompt_alignment";

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: String,
    pub report: MetricReport,
}

/// Evaluates `base` at every grid point; rows keep the grid order.
pub fn ablation_sweep(
    ablation: &Ablation,
    model: &Denoiser,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    eval_b: &Recognizer,
    classifier: Option<&AttributeClassifier>,
    base: &EvalConfig,
    finetune: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let points = ablation.points();
    if points.is_empty() {
        return Err(Error::Config(format!("{} ablation grid is empty", ablation.name())));
    }
    let mut out = Vec::with_capacity(points.len());
    for (i, value) in points.into_iter().enumerate() {
        let mut cfg = base.clone();
        match ablation {
            Ablation::Guidance(g) => {
                if !(g[i] >= 0.0) {
                    return Err(Error::Config(format!("guidance scale {} must be ≥ 0", g[i])));
                }
                cfg.guidance_scale = g[i];
            }
            Ablation::RefCount(g) => {
                if !(1..=5).contains(&g[i]) {
                    return Err(Error::Config(format!("reference count {} outside 1..=5", g[i])));
                }
                cfg.n_refs = g[i];
            }
            Ablation::Finetune(g) => cfg.finetune = g[i].then(|| finetune.clone()),
        }
        let report = evaluate_per_region(model, corpus, sched, eval_b, classifier, &cfg)?.report;
        out.push(AblationRow { value, report });
    }
    Ok(out)
}

pub fn ablation_csv(ablation: &Ablation, rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        for row in r.report.rows.iter().chain(std::iter::once(&r.report.mean)) {
            let _ = writeln!(s, "{},{},{}", ablation.name(), r.value, csv_fields(row));
        }
    }
    s
}

/// Training-split identities as recognizer classes; the last inference image
/// of each is held out for the accuracy gate.
pub fn recognizer_examples(corpus: &Corpus) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, usize)> {
    let ids = corpus.split(Split::Train);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (label, id) in ids.iter().enumerate() {
        let mut imgs: Vec<&Tensor> = id.reference_images();
        imgs.extend(id.inference.iter().map(|i| &i.render.image));
        let Some((last, rest)) = imgs.split_last() else { continue };
        if rest.is_empty() {
            return Err(Error::Config(format!("identity {} has a single image", id.id)));
        }
        holdout.push(LabeledImage { image: (*last).clone(), label });
        train.extend(rest.iter().map(|&i| LabeledImage { image: i.clone(), label }));
    }
    Ok((train, holdout, ids.len()))
}

/// Attribute labels of every render in `split`.
pub fn attribute_examples(corpus: &Corpus, split: Split) -> Vec<AttributeExample> {
    let mut out = Vec::new();
    for id in corpus.split(split) {
        for r in id.references.iter().chain(id.inference.iter().map(|i| &i.render)) {
            let labels = ATTRIBUTES.map(|a| r.record.has_attribute(a).unwrap_or(false));
            out.push(AttributeExample { image: r.image.clone(), labels });
        }
    }
    out
}

/// Mean cosine over same-identity pairs minus mean over different-identity
/// pairs, for the first two images of each identity in `split`.
pub fn pair_separation(rec: &Recognizer, corpus: &Corpus, split: Split) -> Result<(f64, f64)> {
    let mut emb: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, id) in corpus.split(split).iter().enumerate() {
        let imgs: Vec<&Tensor> = id.reference_images().into_iter().take(2).collect();
        if imgs.len() < 2 {
            continue;
        }
        let e = rec.embed(&imgs)?;
        emb.insert(i, (0..2).map(|r| e.row(r).to_vec()).collect());
    }
    let keys: Vec<usize> = emb.keys().copied().collect();
    if keys.len() < 2 {
        return Err(Error::Invalid("pair separation needs two identities".into()));
    }
    let same: Vec<f64> = keys.iter().map(|k| cosine(&emb[k][0], &emb[k][1])).collect::<Result<_>>()?;
    let mut diff = Vec::new();
    for (a, b) in keys.iter().zip(keys.iter().skip(1)) {
        diff.push(cosine(&emb[a][0], &emb[b][1])?);
    }
    Ok((mean_sd(&same).0, mean_sd(&diff).0))
}
