use std::path::{Path, PathBuf};

use pva_core::dataset::pngio::{read_mask_png, read_rgb_png, write_rgb_png};
use pva_core::dataset::{build_dataset, Corpus, Split};
use pva_core::diffusion::{build_guidance_conditions, sample_inpaint, GuidanceTask, MaskedImage};
use pva_core::eval::{
    ablation_csv, ablation_sweep, attribute_examples, evaluate_per_region, recognizer_examples, write_outputs, Ablation,
    AttributeClassifier,
};
use pva_core::identity::{train_recognizer, visual_tokens, Recognizer, RecognizerRole, ReferenceSet};
use pva_core::model::{load_checkpoint, save_checkpoint, Denoiser, DenoiserConfig, PromptTokens};
use pva_core::rng::{derive_seed, seed_from_env};
use pva_core::train::{finetune_identity, init_pva_params, pretrain_base, train_pva, CsvLog, Phase, TrainState};
use pva_core::{Error, Result};

use crate::config::RunConfig;
use crate::lock::DirLock;
use crate::{Command, Common};

pub const RECOGNIZER_A: &str = "recognizer_a";
pub const RECOGNIZER_B: &str = "recognizer_b";
pub const ATTRIBUTES: &str = "attributes";
pub const BASE: &str = "base";
pub const PVA: &str = "pva";
pub const FINETUNE: &str = "finetune";

fn setup(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or_else(|| seed_from_env(cfg.seed));
    Ok(cfg.with_seed(seed))
}

fn load_denoiser(dir: &Path) -> Result<Denoiser> {
    let (config, params): (DenoiserConfig, _) = load_checkpoint(dir)?;
    Ok(Denoiser { config, params })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn logger(path: &Path) -> Result<(CsvLog, f64)> {
    Ok((CsvLog::create(path)?, f64::NAN))
}

pub fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::DatasetBuild { common } => {
            let cfg = setup(&common)?;
            let out = common.out.unwrap_or(cfg.paths.dataset);
            let m = build_dataset(&cfg.builder, &out)?;
            let count = |s| m.split(s).count();
            Ok(format!(
                "dataset-build: {} identities (train {}, val {}, test {}) -> {}",
                m.identities.len(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test),
                out.join(pva_core::dataset::manifest::MANIFEST_FILE).display()
            ))
        }
        Command::RecognizerTrain { common } => {
            let cfg = setup(&common)?;
            let ckpt = common.out.unwrap_or(cfg.paths.checkpoints);
            let corpus = Corpus::load(&cfg.paths.dataset)?;
            let _lock = DirLock::acquire(&ckpt)?;
            let (train, holdout, n) = recognizer_examples(&corpus)?;
            let a = train_recognizer(RecognizerRole::EncoderA, &train, &holdout, n, &cfg.recognizer, derive_seed(cfg.seed, "recognizer.a"))?;
            let b = train_recognizer(RecognizerRole::EvalB, &train, &holdout, n, &cfg.recognizer, derive_seed(cfg.seed, "recognizer.b"))?;
            a.save(&ckpt.join(RECOGNIZER_A))?;
            b.save(&ckpt.join(RECOGNIZER_B))?;
            let clf = AttributeClassifier::train(
                &attribute_examples(&corpus, Split::Train),
                &attribute_examples(&corpus, Split::Val),
                &cfg.attributes,
                derive_seed(cfg.seed, "attributes"),
            )?;
            clf.save(&ckpt.join(ATTRIBUTES))?;
            Ok(format!(
                "recognizer-train: accuracy A {:.3}, B {:.3}; attribute accuracy {:?}",
                a.holdout_accuracy, b.holdout_accuracy, clf.accuracy
            ))
        }
        Command::Pretrain { common } => {
            let cfg = setup(&common)?;
            let ckpt = common.out.unwrap_or(cfg.paths.checkpoints);
            let corpus = Corpus::load(&cfg.paths.dataset)?;
            let sched = cfg.schedule.build()?;
            let _lock = DirLock::acquire(&ckpt)?;
            let (mut log, mut last) = logger(&ckpt.join("logs/pretrain.csv"))?;
            let state = pretrain_base(&corpus, &cfg.model, &sched, &cfg.pretrain, &mut |s| {
                last = s.loss;
                log.record(s)
            })?;
            save_checkpoint(&ckpt.join(BASE), &cfg.model, &state.params)?;
            state.save(&ckpt.join("state").join(BASE))?;
            Ok(format!("pretrain: {} steps, final loss {last:.5}", state.step))
        }
        Command::TrainPva { common } => {
            let cfg = setup(&common)?;
            let ckpt = common.out.unwrap_or(cfg.paths.checkpoints);
            let base = load_denoiser(&ckpt.join(BASE))?;
            let rec_a = Recognizer::load(&ckpt.join(RECOGNIZER_A))?;
            let corpus = Corpus::load(&cfg.paths.dataset)?;
            let sched = cfg.schedule.build()?;
            let _lock = DirLock::acquire(&ckpt)?;
            let params = init_pva_params(&base.params, &base.config, &rec_a, cfg.seed)?;
            let mut state = TrainState::new(Phase::PvaStage1, params, cfg.stage1.weight_decay);
            let (mut log, mut last) = logger(&ckpt.join("logs/train_pva.csv"))?;
            for stage in [&cfg.stage1, &cfg.stage2] {
                train_pva(&mut state, &corpus, &base.config, &sched, stage, &mut |s| {
                    last = s.loss;
                    log.record(s)
                })?;
            }
            save_checkpoint(&ckpt.join(PVA), &base.config, &state.params)?;
            state.save(&ckpt.join("state").join(PVA))?;
            Ok(format!("train-pva: {} steps, final loss {last:.5}", state.step))
        }
        Command::Finetune { common, identity, cross_attention } => {
            let cfg = setup(&common)?;
            let ckpt = common.out.unwrap_or(cfg.paths.checkpoints);
            let pva = load_denoiser(&ckpt.join(PVA))?;
            let corpus = Corpus::load(&cfg.paths.dataset)?;
            let id = corpus
                .identities
                .iter()
                .find(|i| i.id == identity)
                .ok_or_else(|| Error::Config(format!("identity {identity} not in the manifest")))?;
            let refs = ReferenceSet::new(id.id.clone(), id.references.iter().map(|r| r.image.clone()).collect())?;
            let sched = cfg.schedule.build()?;
            let mut ft = cfg.finetune.clone();
            ft.finetune_cross_attention |= cross_attention;
            let _lock = DirLock::acquire(&ckpt)?;
            let (mut log, mut last) = logger(&ckpt.join(format!("logs/finetune_{identity}.csv")))?;
            let tuned = finetune_identity(&refs, &pva, &sched, &ft, &mut |s| {
                last = s.loss;
                log.record(s)
            })?;
            save_checkpoint(&ckpt.join(FINETUNE).join(&identity), &tuned.config, &tuned.params)?;
            Ok(format!("finetune: {identity}, {} steps, final loss {last:.5}", ft.steps))
        }
        Command::Inpaint { common, image, mask, prompt, refs, identity, guidance, steps } => {
            let cfg = setup(&common)?;
            let out = common.out.unwrap_or(cfg.paths.output);
            let ckpt = &cfg.paths.checkpoints;
            let img = read_rgb_png(&image)?;
            let m = read_mask_png(&mask)?;
            let masked = MaskedImage::new(&img, &m)?;
            let mut ref_images = refs.iter().map(|p| read_rgb_png(p)).collect::<Result<Vec<_>>>()?;
            if let (Some(id), true) = (&identity, ref_images.is_empty()) {
                let corpus = Corpus::load(&cfg.paths.dataset)?;
                let data = corpus
                    .identities
                    .iter()
                    .find(|i| &i.id == id)
                    .ok_or_else(|| Error::Config(format!("identity {id} not in the manifest")))?;
                ref_images = data.references.iter().map(|r| r.image.clone()).collect();
            }
            if ref_images.len() > 5 {
                return Err(Error::Config(format!("at most 5 references, got {}", ref_images.len())));
            }
            let edit = prompt.as_deref().map(PromptTokens::encode).transpose()?;
            let mut sampler = cfg.sampler.clone();
            if let Some(g) = guidance {
                sampler.guidance_scale = g;
            }
            if let Some(s) = steps {
                sampler.steps = s;
            }
            let (model, visual) = if ref_images.is_empty() {
                (load_denoiser(&ckpt.join(BASE))?, None)
            } else {
                let dir: PathBuf = match &identity {
                    Some(id) => ckpt.join(FINETUNE).join(id),
                    None => ckpt.join(PVA),
                };
                let model = load_denoiser(&dir)?;
                let r: Vec<_> = ref_images.iter().collect();
                let v = visual_tokens(&model.params, &model.config, &r)?;
                (model, Some(v))
            };
            let task = match (&visual, &edit) {
                (None, _) => GuidanceTask::Default,
                (Some(_), Some(_)) => GuidanceTask::Controlled,
                (Some(_), None) => GuidanceTask::InpaintOnly,
            };
            sampler.task = task;
            let spec =
                build_guidance_conditions(task, &PromptTokens::neutral(), edit.as_ref(), visual.as_ref(), sampler.guidance_scale)?;
            let result = sample_inpaint(&model, &cfg.schedule.build()?, &masked, &spec, &sampler)?;
            let path = out.join("inpainted.png");
            write_rgb_png(&result, &path)?;
            Ok(format!(
                "inpaint: task {}, positive \"{}\", negative \"{}\", guidance {} -> {}",
                serde_json::to_value(task)?.as_str().unwrap_or("?"),
                spec.positive.prompt.decode(),
                spec.negative.prompt.decode(),
                sampler.guidance_scale,
                path.display()
            ))
        }
        Command::Evaluate { common, finetune, no_images } => {
            let cfg = setup(&common)?;
            let out = common.out.unwrap_or(cfg.paths.output);
            let ckpt = &cfg.paths.checkpoints;
            let pva = load_denoiser(&ckpt.join(PVA))?;
            let rec_b = Recognizer::load(&ckpt.join(RECOGNIZER_B))?;
            let clf = AttributeClassifier::load(&ckpt.join(ATTRIBUTES))?;
            let corpus = Corpus::load(&cfg.paths.dataset)?;
            let mut ec = cfg.evaluator.clone();
            ec.sampler = cfg.sampler.clone();
            if finetune {
                ec.finetune = Some(cfg.finetune.clone());
            }
            let outcome = evaluate_per_region(&pva, &corpus, &cfg.schedule.build()?, &rec_b, Some(&clf), &ec)?;
            write_text(&out.join("report.csv"), &outcome.report.to_csv())?;
            if !no_images {
                write_outputs(&out.join("images"), &outcome.samples)?;
            }
            let m = &outcome.report.mean;
            Ok(format!(
                "evaluate: {} outputs, mean id similarity {:.4}, fid_like {:.4} -> {}",
                outcome.samples.len(),
                m.id_sim_mean,
                m.fid_like,
                out.join("report.csv").display()
            ))
        }
        Command::Ablate { common, kind } => {
            let cfg = setup(&common)?;
            let ablation = Ablation::default_grid(&kind)?;
            let out = common.out.unwrap_or(cfg.paths.output);
            let ckpt = &cfg.paths.checkpoints;
            let pva = load_denoiser(&ckpt.join(PVA))?;
            let rec_b = Recognizer::load(&ckpt.join(RECOGNIZER_B))?;
            let clf = AttributeClassifier::load(&ckpt.join(ATTRIBUTES))?;
            let corpus = Corpus::load(&cfg.paths.dataset)?;
            let mut ec = cfg.evaluator.clone();
            ec.sampler = cfg.sampler.clone();
            let rows =
                ablation_sweep(&ablation, &pva, &corpus, &cfg.schedule.build()?, &rec_b, Some(&clf), &ec, &cfg.finetune)?;
            let path = out.join(format!("ablation_{kind}.csv"));
            write_text(&path, &ablation_csv(&ablation, &rows))?;
            let means: Vec<String> =
                rows.iter().map(|r| format!("{}={:.4}", r.value, r.report.mean.id_sim_mean)).collect();
            Ok(format!("ablate {kind}: id similarity {} -> {}", means.join(" "), path.display()))
        }
    }
}
