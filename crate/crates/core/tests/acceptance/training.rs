use rand::Rng;

use pva_core::dataset::{RegionKind, Split};
use pva_core::diffusion::NoiseSchedule;
use pva_core::identity::{init_encoder, ReferenceSet};
use pva_core::model::{init_pva, Denoiser, DenoiserConfig, ParamGroup, ParamStore};
use pva_core::rng::stream;
use pva_core::train::{
    apply_update, dsm_loss_and_grads, finetune_identity, no_log, pretrain_base, stratified_times, train_pva, Draw, Phase,
    TrainConfig, TrainState,
};
use pva_core::{Error, Tensor};

use crate::{report, small_corpus, tiny_recognizer};

fn tiny() -> DenoiserConfig {
    DenoiserConfig { image_size: 8, width: 32, blocks: 2, heads: 2, mlp_ratio: 2, ..DenoiserConfig::default() }
}

fn pretrained(steps: usize) -> TrainState {
    let cfg = TrainConfig { steps, lr: 3e-3, ..TrainConfig::toy(Phase::PretrainBase) };
    pretrain_base(small_corpus(), &tiny(), &NoiseSchedule::default(), &cfg, &mut no_log).unwrap()
}

fn variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

#[test]
fn criterion_07_stratified_sampling() {
    let _serial = crate::exclusive();
    let t_max = 200;
    let mut rng = stream(7, "strata");
    let mut in_stratum = true;
    let mut draws = 0;
    for m in 1..=9 {
        for _ in 0..50 {
            let ts = stratified_times(m, 3, t_max, &mut rng).unwrap();
            for (i, g) in ts.iter().enumerate() {
                let lo = i as f64 * t_max as f64 / m as f64;
                let hi = ((i + 1) as f64 * t_max as f64 / m as f64).ceil();
                for &t in g {
                    in_stratum &= (t as f64) > lo && (t as f64) <= hi && (1..=t_max).contains(&t);
                    draws += 1;
                }
            }
        }
    }
    assert!(in_stratum, "a stratified draw left its stratum");

    // Minibatch loss estimator on a briefly trained denoiser: four draws, each
    // with one time, either i.i.d. uniform or one per stratum.
    let state = pretrained(300);
    let cfg = tiny();
    let sched = NoiseSchedule::default();
    let corpus = small_corpus();
    let ids = corpus.split(Split::Train);
    let trials = 300;
    let batch = 4;
    let mut est = [Vec::new(), Vec::new()];
    for trial in 0..trials {
        let mut pick = stream(trial, "strata.pick");
        let pool: Vec<Draw> = (0..batch)
            .map(|_| {
                let id = ids[pick.random_range(0..ids.len())];
                let item = &id.inference[pick.random_range(0..id.inference.len())];
                Draw {
                    x0: item.render.image.clone(),
                    mask: item.masks[&RegionKind::Random].clone(),
                    prompt: pva_core::model::PromptTokens::neutral(),
                    refs: None,
                }
            })
            .collect();
        for (k, m) in [1usize, 4].into_iter().enumerate() {
            let mut rng = stream(trial, &format!("strata.times.{m}"));
            let times: Vec<Vec<usize>> = if m == 1 {
                stratified_times(1, batch, sched.t_max(), &mut rng).unwrap()[0].iter().map(|&t| vec![t]).collect()
            } else {
                stratified_times(m, 1, sched.t_max(), &mut rng).unwrap().into_iter().collect()
            };
            let (loss, _) = dsm_loss_and_grads(&state.params, &cfg, &sched, &[], &[], &pool, &times, &mut rng).unwrap();
            est[k].push(loss);
        }
    }
    let (v1, v4) = (variance(&est[0]), variance(&est[1]));
    report(
        7,
        "stratified sampling",
        in_stratum && v4 <= v1,
        format!("{draws} draws in stratum; estimator variance m=4 {v4:.3e} vs m=1 {v1:.3e} over {trials} trials"),
    );
}

fn pva_state(base: &ParamStore, cfg: &DenoiserConfig) -> TrainState {
    let mut params = base.subset(&[ParamGroup::Base]);
    init_pva(cfg, &mut params).unwrap();
    params.merge(&init_encoder(cfg, 8).unwrap());
    params.merge(&tiny_recognizer(cfg, 8));
    TrainState::new(Phase::PvaStage1, params, 1e-2)
}

fn changed(a: &ParamStore, b: &ParamStore) -> Vec<ParamGroup> {
    ParamGroup::ALL.into_iter().filter(|&g| !a.group_bit_eq(b, g)).collect()
}

#[test]
fn criterion_08_frozen_group_integrity() {
    let _serial = crate::exclusive();
    let cfg = tiny();
    let sched = NoiseSchedule::default();
    let corpus = small_corpus();
    let base = pretrained(20).params;
    let mut state = pva_state(&base, &cfg);
    let start = state.params.clone();

    let s1 = TrainConfig { steps: 10, ..TrainConfig::toy(Phase::PvaStage1) };
    train_pva(&mut state, corpus, &cfg, &sched, &s1, &mut no_log).unwrap();
    let after1 = state.params.clone();
    let c1 = changed(&start, &after1);
    let stage1_ok = c1 == [ParamGroup::PvaMatrices, ParamGroup::IdEncoderTransformer, ParamGroup::SpecialToken];

    let s2 = TrainConfig { steps: 10, ..TrainConfig::toy(Phase::PvaStage2) };
    train_pva(&mut state, corpus, &cfg, &sched, &s2, &mut no_log).unwrap();
    let c2 = changed(&after1, &state.params);
    let stage2_ok = c2.contains(&ParamGroup::IdEncoderFacenet) && !c2.contains(&ParamGroup::Base);

    let model = Denoiser { config: cfg.clone(), params: state.params.clone() };
    let id = corpus.split(Split::Test)[0];
    let refs = ReferenceSet::new(id.id.clone(), id.references.iter().map(|r| r.image.clone()).collect()).unwrap();
    let ft = TrainConfig { steps: 5, ..TrainConfig::toy(Phase::Finetune) };
    let tuned = finetune_identity(&refs, &model, &sched, &ft, &mut no_log).unwrap();
    let cf = changed(&model.params, &tuned.params);
    let finetune_ok = cf == [ParamGroup::PvaMatrices];

    let ft_x = TrainConfig { finetune_cross_attention: true, ..ft.clone() };
    let tuned_x = finetune_identity(&refs, &model, &sched, &ft_x, &mut no_log).unwrap();
    let moved: Vec<&String> = model
        .params
        .iter()
        .filter(|(n, t)| !tuned_x.params.get(n).unwrap().bit_eq(t))
        .map(|(n, _)| n)
        .filter(|n| ParamGroup::of(n) != Some(ParamGroup::PvaMatrices))
        .collect();
    let cross_ok = !moved.is_empty() && moved.iter().all(|n| n.contains(".cross.") && !n.contains("out_"));

    // A gradient for a frozen group is refused rather than applied.
    let mut guard = TrainState::new(Phase::Finetune, model.params.clone(), 1e-2);
    let mut grads = std::collections::BTreeMap::new();
    grads.insert("base.final_ln.gamma".to_string(), Tensor::full(&[cfg.width], 1.0));
    let refused = matches!(apply_update(&mut guard, &ft, 1.0, &[], &grads), Err(Error::FrozenGroup { .. }))
        && guard.params == model.params;

    report(
        8,
        "frozen-group integrity",
        stage1_ok && stage2_ok && finetune_ok && cross_ok && refused,
        format!(
            "stage1 changed {c1:?}; stage2 changed {c2:?}; finetune changed {cf:?}; cross-attention finetune also moved {} base.*.cross.{{q,k,v}} tensors ({cross_ok}); frozen gradient refused: {refused}",
            moved.len()
        ),
    );
}
