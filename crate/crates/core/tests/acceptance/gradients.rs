use std::time::{Duration, Instant};

use pva_core::diffusion::assemble_inpaint_input;
use pva_core::diffusion::MaskedImage;
use pva_core::identity::recognizer::init_facenet;
use pva_core::identity::{init_encoder, visual_tokens_var, RecognizerConfig};
use pva_core::model::denoiser::patchify_batch;
use pva_core::model::{forward, init_base, init_pva, Binder, DenoiseItem, DenoiserConfig, ParamStore, PromptTokens};
use pva_core::rng::stream;
use pva_core::tensor::{finite_diff_check, DEFAULT_STEP};
use pva_core::{Result, Tape, Tensor, Var};

use crate::report;

const TOL: f64 = 1e-4;
const BUDGET: Duration = Duration::from_secs(120);

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut stream(seed, "grad"))
}

/// Reduces any output to a scalar with fixed random weights, so every output
/// element contributes a distinct amount to the checked gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand(tape.value(y).shape(), seed ^ 0xabcd));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Errors = Vec<(String, f64)>;

fn check(out: &mut Errors, name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let err = finite_diff_check(|t, v| { let y = f(t, v)?; project(t, y, 7) }, x, DEFAULT_STEP).unwrap();
    out.push((name.to_string(), err));
}

fn elementwise_and_reduction_ops(out: &mut Errors) {
    let x = rand(&[3, 4], 1);
    let other = rand(&[3, 4], 2);
    let row = rand(&[4], 3);
    check(out, "add", &x, |t, v| { let o = t.constant(other.clone()); t.add(v, o) });
    check(out, "sub", &x, |t, v| { let o = t.constant(other.clone()); t.sub(o, v) });
    check(out, "mul", &x, |t, v| { let o = t.constant(other.clone()); t.mul(v, o) });
    check(out, "mul_self", &x, |t, v| t.mul(v, v));
    check(out, "add_broadcast", &x, |t, v| { let r = t.constant(row.clone()); t.add_broadcast(v, r) });
    check(out, "add_broadcast_row", &row, |t, v| { let m = t.constant(other.clone()); t.add_broadcast(m, v) });
    check(out, "scale", &x, |t, v| t.scale(v, -2.5));
    check(out, "gelu", &x, |t, v| t.gelu(v));
    check(out, "softmax", &x, |t, v| t.softmax(v));
    check(out, "sum", &x, |t, v| t.sum(v));
    check(out, "mean", &x, |t, v| t.mean(v));
    check(out, "transpose", &x, |t, v| t.transpose(v));
    check(out, "reshape", &x, |t, v| t.reshape(v, &[2, 6]));
    check(out, "l2_normalize_rows", &x, |t, v| t.l2_normalize_rows(v));
}

fn matrix_ops(out: &mut Errors) {
    let a = rand(&[3, 5], 4);
    let b = rand(&[5, 2], 5);
    let bt = rand(&[2, 5], 6);
    check(out, "matmul_lhs", &a, |t, v| { let o = t.constant(b.clone()); t.matmul(v, o) });
    check(out, "matmul_rhs", &b, |t, v| { let o = t.constant(a.clone()); t.matmul(o, v) });
    check(out, "matmul_t_lhs", &a, |t, v| { let o = t.constant(bt.clone()); t.matmul_t(v, o) });
    check(out, "matmul_t_rhs", &bt, |t, v| { let o = t.constant(a.clone()); t.matmul_t(o, v) });
    check(out, "matmul_t_self", &a, |t, v| t.matmul_t(v, v));
}

fn structural_ops(out: &mut Errors) {
    let x = rand(&[4, 3], 7);
    let y = rand(&[2, 3], 8);
    let z = rand(&[4, 2], 9);
    check(out, "concat_rows", &x, |t, v| { let o = t.constant(y.clone()); t.concat_rows(&[o, v, o]) });
    check(out, "concat_cols", &x, |t, v| { let o = t.constant(z.clone()); t.concat_cols(&[v, o]) });
    check(out, "slice_rows", &x, |t, v| t.slice_rows(v, 1, 2));
    check(out, "slice_cols", &x, |t, v| t.slice_cols(v, 1, 2));
    check(out, "embedding", &x, |t, v| t.embedding(v, &[3, 0, 3, 1]));
}

fn normalization_and_losses(out: &mut Errors) {
    let x = rand(&[3, 6], 10);
    let g = rand(&[6], 11);
    let b = rand(&[6], 12);
    let target = rand(&[3, 6], 13);
    check(out, "layer_norm_x", &x, |t, v| { let (g, b) = (t.constant(g.clone()), t.constant(b.clone())); t.layer_norm(v, g, b, 1e-5) });
    check(out, "layer_norm_gamma", &g, |t, v| { let (x, b) = (t.constant(x.clone()), t.constant(b.clone())); t.layer_norm(x, v, b, 1e-5) });
    check(out, "layer_norm_beta", &b, |t, v| { let (x, g) = (t.constant(x.clone()), t.constant(g.clone())); t.layer_norm(x, g, v, 1e-5) });
    check(out, "mse", &x, |t, v| { let o = t.constant(target.clone()); t.mse(v, o) });
    check(out, "cross_entropy", &x, |t, v| t.cross_entropy(v, &[0, 5, 2]));
    let targets: Vec<f64> = (0..18).map(|i| (i % 3) as f64 / 2.0).collect();
    check(out, "bce_with_logits", &x, |t, v| t.bce_with_logits(v, &targets));
}

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 4,
        patch: 2,
        width: 8,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        n_query: 2,
        feature_dim: 4,
        encoder_blocks: 1,
        ..DenoiserConfig::default()
    }
}

fn full_params(cfg: &DenoiserConfig) -> ParamStore {
    let mut p = init_base(cfg, 1).unwrap();
    init_pva(cfg, &mut p).unwrap();
    // Perturb the parallel matrices so they differ from their text copies.
    for i in 0..cfg.blocks {
        for m in ["qp", "kp", "vp"] {
            let name = format!("pva.blocks.{i}.{m}");
            let t = p.get(&name).unwrap();
            let noise = rand(t.shape(), 20 + i as u64);
            let next = t.zip_map(&noise, |a, n| a + 0.3 * n).unwrap();
            p.insert(name, next);
        }
    }
    p.merge(&init_encoder(cfg, 2).unwrap());
    let rc = RecognizerConfig { input_dim: cfg.image_numel(), hidden: vec![6], feature_dim: cfg.feature_dim, ..RecognizerConfig::default() };
    p.merge(&init_facenet(&rc, &mut stream(3, "facenet")));
    p
}

/// Denoise→loss through the text path, PVA, the identity encoder and the facenet.
fn composition_loss(p: &ParamStore, cfg: &DenoiserConfig, name: &str, t: &mut Tape, v: Var) -> Result<Var> {
    let img = rand(&[4, 4, 3], 30).map(|x| x.abs().min(1.0))?;
    let mask = Tensor::from_fn(&[4, 4], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
    let masked = MaskedImage::new(&img, &mask)?;
    let z = assemble_inpaint_input(&rand(&[4, 4, 3], 31), &masked)?;
    let refs = [rand(&[4, 4, 3], 32), rand(&[4, 4, 3], 33)];
    let refs: Vec<&Tensor> = refs.iter().collect();
    let prompt = PromptTokens::neutral().with_identity_token();
    let mut b = Binder::frozen(p);
    b.set_override(name, v);
    let vis = visual_tokens_var(t, &mut b, cfg, &refs)?;
    let items = [DenoiseItem { z_tilde: &z, prompt: &prompt, visual: Some(vis), t: 57 }];
    let out = forward(t, &mut b, cfg, &items)?;
    let target = t.constant(patchify_batch(cfg, &[&rand(&[4, 4, 3], 34)])?);
    t.mse(out, target)
}

fn full_denoise_loss_composition(out: &mut Errors) {
    let cfg = tiny();
    let p = full_params(&cfg);
    let names = [
        "base.patch_in.weight",
        "base.blocks.0.cross.q",
        "base.blocks.0.cross.v",
        "base.blocks.0.self_attn.k",
        "base.text_embed",
        "pva.blocks.0.qp",
        "pva.blocks.0.kp",
        "pva.blocks.0.vp",
        "idenc.queries",
        "idenc.proj.weight",
        "facenet.l0.weight",
        "special_token",
    ];
    for name in names {
        let x = p.get(name).unwrap_or_else(|_| panic!("missing {name}")).clone();
        let err = finite_diff_check(|t, v| composition_loss(&p, &cfg, name, t, v), &x, DEFAULT_STEP).unwrap();
        out.push((format!("denoise_loss/{name}"), err));
    }
}

#[test]
fn criterion_01_gradient_suite() {
    let _serial = crate::exclusive();
    let start = Instant::now();
    let mut errs = Errors::new();
    elementwise_and_reduction_ops(&mut errs);
    matrix_ops(&mut errs);
    structural_ops(&mut errs);
    normalization_and_losses(&mut errs);
    full_denoise_loss_composition(&mut errs);
    let elapsed = start.elapsed();
    let (worst_name, worst) = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<_> = errs.iter().filter(|(_, e)| !(*e <= TOL)).map(|(n, e)| format!("{n}={e:.2e}")).collect();
    report(
        1,
        "gradient suite",
        failing.is_empty() && elapsed < BUDGET,
        format!("{} checks, worst {worst:.2e} ({worst_name}), tol {TOL:e}, {:.1}s of {}s; failing: {failing:?}", errs.len(), elapsed.as_secs_f64(), BUDGET.as_secs()),
    );
}
