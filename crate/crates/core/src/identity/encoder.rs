//! Query-token transformer over reference features.

use super::features::VisualFeatures;
use super::recognizer::{facenet_forward, facenet_layers, flatten_images};
use crate::error::{Error, Result};
use crate::model::attention::{linear, self_attention};
use crate::model::denoiser::{attn_named, attn_params, layer_norm_named, mlp_named, mlp_params};
use crate::model::{Binder, DenoiserConfig, ParamStore};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor, Var};

/// Freshly initialized `idenc.*` parameters.
pub fn init_encoder(cfg: &DenoiserConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = stream(seed, "init.idenc");
    let d = cfg.width;
    let mut s = ParamStore::new();
    s.insert("idenc.proj.weight", Tensor::randn(&[cfg.feature_dim, d], 1.0 / (cfg.feature_dim as f64).sqrt(), &mut rng));
    s.insert("idenc.proj.bias", Tensor::zeros(&[d]));
    s.insert("idenc.queries", Tensor::randn(&[cfg.n_query, d], 0.02, &mut rng));
    for j in 0..cfg.encoder_blocks {
        let p = format!("idenc.blocks.{j}");
        ln(&mut s, &format!("{p}.ln1"), d);
        attn_params(&mut s, &format!("{p}.attn"), d, &mut rng);
        ln(&mut s, &format!("{p}.ln2"), d);
        mlp_params(&mut s, &format!("{p}.mlp"), d, d * cfg.mlp_ratio, &mut rng);
    }
    ln(&mut s, "idenc.final_ln", d);
    Ok(s)
}

fn ln(s: &mut ParamStore, prefix: &str, d: usize) {
    s.insert(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0));
    s.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]));
}

/// `N_query × D` visual tokens from `M × D_f` features. Feature tokens carry no
/// positional information, so the output is invariant to their order.
pub fn encode_identity_var(tape: &mut Tape, b: &mut Binder, cfg: &DenoiserConfig, features: Var) -> Result<Var> {
    if tape.value(features).rank() != 2 || tape.value(features).cols() != cfg.feature_dim {
        return Err(Error::shape(
            "encode_identity",
            format!("features {:?}, expected M×{}", tape.value(features).shape(), cfg.feature_dim),
        ));
    }
    let pw = b.get(tape, "idenc.proj.weight")?;
    let pb = b.get(tape, "idenc.proj.bias")?;
    let f = linear(tape, features, pw, pb)?;
    let q = b.get(tape, "idenc.queries")?;
    let mut x = tape.concat_rows(&[q, f])?;
    for j in 0..cfg.encoder_blocks {
        let p = format!("idenc.blocks.{j}");
        let h = layer_norm_named(tape, b, x, &format!("{p}.ln1"))?;
        let w = attn_named(tape, b, &format!("{p}.attn"))?;
        let a = self_attention(tape, h, &w, cfg.heads)?;
        x = tape.add(x, a)?;
        let h = layer_norm_named(tape, b, x, &format!("{p}.ln2"))?;
        let m = mlp_named(tape, b, h, &format!("{p}.mlp"))?;
        x = tape.add(x, m)?;
    }
    let x = layer_norm_named(tape, b, x, "idenc.final_ln")?;
    tape.slice_rows(x, 0, cfg.n_query)
}

/// Plain-tensor form of [`encode_identity_var`].
pub fn encode_identity(params: &ParamStore, cfg: &DenoiserConfig, features: &Tensor) -> Result<VisualFeatures> {
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let f = tape.constant(features.clone());
    let out = encode_identity_var(&mut tape, &mut b, cfg, f)?;
    VisualFeatures::new(tape.value(out).clone())
}

/// Full identity encoder E_I on the tape: recognizer features, then the query transformer.
pub fn visual_tokens_var(tape: &mut Tape, b: &mut Binder, cfg: &DenoiserConfig, refs: &[&Tensor]) -> Result<Var> {
    let x = tape.constant(flatten_images(refs)?);
    let layers = facenet_layers(b.store());
    let f = facenet_forward(tape, b, x, layers)?;
    encode_identity_var(tape, b, cfg, f)
}

/// [`visual_tokens_var`] with every parameter constant.
pub fn visual_tokens(params: &ParamStore, cfg: &DenoiserConfig, refs: &[&Tensor]) -> Result<VisualFeatures> {
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let out = visual_tokens_var(&mut tape, &mut b, cfg, refs)?;
    VisualFeatures::new(tape.value(out).clone())
}
