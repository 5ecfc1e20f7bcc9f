//! Attention-only denoiser over patch tokens.

use rand::Rng;

use super::attention::{linear, pva_attention_vars, self_attention, AttnVars, VisualVars};
use super::config::DenoiserConfig;
use super::params::{Binder, ParamStore};
use super::vocab::{PromptTokens, IDENTITY_TOKEN, WORDS};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{sinusoidal_encoding, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Sinusoidal encoding of step `t` at width `d`.
pub fn time_embedding(t: usize, d: usize) -> Result<Tensor> {
    sinusoidal_encoding(t as f64, d)
}

/// `H×W×C` image to `N × p²C` tokens, row-major over the patch grid.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w, c] = img.image_dims("patchify")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", format!("{h}×{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let src = img.data();
    let mut out = Vec::with_capacity(img.numel());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * w + gx * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    let (gh, gw) = (h / patch, w / patch);
    if tokens.shape() != [gh * gw, patch * patch * c] {
        return Err(Error::shape("unpatchify", format!("{:?} for {h}×{w}×{c}", tokens.shape())));
    }
    let src = tokens.data();
    let mut out = vec![0.0; h * w * c];
    let mut i = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * w + gx * patch) * c;
                out[start..start + patch * c].copy_from_slice(&src[i..i + patch * c]);
                i += patch * c;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// One batch element for [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct DenoiseItem<'a> {
    /// Assembled `H×W×(2C+1)` input.
    pub z_tilde: &'a Tensor,
    pub prompt: &'a PromptTokens,
    /// `N_query × D` visual tokens on the same tape, or none for the text-only path.
    pub visual: Option<Var>,
    pub t: usize,
}

fn rand_param(store: &mut ParamStore, name: String, shape: &[usize], scale: f64, rng: &mut impl Rng) {
    store.insert(name, Tensor::randn(shape, scale, rng));
}

fn ln_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]));
}

pub(crate) fn attn_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) {
    let s = 1.0 / (d as f64).sqrt();
    for m in ["q", "k", "v", "out_w"] {
        rand_param(store, format!("{prefix}.{m}"), &[d, d], s, rng);
    }
    store.insert(format!("{prefix}.out_b"), Tensor::zeros(&[d]));
}

pub(crate) fn mlp_params(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut impl Rng) {
    rand_param(store, format!("{prefix}.w1"), &[d, hidden], 1.0 / (d as f64).sqrt(), rng);
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
    rand_param(store, format!("{prefix}.w2"), &[hidden, d], 1.0 / (hidden as f64).sqrt(), rng);
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
}

pub(crate) fn layer_norm_named(tape: &mut Tape, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let g = b.get(tape, &format!("{prefix}.gamma"))?;
    let be = b.get(tape, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, be, LN_EPS)
}

pub(crate) fn attn_named(tape: &mut Tape, b: &mut Binder, prefix: &str) -> Result<AttnVars> {
    Ok(AttnVars {
        q: b.get(tape, &format!("{prefix}.q"))?,
        k: b.get(tape, &format!("{prefix}.k"))?,
        v: b.get(tape, &format!("{prefix}.v"))?,
        out_w: b.get(tape, &format!("{prefix}.out_w"))?,
        out_b: b.get(tape, &format!("{prefix}.out_b"))?,
    })
}

pub(crate) fn mlp_named(tape: &mut Tape, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let w1 = b.get(tape, &format!("{prefix}.w1"))?;
    let b1 = b.get(tape, &format!("{prefix}.b1"))?;
    let w2 = b.get(tape, &format!("{prefix}.w2"))?;
    let b2 = b.get(tape, &format!("{prefix}.b2"))?;
    let h = linear(tape, x, w1, b1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, w2, b2)
}

/// Freshly initialized base parameters (`base.*`).
pub fn init_base(cfg: &DenoiserConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = stream(seed, "init.base");
    let d = cfg.width;
    let mut s = ParamStore::new();
    rand_param(&mut s, "base.patch_in.weight".into(), &[cfg.patch_in_dim(), d], 1.0 / (cfg.patch_in_dim() as f64).sqrt(), &mut rng);
    s.insert("base.patch_in.bias", Tensor::zeros(&[d]));
    rand_param(&mut s, "base.pos_embed".into(), &[cfg.tokens(), d], 0.1, &mut rng);
    rand_param(&mut s, "base.time.w1".into(), &[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
    s.insert("base.time.b1", Tensor::zeros(&[d]));
    rand_param(&mut s, "base.time.w2".into(), &[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
    s.insert("base.time.b2", Tensor::zeros(&[d]));
    rand_param(&mut s, "base.text_embed".into(), &[WORDS.len(), d], 1.0, &mut rng);
    for i in 0..cfg.blocks {
        let p = format!("base.blocks.{i}");
        ln_params(&mut s, &format!("{p}.ln1"), d);
        attn_params(&mut s, &format!("{p}.self_attn"), d, &mut rng);
        ln_params(&mut s, &format!("{p}.ln2"), d);
        attn_params(&mut s, &format!("{p}.cross"), d, &mut rng);
        ln_params(&mut s, &format!("{p}.ln3"), d);
        mlp_params(&mut s, &format!("{p}.mlp"), d, d * cfg.mlp_ratio, &mut rng);
    }
    ln_params(&mut s, "base.final_ln", d);
    rand_param(&mut s, "base.patch_out.weight".into(), &[d, cfg.patch_out_dim()], 0.02, &mut rng);
    s.insert("base.patch_out.bias", Tensor::zeros(&[cfg.patch_out_dim()]));
    Ok(s)
}

/// Adds the parallel visual matrices, copied from each block's text matrices,
/// and the shared identity token, initialized from the embedding of "person".
pub fn init_pva(cfg: &DenoiserConfig, store: &mut ParamStore) -> Result<()> {
    for i in 0..cfg.blocks {
        for (text, vis) in [("q", "qp"), ("k", "kp"), ("v", "vp")] {
            let t = store.get(&format!("base.blocks.{i}.cross.{text}"))?.clone();
            store.insert(format!("pva.blocks.{i}.{vis}"), t);
        }
    }
    let person = WORDS.iter().position(|w| *w == "person").expect("person in vocabulary");
    let row = store.get("base.text_embed")?.row(person).to_vec();
    store.insert("special_token", Tensor::new(vec![1, cfg.width], row)?);
    Ok(())
}

/// Copies Q, K, V into Q′, K′, V′ for every block of a store that has them.
pub fn init_from_text(cfg: &DenoiserConfig, store: &mut ParamStore) -> Result<()> {
    for i in 0..cfg.blocks {
        for (text, vis) in [("q", "qp"), ("k", "kp"), ("v", "vp")] {
            let t = store.get(&format!("base.blocks.{i}.cross.{text}"))?.clone();
            *store.get_mut(&format!("pva.blocks.{i}.{vis}"))? = t;
        }
    }
    Ok(())
}

/// Text tokens `G_T` for `prompt`.
pub fn text_tokens(tape: &mut Tape, b: &mut Binder, cfg: &DenoiserConfig, prompt: &PromptTokens) -> Result<Var> {
    if prompt.len() > cfg.prompt_len {
        return Err(Error::Invalid(format!(
            "prompt of {} tokens exceeds cap {}",
            prompt.len(),
            cfg.prompt_len
        )));
    }
    let words = b.get(tape, "base.text_embed")?;
    if prompt.ids().contains(&IDENTITY_TOKEN) {
        let special = b.get(tape, "special_token")?;
        let table = tape.concat_rows(&[words, special])?;
        tape.embedding(table, prompt.ids())
    } else {
        tape.embedding(words, prompt.ids())
    }
}

/// Noise estimate for a batch, as `B·N × p²C` tokens.
pub fn forward(tape: &mut Tape, b: &mut Binder, cfg: &DenoiserConfig, items: &[DenoiseItem]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = cfg.tokens();
    let d = cfg.width;
    let expect = [cfg.image_size, cfg.image_size, cfg.in_channels()];
    let mut patches = Vec::with_capacity(items.len() * n * cfg.patch_in_dim());
    let mut times = Vec::with_capacity(items.len() * d);
    for it in items {
        if it.z_tilde.shape() != expect {
            return Err(Error::shape("denoise", format!("input {:?}, expected {expect:?}", it.z_tilde.shape())));
        }
        patches.extend(patchify(it.z_tilde, cfg.patch)?.into_data());
        times.extend(time_embedding(it.t, d)?.into_data());
    }
    let bsz = items.len();
    let x_in = tape.constant(Tensor::new(vec![bsz * n, cfg.patch_in_dim()], patches)?);
    let pw = b.get(tape, "base.patch_in.weight")?;
    let pb = b.get(tape, "base.patch_in.bias")?;
    let x = linear(tape, x_in, pw, pb)?;
    let x = tape.reshape(x, &[bsz, n, d])?;
    let pos = b.get(tape, "base.pos_embed")?;
    let x = tape.add_broadcast(x, pos)?;
    let x = tape.reshape(x, &[bsz * n, d])?;

    let sinus = tape.constant(Tensor::new(vec![bsz, d], times)?);
    let tw1 = b.get(tape, "base.time.w1")?;
    let tb1 = b.get(tape, "base.time.b1")?;
    let tw2 = b.get(tape, "base.time.w2")?;
    let tb2 = b.get(tape, "base.time.b2")?;
    let temb = linear(tape, sinus, tw1, tb1)?;
    let temb = tape.gelu(temb)?;
    let temb = linear(tape, temb, tw2, tb2)?;
    let rows: Vec<usize> = (0..bsz).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let temb = tape.embedding(temb, &rows)?;
    let mut x = tape.add(x, temb)?;

    let mut g_t = Vec::with_capacity(bsz);
    for it in items {
        g_t.push(text_tokens(tape, b, cfg, it.prompt)?);
    }

    for i in 0..cfg.blocks {
        let p = format!("base.blocks.{i}");
        let h = layer_norm_named(tape, b, x, &format!("{p}.ln1"))?;
        let w = attn_named(tape, b, &format!("{p}.self_attn"))?;
        let mut outs = Vec::with_capacity(bsz);
        for j in 0..bsz {
            let hj = if bsz == 1 { h } else { tape.slice_rows(h, j * n, n)? };
            outs.push(self_attention(tape, hj, &w, cfg.heads)?);
        }
        let a = if bsz == 1 { outs[0] } else { tape.concat_rows(&outs)? };
        x = tape.add(x, a)?;

        let h = layer_norm_named(tape, b, x, &format!("{p}.ln2"))?;
        let w = attn_named(tape, b, &format!("{p}.cross"))?;
        let mut vis: Option<VisualVars> = None;
        let mut outs = Vec::with_capacity(bsz);
        for (j, it) in items.iter().enumerate() {
            let hj = if bsz == 1 { h } else { tape.slice_rows(h, j * n, n)? };
            if it.visual.is_some() && vis.is_none() {
                vis = Some(VisualVars {
                    qp: b.get(tape, &format!("pva.blocks.{i}.qp"))?,
                    kp: b.get(tape, &format!("pva.blocks.{i}.kp"))?,
                    vp: b.get(tape, &format!("pva.blocks.{i}.vp"))?,
                });
            }
            outs.push(pva_attention_vars(tape, hj, g_t[j], it.visual, &w, vis.as_ref(), cfg.heads)?);
        }
        let a = if bsz == 1 { outs[0] } else { tape.concat_rows(&outs)? };
        x = tape.add(x, a)?;

        let h = layer_norm_named(tape, b, x, &format!("{p}.ln3"))?;
        let m = mlp_named(tape, b, h, &format!("{p}.mlp"))?;
        x = tape.add(x, m)?;
    }
    let h = layer_norm_named(tape, b, x, "base.final_ln")?;
    let ow = b.get(tape, "base.patch_out.weight")?;
    let ob = b.get(tape, "base.patch_out.bias")?;
    linear(tape, h, ow, ob)
}

/// Patchified target for a batch of `H×W×C` noise tensors, matching [`forward`]'s rows.
pub fn patchify_batch(cfg: &DenoiserConfig, images: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * cfg.image_numel());
    for img in images {
        data.extend(patchify(img, cfg.patch)?.into_data());
    }
    Tensor::new(vec![images.len() * cfg.tokens(), cfg.patch_out_dim()], data)
}

/// A denoiser's configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn new_base(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = init_base(&config, seed)?;
        Ok(Denoiser { config, params })
    }

    /// ε̂ for one input; all parameters treated as constants.
    pub fn predict(&self, z_tilde: &Tensor, prompt: &PromptTokens, g_v: Option<&Tensor>, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let visual = g_v.map(|g| tape.constant(g.clone()));
        let item = DenoiseItem { z_tilde, prompt, visual, t };
        let out = forward(&mut tape, &mut b, &self.config, &[item])?;
        let c = &self.config;
        unpatchify(tape.value(out), c.image_size, c.image_size, c.channels, c.patch)
    }
}

/// Free-function form of [`Denoiser::predict`].
pub fn denoise_predict(
    z_tilde: &Tensor,
    prompt: &PromptTokens,
    g_v: Option<&Tensor>,
    t: usize,
    model: &Denoiser,
) -> Result<Tensor> {
    model.predict(z_tilde, prompt, g_v, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig { image_size: 4, patch: 2, width: 8, blocks: 1, heads: 2, ..DenoiserConfig::default() }
    }

    #[test]
    fn patchify_round_trips() {
        let img = Tensor::from_fn(&[4, 6, 3], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[6, 12]);
        assert_eq!(&p.row(0)[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(&p.row(0)[6..], &[18.0, 19.0, 20.0, 21.0, 22.0, 23.0]);
        assert!(unpatchify(&p, 4, 6, 3, 2).unwrap().bit_eq(&img));
    }

    #[test]
    fn time_embedding_is_injective_and_bounded() {
        let d = 64;
        let embs: Vec<Tensor> = (0..=200).map(|t| time_embedding(t, d).unwrap()).collect();
        for (i, a) in embs.iter().enumerate() {
            let norm = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= (d as f64).sqrt() + 1e-12);
            for b in &embs[i + 1..] {
                assert!(a.max_abs_diff(b) > 1e-6);
            }
        }
        assert!(time_embedding(3, 7).is_err());
    }

    #[test]
    fn predict_shape_and_fallback() {
        let cfg = tiny();
        let base = Denoiser::new_base(cfg.clone(), 1).unwrap();
        let mut full = base.clone();
        init_pva(&cfg, &mut full.params).unwrap();
        let z = Tensor::from_fn(&[4, 4, 7], |i| (i as f64 * 0.37).sin());
        let p = PromptTokens::neutral();
        let a = base.predict(&z, &p, None, 17).unwrap();
        assert_eq!(a.shape(), &[4, 4, 3]);
        assert!(full.predict(&z, &p, None, 17).unwrap().bit_eq(&a));
        let g_v = Tensor::from_fn(&[cfg.n_query, cfg.width], |i| (i as f64).cos());
        let ps = p.with_identity_token();
        let with = full.predict(&z, &ps, Some(&g_v), 17).unwrap();
        assert!(with.max_abs_diff(&a) > 0.0);
    }

    #[test]
    fn batched_forward_matches_single() {
        let cfg = tiny();
        let m = Denoiser::new_base(cfg.clone(), 2).unwrap();
        let z1 = Tensor::from_fn(&[4, 4, 7], |i| (i as f64 * 0.1).sin());
        let z2 = Tensor::from_fn(&[4, 4, 7], |i| (i as f64 * 0.3).cos());
        let p1 = PromptTokens::neutral();
        let p2 = PromptTokens::empty();
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&m.params);
        let items = [
            DenoiseItem { z_tilde: &z1, prompt: &p1, visual: None, t: 5 },
            DenoiseItem { z_tilde: &z2, prompt: &p2, visual: None, t: 90 },
        ];
        let out = forward(&mut tape, &mut b, &cfg, &items).unwrap();
        let both = tape.value(out).clone();
        let single = patchify(&m.predict(&z2, &p2, None, 90).unwrap(), 2).unwrap();
        let n = cfg.tokens();
        let second = &both.data()[n * 12..];
        let diff = second.iter().zip(single.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }
}
