//! Fixtures shared by the benchmarks.

use pva_core::dataset::{MaskPool, StrokeParams};
use pva_core::diffusion::{assemble_inpaint_input, MaskedImage};
use pva_core::model::DenoiserConfig;
use pva_core::rng::stream;
use pva_core::train::Draw;
use pva_core::model::PromptTokens;
use pva_core::Tensor;

/// A denoiser input for the default configuration.
pub fn denoiser_input(cfg: &DenoiserConfig, seed: u64) -> Tensor {
    let mut rng = stream(seed, "bench.input");
    let s = cfg.image_size;
    let img = Tensor::randn(&[s, s, cfg.channels], 0.5, &mut rng);
    let pool = MaskPool::generate(1, s, &StrokeParams::default(), &mut rng).expect("mask");
    let masked = MaskedImage::new(&img, pool.sample(&mut rng)).expect("binary mask");
    assemble_inpaint_input(&img, &masked).expect("shapes match")
}

/// `n` random training draws, with `refs` reference images each when nonzero.
pub fn draws(cfg: &DenoiserConfig, n: usize, refs: usize, seed: u64) -> Vec<Draw> {
    let mut rng = stream(seed, "bench.draws");
    let s = cfg.image_size;
    let pool = MaskPool::generate(4, s, &StrokeParams::default(), &mut rng).expect("mask");
    (0..n)
        .map(|_| Draw {
            x0: Tensor::from_fn(&[s, s, cfg.channels], |i| ((i * 7) % 11) as f64 / 11.0),
            mask: pool.sample(&mut rng).clone(),
            prompt: PromptTokens::neutral().with_identity_token(),
            refs: (refs > 0).then(|| (0..refs).map(|_| Tensor::randn(&[s, s, cfg.channels], 0.3, &mut rng)).collect()),
        })
        .collect()
}
