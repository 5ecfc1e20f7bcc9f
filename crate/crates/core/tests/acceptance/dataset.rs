use std::collections::BTreeSet;

use rand::Rng;

use pva_core::dataset::masks::{dilate_box, is_binary, MaskPool, StrokeParams};
use pva_core::dataset::{
    build_dataset, dedup_scan, render_identity_image, BuilderConfig, Corpus, IdentitySpec, PixelBox, RenderParams, Split,
};
use pva_core::rng::stream;
use pva_core::Tensor;

use crate::report;

fn distinct_images(n: usize) -> Vec<Tensor> {
    let mut rng = stream(9, "dedup.images");
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        let spec = IdentitySpec::sample(format!("d{i}"), &mut rng);
        let (img, _) = render_identity_image(&spec, &RenderParams::sample(&mut rng), 16).unwrap();
        out.push(img);
        i += 1;
    }
    out
}

#[test]
fn criterion_09_dataset_pipeline() {
    let _serial = crate::exclusive();
    let dir = tempfile::tempdir().unwrap();
    let cfg = BuilderConfig { identities: 200, ..BuilderConfig::default() };
    let manifest = build_dataset(&cfg, dir.path()).unwrap();
    let count = |s| manifest.split(s).count();
    let splits = (count(Split::Train), count(Split::Val), count(Split::Test));
    let splits_ok = splits == (120, 20, 60);

    let corpus = Corpus::load(dir.path()).unwrap();
    let mut masks = 0;
    let mut binary = true;
    for id in &corpus.identities {
        for item in &id.inference {
            for m in item.masks.values() {
                binary &= is_binary(m);
                masks += 1;
            }
        }
    }
    let pool = MaskPool::generate(200, 16, &StrokeParams::default(), &mut stream(9, "pool")).unwrap();
    for _ in 0..200 {
        binary &= is_binary(pool.sample(&mut stream(masks as u64, "pick")));
        masks += 1;
    }

    // 1000 distinct images, then an exact copy and a mirror of 100 of them.
    let mut imgs = distinct_images(1000);
    let baseline_groups = dedup_scan(&imgs).unwrap();
    let mut rng = stream(9, "dedup.inject");
    let mut expected = BTreeSet::new();
    for k in 0..200 {
        let src = rng.random_range(0..1000);
        let copy = if k % 2 == 0 { imgs[src].clone() } else { imgs[src].flip_horizontal().unwrap() };
        expected.insert((src, imgs.len()));
        imgs.push(copy);
    }
    let groups = dedup_scan(&imgs).unwrap();
    let mut found = BTreeSet::new();
    let mut false_pos = 0;
    for g in &groups {
        let originals: Vec<usize> = g.iter().copied().filter(|&i| i < 1000).collect();
        if originals.len() != 1 {
            false_pos += 1;
            continue;
        }
        for &i in g.iter().filter(|&&i| i >= 1000) {
            found.insert((originals[0], i));
        }
    }
    let recall = found.intersection(&expected).count() as f64 / expected.len() as f64;
    false_pos += found.difference(&expected).count();
    let dedup_ok = baseline_groups.is_empty() && recall == 1.0 && false_pos == 0;

    let mut rng = stream(9, "boxes");
    let mut extents_ok = true;
    for _ in 0..2000 {
        let x0 = rng.random_range(0..14);
        let y0 = rng.random_range(0..14);
        let b = PixelBox { x0, y0, x1: rng.random_range(x0 + 1..=16), y1: rng.random_range(y0 + 1..=16) };
        let d = dilate_box(&b, 0.2).unwrap();
        let want_w = (1.2 * b.width() as f64 - 1e-9).ceil() as i64;
        let want_h = (1.2 * b.height() as f64 - 1e-9).ceil() as i64;
        extents_ok &= d.x1 - d.x0 == want_w && d.y1 - d.y0 == want_h;
    }
    // Exact products must not be pushed up by float error: 1.2·5 = 6.
    let five = dilate_box(&PixelBox { x0: 0, y0: 0, x1: 5, y1: 10 }, 0.2).unwrap();
    extents_ok &= five.x1 - five.x0 == 6 && five.y1 - five.y0 == 12;

    report(
        9,
        "dataset pipeline",
        splits_ok && binary && dedup_ok && extents_ok,
        format!(
            "splits {splits:?}; {masks} masks binary: {binary}; dedup recall {recall:.3} with {false_pos} false positives over 1000 distinct + 200 injected; dilated extents exact: {extents_ok}"
        ),
    );
}
