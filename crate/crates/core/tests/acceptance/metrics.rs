use pva_core::eval::{frechet_distance, kid_mmd, MetricReport, RegionRow};
use pva_core::rng::stream;
use pva_core::Tensor;

use crate::report;

const FID_TOL: f64 = 1e-8;
const KID_TOL: f64 = 1e-10;
const MEAN_TOL: f64 = 5e-4;

fn row(region: &str, id_sim: f64, fid: f64) -> RegionRow {
    RegionRow { region: region.into(), id_sim_mean: id_sim, id_sim_sd: 0.0, fid_like: fid, kid_like: 0.0, prompt_alignment: None }
}

#[test]
fn criterion_10_metric_self_consistency() {
    let _serial = crate::exclusive();
    let mut rng = stream(10, "metrics");
    let a = Tensor::randn(&[200, 8], 1.0, &mut rng);
    let self_fid = frechet_distance(&a, &a).unwrap();

    let d: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 0.6).collect();
    let shifted = Tensor::new(a.shape().to_vec(), a.data().iter().enumerate().map(|(i, v)| v + d[i % 8]).collect()).unwrap();
    let want = d.iter().map(|x| x * x).sum::<f64>();
    let shift_err = (frechet_distance(&a, &shifted).unwrap() - want).abs();

    // Sample covariances exactly I and 4I with equal means.
    let s = 1.5f64.sqrt();
    let pts = |k: f64| Tensor::new(vec![4, 2], vec![k * s, 0.0, -k * s, 0.0, 0.0, k * s, 0.0, -k * s]).unwrap();
    let scale_err = (frechet_distance(&pts(1.0), &pts(2.0)).unwrap() - 2.0).abs();

    let ka = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
    let kb = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let kid_err = (kid_mmd(&ka, &kb).unwrap() - 7.0).abs();

    let sims = MetricReport::from_rows(vec![
        row("lower_face", 0.444, 7.039),
        row("eye_brow", 0.613, 4.244),
        row("whole_face", 0.094, 12.301),
        row("random", 0.283, 9.383),
    ])
    .unwrap();
    let sim_err = (sims.mean.id_sim_mean - 0.3585).abs();
    let fid_err = (sims.mean.fid_like - 8.242).abs();

    let pass = self_fid.abs() <= FID_TOL
        && shift_err <= FID_TOL
        && scale_err <= FID_TOL
        && kid_err <= KID_TOL
        && sim_err <= MEAN_TOL
        && fid_err <= MEAN_TOL;
    report(
        10,
        "metric self-consistency",
        pass,
        format!(
            "FID(A,A)={self_fid:.1e}; mean-shift err {shift_err:.1e}; I vs 4I err {scale_err:.1e}; KID hand err {kid_err:.1e}; region means {:.4} / {:.4}",
            sims.mean.id_sim_mean, sims.mean.fid_like
        ),
    );
}
