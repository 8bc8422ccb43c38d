use rand::Rng;

use fixres_core::fixres::{recalibrate_batchnorm, train, TrainConfig};
use fixres_core::image_pipeline::{sample_roc, synth_dataset, AugmentConfig, DatasetSpec, ROC_ATTEMPTS};
use fixres_core::model::{build_model, MicroNet, ModelConfig};
use fixres_core::rng::stream;
use fixres_core::tensor_core::gradcheck::check_gradients;
use fixres_core::tensor_core::{BatchNormState, BnMode, Tensor};

/// Composite Simpson rule on [a, b] with `n` (even) panels.
fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn sqrt_area_fraction_matches_quadrature() {
    // square image large enough that rounding the crop sides is negligible
    let side = 2000;
    let cfg = AugmentConfig::default();
    let (lo, hi) = cfg.area_fraction_range;
    let (llo, lhi) = (cfg.aspect_ratio_range.0.ln(), cfg.aspect_ratio_range.1.ln());

    // one attempt at (u, log aspect) fits iff u <= exp(-|log aspect|)
    let density = 1.0 / ((hi - lo) * (lhi - llo));
    let top = |l: f64| hi.min((-l.abs()).exp());
    let accept = simpson(llo, lhi, 2000, |l| (top(l) - lo).max(0.0)) * density;
    let moment = simpson(llo, lhi, 2000, |l| {
        let b = top(l);
        if b > lo {
            2.0 / 3.0 * (b.powf(1.5) - lo.powf(1.5))
        } else {
            0.0
        }
    }) * density;
    let fail = (1.0 - accept).powi(ROC_ATTEMPTS as i32);
    // the fallback is the full square, area fraction 1
    let expected = (1.0 - fail) * moment / accept + fail;

    let n = 100_000;
    let mut rng = stream(21, 0);
    let draws: Vec<f64> = (0..n)
        .map(|_| sample_roc(side, side, &mut rng, &cfg).unwrap().area_fraction(side, side).sqrt())
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected} (se {se})");
}

#[test]
fn sampled_regions_stay_in_bounds() {
    let mut rng = stream(22, 0);
    for trial in 0..100_000u64 {
        let (h, w) = (rng.random_range(8..300), rng.random_range(8..300));
        let lo = rng.random_range(0.01..1.0);
        let hi = rng.random_range(lo..=1.0);
        let cfg = AugmentConfig {
            area_fraction_range: (lo, hi),
            aspect_ratio_range: (rng.random_range(0.2..=1.0), rng.random_range(1.0..=5.0)),
            ..AugmentConfig::default()
        };
        let roc = sample_roc(h, w, &mut rng, &cfg).unwrap();
        assert!(roc.w >= 1 && roc.h >= 1, "trial {trial}: {roc:?}");
        assert!(roc.x + roc.w <= w && roc.y + roc.h <= h, "trial {trial}: {roc:?} in {h}x{w}");
    }
}

#[test]
fn histograms_separate_classes_by_nearest_centroid() {
    let spec = DatasetSpec {
        num_classes: 8,
        samples_per_class: 60,
        base_resolution: 64,
        object_scale_range: (0.4, 0.4),
        noise_level: 0.0,
        seed: 9,
    };
    let ds = synth_dataset(&spec).unwrap();
    let hist = |i: usize| {
        let mut h = vec![0.0f64; 256];
        for &p in ds.get(i).0.pixels() {
            h[p as usize] += 1.0;
        }
        h
    };
    let k = spec.num_classes;
    let (train, test): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|i| (i / k).is_multiple_of(2));
    let mut centroids = vec![vec![0.0; 256]; k];
    let mut counts = vec![0.0; k];
    for &i in &train {
        let c = ds.get(i).1;
        for (a, b) in centroids[c].iter_mut().zip(hist(i)) {
            *a += b;
        }
        counts[c] += 1.0;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let h = hist(i);
            let dist = |c: &Vec<f64>| c.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == ds.get(i).1
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.95, "nearest-centroid accuracy {acc}");
}

/// Normalised distance between two sets of running statistics.
fn stats_shift(before: &MicroNet<f32>, after: &MicroNet<f32>) -> f64 {
    let mut total = 0.0;
    for (b, a) in before.batch_norms().iter().zip(after.batch_norms()) {
        for c in 0..b.channels() {
            let (m0, v0) = (b.running_mean[c] as f64, b.running_var[c] as f64);
            let (m1, v1) = (a.running_mean[c] as f64, a.running_var[c] as f64);
            total += (m1 - m0).abs() / v0.sqrt() + (v1 / v0).ln().abs();
        }
    }
    total
}

#[test]
fn recalibration_moves_statistics_more_under_resolution_shift() {
    let cfg = ModelConfig {
        base_channels: 4,
        num_stages: 2,
        num_classes: 4,
        train_res: 16,
        ..ModelConfig::default()
    };
    let mut same = Vec::new();
    let mut doubled = Vec::new();
    for seed in 0..3 {
        let data = synth_dataset(&DatasetSpec {
            num_classes: 4,
            samples_per_class: 60,
            base_resolution: 48,
            seed,
            ..DatasetSpec::default()
        })
        .unwrap();
        let mut model: MicroNet<f32> = build_model(&cfg, seed).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed,
            augment: AugmentConfig::default().with_out_size(16),
            ..TrainConfig::default()
        };
        train(&mut model, &data, &tc).unwrap();
        for (res, out) in [(16, &mut same), (32, &mut doubled)] {
            let mut m = model.clone();
            recalibrate_batchnorm(&mut m, &data, res, 32, None, 0.875).unwrap();
            out.push(stats_shift(&model, &m));
        }
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let (s, d) = (median(same.clone()), median(doubled.clone()));
    assert!(s < d, "shift at train_res {same:?} vs at 2x {doubled:?}");
}

#[test]
fn composite_graph_gradient() {
    let mut rng = stream(23, 0);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let inputs = [
        random(&[3, 2, 5, 5]),
        random(&[3, 2, 3, 3]),
        random(&[3]),
        random(&[3]),
        random(&[4, 3]),
        random(&[4]),
    ];
    let err = check_gradients(&inputs, |t, v| {
        let mut bn = BatchNormState::new("bn", 3)?;
        bn.mode = BnMode::Train;
        let y = t.conv2d(v[0], v[1], None, 1, 1)?;
        let y = t.batch_norm(y, v[2], v[3], &mut bn)?;
        let y = t.global_avg_pool(y)?;
        let y = t.linear(y, v[4], v[5])?;
        t.smoothed_cross_entropy(y, &[0, 3, 1], 0.1)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}
