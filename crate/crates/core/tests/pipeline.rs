use spikegrad::data::{encode_idx_images, encode_idx_labels, load_idx, IdxImages};
use spikegrad::{
    evaluate, train_epoch, Dataset, EpochConfig, LifParams, MaskPlan, NetworkParams, NetworkSpec,
    OptimizerKind, OptimizerState, Scalar, Schedule, SurrogateFamily, SurrogateSpec,
    TemporalFactors,
};

/// Two classes of 6×6 images: a bright left half or a bright right half, plus a
/// deterministic speckle so no two images are equal.
fn write_toy_idx(dir: &std::path::Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut pixels = Vec::with_capacity(n * 36);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        for r in 0..6 {
            for c in 0..6 {
                let lit = (c < 3) == (label == 0);
                let speckle = ((i * 31 + r * 7 + c * 13) % 40) as u8;
                pixels.push(if lit { 200 + speckle / 2 } else { speckle });
            }
        }
        labels.push(label);
    }
    let images = IdxImages {
        count: n,
        rows: 6,
        cols: 6,
        pixels,
    };
    let img = dir.join("images-idx3-ubyte");
    let lab = dir.join("labels-idx1-ubyte");
    std::fs::write(&img, encode_idx_images(&images)).unwrap();
    std::fs::write(&lab, encode_idx_labels(&labels)).unwrap();
    (img, lab)
}

fn train_toy<S: Scalar>(data: &Dataset<S>, p: f64, epochs: u64) -> (Vec<f64>, f64) {
    let spec = NetworkSpec::new(
        vec![data.dim(), 24, data.num_classes()],
        4,
        LifParams::new(S::lit(2.0), S::lit(0.5), S::zero()).unwrap(),
        SurrogateSpec::new(SurrogateFamily::Arctan, S::lit(2.0)).unwrap(),
        true,
    )
    .unwrap();
    let mut params = NetworkParams::init(&spec, 17, 1.0).unwrap();
    let mut factors = TemporalFactors::uniform(4, 0.9).unwrap();
    let kind = OptimizerKind::AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut opt = OptimizerState::new(kind, 1e-4, &params).unwrap();
    let schedule = Schedule::cosine(0.02, 0.0, epochs * 4).unwrap();
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        let cfg = EpochConfig {
            epoch,
            master_seed: 17,
            batch_size: 32,
            mask: MaskPlan::new(p, false).unwrap(),
            two_enabled: true,
            shuffle: true,
        };
        let m = train_epoch(
            &spec,
            &mut params,
            &mut factors,
            &mut opt,
            &schedule,
            data,
            &cfg,
        )
        .unwrap();
        assert!((m.factors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        losses.push(m.train_loss);
    }
    let acc = evaluate(&spec, &params, &factors.frozen(), data, 64)
        .unwrap()
        .accuracy;
    (losses, acc)
}

#[test]
fn idx_files_train_to_separation_at_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = write_toy_idx(dir.path(), 128);
    let d32: Dataset<f32> = load_idx(&img, &lab, true).unwrap();
    let d64: Dataset<f64> = load_idx(&img, &lab, true).unwrap();
    assert_eq!((d32.len(), d32.dim(), d32.num_classes()), (128, 36, 10));

    for (losses, acc) in [
        train_toy(&d32, 0.0, 6),
        train_toy(&d64, 0.0, 6),
        train_toy(&d32, 0.5, 6),
    ] {
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
        assert!(acc >= 0.95, "accuracy {acc}");
    }
}

#[test]
fn precisions_agree_on_first_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = write_toy_idx(dir.path(), 64);
    let (l32, _) = train_toy(&load_idx::<f32>(&img, &lab, true).unwrap(), 0.3, 1);
    let (l64, _) = train_toy(&load_idx::<f64>(&img, &lab, true).unwrap(), 0.3, 1);
    assert!(
        (l32[0] - l64[0]).abs() < 1e-3 * l64[0].abs().max(1.0),
        "{} vs {}",
        l32[0],
        l64[0]
    );
}
