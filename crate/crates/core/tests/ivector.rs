use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tsenet::features::FeatureMatrix;
use tsenet::ivector::{accumulate_stats, extract_ivector, train_tv, train_ubm, BaumWelchStats, TvConfig, UbmConfig};

/// Utterances drawn from a few shifted Gaussians, each with its own offset.
fn corpus(utts: usize, frames: usize, dims: usize, seed: u64) -> Vec<FeatureMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..utts)
        .map(|u| {
            let offset = (u % 3) as f64 * 1.5;
            let data = (0..frames * dims)
                .map(|i| n.sample(&mut rng) + offset + if (i / dims) % 2 == 0 { 3.0 } else { -3.0 })
                .collect();
            FeatureMatrix::new(frames, dims, data).unwrap()
        })
        .collect()
}

fn ubm_cfg() -> UbmConfig {
    UbmConfig {
        components: 4,
        em_iters: 6,
        ..UbmConfig::default()
    }
}

#[test]
fn em_objectives_never_decrease() {
    let feats = corpus(12, 120, 3, 1);
    let ubm = train_ubm(&feats, &ubm_cfg(), 5).unwrap();
    let h = &ubm.loglik_history;
    assert!(h.len() >= 2);
    assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()), "{h:?}");

    let stats: Vec<BaumWelchStats> = feats.iter().map(|f| accumulate_stats(&ubm.ubm, f).unwrap()).collect();
    let tv_cfg = TvConfig {
        factors: 2,
        em_iters: 5,
        ..TvConfig::default()
    };
    let tv = train_tv(&ubm.ubm, &stats, &tv_cfg, 9).unwrap();
    let h = &tv.objective_history;
    assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()), "{h:?}");
}

#[test]
fn ivector_is_linear_in_first_order_stats() {
    let feats = corpus(8, 100, 3, 2);
    let ubm = train_ubm(&feats, &ubm_cfg(), 1).unwrap().ubm;
    let stats: Vec<BaumWelchStats> = feats.iter().map(|f| accumulate_stats(&ubm, f).unwrap()).collect();
    let tv = train_tv(&ubm, &stats, &TvConfig { factors: 3, em_iters: 3, ..TvConfig::default() }, 4).unwrap().tv;

    let s = &stats[0];
    let w = extract_ivector(&ubm, &tv, s).unwrap();
    for alpha in [0.5, -2.0, 3.25] {
        // stats are stored centred on the UBM means
        let mut scaled = s.clone();
        scaled.first_order.iter_mut().for_each(|v| *v *= alpha);
        let wa = extract_ivector(&ubm, &tv, &scaled).unwrap();
        for (a, b) in wa.vec.iter().zip(&w.vec) {
            assert!((a - alpha * b).abs() <= 1e-9 * (1.0 + b.abs()), "alpha {alpha}: {a} vs {b}");
        }
    }
}

#[test]
fn self_concatenation_equals_doubled_stats() {
    let feats = corpus(6, 90, 3, 3);
    let ubm = train_ubm(&feats, &ubm_cfg(), 2).unwrap().ubm;
    let stats: Vec<BaumWelchStats> = feats.iter().map(|f| accumulate_stats(&ubm, f).unwrap()).collect();
    let tv = train_tv(&ubm, &stats, &TvConfig { factors: 2, em_iters: 3, ..TvConfig::default() }, 6).unwrap().tv;

    let twice = FeatureMatrix::vstack(&[&feats[1], &feats[1]]).unwrap();
    let a = extract_ivector(&ubm, &tv, &accumulate_stats(&ubm, &twice).unwrap()).unwrap();
    let b = extract_ivector(&ubm, &tv, &stats[1].scaled(2.0)).unwrap();
    for (x, y) in a.vec.iter().zip(&b.vec) {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
}
