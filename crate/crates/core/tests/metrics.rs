use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsenet::audio::{write_jsonl, write_wav, AudioSignal, GenderPair, MixtureManifestEntry};
use tsenet::metrics::{
    bss_decompose, evaluate_corpus, evaluate_records, format_params, sdr_bsseval, snr_bin, EstimateEntry, EvalInput,
    EvalRow, Summary,
};
use tsenet::trainer::{si_sdr, DB_CAP};
use tsenet::Error;

fn sig(v: Vec<f64>) -> AudioSignal {
    AudioSignal::from_samples(v).unwrap()
}

fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn zero_mean(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    v
}

#[test]
fn identical_estimate_hits_the_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = sig(noise(500, &mut rng));
    let i = sig(noise(500, &mut rng));
    assert_eq!(sdr_bsseval(&r, &[r.clone()], 16).unwrap(), DB_CAP);
    assert_eq!(sdr_bsseval(&r, &[r.clone(), i], 16).unwrap(), DB_CAP);
}

#[test]
fn one_sample_delay_is_inside_the_filter_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut r = noise(400, &mut rng);
    // a silent last sample keeps the delayed copy inside the estimate length
    r[399] = 0.0;
    let mut delayed = vec![0.0];
    delayed.extend_from_slice(&r[..399]);
    let r = sig(r);
    let delayed = sig(delayed);
    for taps in [2, 8, 32] {
        assert_eq!(sdr_bsseval(&delayed, &[r.clone()], taps).unwrap(), DB_CAP, "taps {taps}");
    }
    assert!(sdr_bsseval(&delayed, &[r.clone()], 1).unwrap() < 10.0);
}

#[test]
fn orthogonal_noise_with_power_ratio_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = noise(1000, &mut rng);
    let n = noise(1000, &mut rng);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let proj = r.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>() / rr;
    let n: Vec<f64> = n.iter().zip(&r).map(|(b, a)| b - proj * a).collect();
    let nn: f64 = n.iter().map(|v| v * v).sum();
    let g = (rr / (10.0 * nn)).sqrt();
    let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + g * b).collect();
    let sdr = sdr_bsseval(&sig(est), &[sig(r)], 1).unwrap();
    assert!((sdr - 10.0).abs() < 0.01, "{sdr}");
}

#[test]
fn single_tap_single_reference_matches_si_sdr() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let r = zero_mean(noise(300, &mut rng));
        let est: Vec<f64> = r.iter().map(|v| 0.7 * v + rng.random_range(-0.3..0.3)).collect();
        let est = sig(zero_mean(est));
        let r = sig(r);
        let a = sdr_bsseval(&est, &[r.clone()], 1).unwrap();
        let b = si_sdr(&est, &r).unwrap();
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn scale_invariance_and_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = sig(noise(600, &mut rng));
    let i = sig(noise(600, &mut rng));
    let est: Vec<f64> = r
        .samples()
        .iter()
        .zip(i.samples())
        .map(|(a, b)| a + 0.3 * b + rng.random_range(-0.05..0.05))
        .collect();
    let est = sig(est);
    let refs = [r.clone(), i.clone()];
    let base = sdr_bsseval(&est, &refs, 8).unwrap();
    for c in [0.01, 3.0, 250.0] {
        let s = sdr_bsseval(&est.scaled(c), &refs, 8).unwrap();
        assert!((s - base).abs() < 1e-9, "{c}: {s} vs {base}");
    }
    let d = bss_decompose(&est, &refs, 8).unwrap();
    // interference dominates the residual; the rest is artifacts
    assert!(d.interference > d.artifacts);
    assert!(d.interference + d.artifacts <= d.distortion * (1.0 + 1e-9) + 1e-12);
    assert!((d.sdr_db() - base).abs() < 1e-12);
}

#[test]
fn degenerate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let est = sig(noise(100, &mut rng));
    assert!(matches!(
        sdr_bsseval(&est, &[AudioSignal::zeros(100, 8000)], 4),
        Err(Error::Numerical(_))
    ));
    assert!(sdr_bsseval(&est, &[sig(noise(99, &mut rng))], 4).is_err());
    assert!(sdr_bsseval(&est, &[], 4).is_err());
    assert!(sdr_bsseval(&est, &[est.clone()], 0).is_err());
}

#[test]
fn snr_bins_follow_interval_edges() {
    assert_eq!(snr_bin(0.0), Some(0));
    assert_eq!(snr_bin(0.999), Some(0));
    assert_eq!(snr_bin(1.0), Some(1));
    assert_eq!(snr_bin(2.999), Some(1));
    assert_eq!(snr_bin(3.0), Some(2));
    assert_eq!(snr_bin(5.0), Some(2));
    assert_eq!(snr_bin(5.01), None);
    assert_eq!(snr_bin(-0.1), None);
}

fn row(id: &str, sdr: f64, pair: GenderPair, snr: f64) -> EvalRow {
    EvalRow {
        id: id.into(),
        si_sdr_db: sdr - 1.0,
        sdr_db: sdr,
        gender_pair: pair,
        snr_db: snr,
    }
}

#[test]
fn summary_aggregates() {
    let rows = vec![
        row("a", 10.0, GenderPair::Diff, 0.5),
        row("b", 6.0, GenderPair::Same, 2.0),
        row("c", 8.0, GenderPair::Diff, 4.0),
        row("d", 2.0, GenderPair::Same, 7.0),
    ];
    let s = Summary::of(&rows);
    assert_eq!(s.overall.count, 4);
    assert_eq!(s.overall.sdr_db, 6.5);
    assert_eq!(s.overall.si_sdr_db, 5.5);
    assert_eq!(s.diff_gender.sdr_db, 9.0);
    assert_eq!(s.same_gender.sdr_db, 4.0);
    assert_eq!(s.snr_bins.map(|m| m.count), [1, 1, 1]);
    assert_eq!(s.snr_bins.map(|m| m.sdr_db), [10.0, 6.0, 8.0]);
    assert!(Summary::of(&[]).overall.sdr_db.is_nan());
    assert_eq!(format_params(9_084_560), "9.1M");
    assert_eq!(format_params(3652), "3.7K");
}

fn input(id: &str, seed: u64, snr: f64, pair: GenderPair) -> EvalInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = noise(320, &mut rng);
    let i = noise(320, &mut rng);
    let mix: Vec<f64> = t.iter().zip(&i).map(|(a, b)| a + b).collect();
    let est: Vec<f64> = t.iter().zip(&i).map(|(a, b)| a + 0.1 * b).collect();
    EvalInput {
        id: id.into(),
        estimate: sig(est),
        mixture: sig(mix),
        target: sig(t),
        interferences: vec![sig(i)],
        gender_pair: pair,
        snr_db: snr,
    }
}

#[test]
fn records_report_and_tables() {
    let inputs = vec![
        input("m0", 1, 0.5, GenderPair::Diff),
        input("m1", 2, 1.5, GenderPair::Same),
        input("m2", 3, 4.5, GenderPair::Diff),
    ];
    let serial = evaluate_records(&inputs, 4, "TseNet", Some(3652), false).unwrap();
    let parallel = evaluate_records(&inputs, 4, "TseNet", Some(3652), true).unwrap();
    assert_eq!(serial, parallel);
    let ids: Vec<&str> = serial.rows.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["m0", "m1", "m2"]);
    let me = serial.summary();
    let mix = serial.mixture_summary();
    assert!(me.overall.sdr_db > mix.overall.sdr_db + 10.0);

    let mut csv = Vec::new();
    serial.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("id,si_sdr,sdr,gender_pair,snr_db\n"));
    assert_eq!(csv.lines().count(), 4);
    let tables = serial.render_tables();
    for needle in ["Mixture", "TseNet", "3.7K", "SDR Diff.", "SDR Same", "[0, 1)", "[1, 3)", "[3, 5]", "SI-SDR"] {
        assert!(tables.contains(needle), "missing {needle}\n{tables}");
    }

    let mut short = inputs[0].clone();
    short.estimate = sig(vec![0.1; 100]);
    assert!(matches!(
        evaluate_records(&[short], 4, "x", None, false),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn corpus_evaluation_aligns_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let inputs = [input("a", 7, 2.0, GenderPair::Diff), input("b", 8, 3.0, GenderPair::Same)];
    let mut mixtures = Vec::new();
    let mut estimates = Vec::new();
    for inp in &inputs {
        let name = |kind: &str| format!("{}_{kind}.wav", inp.id);
        write_wav(base.join(name("mix")), &inp.mixture).unwrap();
        write_wav(base.join(name("tgt")), &inp.target).unwrap();
        write_wav(base.join(name("int")), &inp.interferences[0]).unwrap();
        write_wav(base.join(name("est")), &inp.estimate).unwrap();
        mixtures.push(MixtureManifestEntry {
            mixture_path: format!("{}.wav", inp.id),
            target_path: name("tgt"),
            interf_paths: vec![name("int")],
            reference_path: name("tgt"),
            snr_db: inp.snr_db,
            gender_pair: inp.gender_pair,
        });
        std::fs::rename(base.join(name("mix")), base.join(format!("{}.wav", inp.id))).unwrap();
        estimates.push(EstimateEntry {
            id: inp.id.clone(),
            path: name("est"),
        });
    }
    // estimate order differs from mixture order
    estimates.reverse();
    let mix_manifest = base.join("mixtures.jsonl");
    let est_manifest = base.join("estimates.jsonl");
    write_jsonl(&mix_manifest, &mixtures).unwrap();
    write_jsonl(&est_manifest, &estimates).unwrap();
    let report = evaluate_corpus(&est_manifest, &mix_manifest, 4, "TseNet", None, false).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].id, "a");
    assert_eq!(report.rows[1].gender_pair, GenderPair::Same);
    assert!(report.rows.iter().all(|r| r.sdr_db > 15.0));

    write_jsonl(&est_manifest, &estimates[..1]).unwrap();
    assert!(matches!(
        evaluate_corpus(&est_manifest, &mix_manifest, 4, "TseNet", None, false),
        Err(Error::Manifest(_))
    ));
}
