//! One test per acceptance criterion; each prints a single PASS/FAIL line.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tsenet::audio::{measured_snr_db, mix, scale_to_snr, write_jsonl, write_wav, AudioSignal, GenderPair, MixtureManifestEntry};
use tsenet::features;
use tsenet::graph::gradcheck::FD_TOLERANCE;
use tsenet::graph::{Graph, NormKind, Tensor};
use tsenet::ivector::{
    accumulate_stats, extract_ivector, train_tv, train_ubm, BaumWelchStats, GmmUbm, SpeakerEmbedding,
    TotalVariability, TvConfig, UbmConfig,
};
use tsenet::metrics::{evaluate_corpus, sdr_bsseval, snr_bin, EstimateEntry, Summary};
use tsenet::model::{TseNetConfig, TseNetModel};
use tsenet::pipeline::run_gradcheck;
use tsenet::synth::{synth_corpus, SynthConfig};
use tsenet::trainer::{si_sdr, si_sdr_slices, TrainExample, Trainer, DB_CAP};

fn report(criterion: u32, ok: bool, detail: String) {
    println!("criterion {criterion}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn sig(v: Vec<f64>) -> AudioSignal {
    AudioSignal::from_samples(v).unwrap()
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

#[test]
fn criterion_1_gradient_fidelity() {
    let started = Instant::now();
    let results = run_gradcheck(TseNetConfig::tiny(), 0).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let end_to_end = results.iter().filter(|r| r.name.starts_with("end_to_end/")).count();
    let ok = failing.is_empty() && end_to_end > 0 && worst <= FD_TOLERANCE && secs < 120.0;
    report(
        1,
        ok,
        format!(
            "checks={} end_to_end={end_to_end} worst_rel_error={worst:.2e} failing={failing:?} seconds={secs:.1}",
            results.len()
        ),
    );
}

/// Ten fixed 1 s two-speaker mixtures with one conditioning vector per target speaker.
fn overfit_set() -> Vec<TrainExample> {
    let corpus = synth_corpus(&SynthConfig {
        speakers: 4,
        utterances_per_speaker: 5,
        min_seconds: 1.0,
        max_seconds: 1.0,
        seed: 11,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let speaker_vecs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    (0..10)
        .map(|i| {
            let target = &corpus[i].1;
            let other = &corpus[i + 10].1;
            let snr = rng.random_range(0.0..=5.0);
            let m = mix(target, &[scale_to_snr(target, other, snr).unwrap()]).unwrap();
            TrainExample {
                id: format!("overfit{i}"),
                mixture: m.mixture.samples().to_vec(),
                target: m.target.samples().to_vec(),
                ivector: speaker_vecs[i / 5].clone(),
            }
        })
        .collect()
}

fn mean_si_sdr(model: &TseNetModel, set: &[TrainExample]) -> f64 {
    set.iter()
        .map(|e| {
            let iv = SpeakerEmbedding::new(e.ivector.clone()).unwrap();
            let (est, _) = model.forward(&sig(e.mixture.clone()), &iv).unwrap();
            si_sdr_slices(est.samples(), &e.target).unwrap()
        })
        .sum::<f64>()
        / set.len() as f64
}

#[test]
fn criterion_2_overfit_sanity() {
    let started = Instant::now();
    let set = overfit_set();
    let mixture_db = set
        .iter()
        .map(|e| si_sdr_slices(&e.mixture, &e.target).unwrap())
        .sum::<f64>()
        / set.len() as f64;
    let batch: Vec<&TrainExample> = set.iter().collect();
    let mut trainer = Trainer::new(TseNetModel::build(TseNetConfig::tiny_plus(), 0).unwrap());
    let mut trained_db = mean_si_sdr(&trainer.model, &set);
    let mut steps = 0;
    while steps < 2000 && trained_db < mixture_db + 10.0 {
        trainer.step(&batch, 1e-3).unwrap();
        steps += 1;
        if steps % 20 == 0 || steps == 2000 {
            trained_db = mean_si_sdr(&trainer.model, &set);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let gain = trained_db - mixture_db;
    report(
        2,
        gain >= 10.0 && secs <= 1800.0,
        format!(
            "mixture_si_sdr={mixture_db:.2}dB trained_si_sdr={trained_db:.2}dB improvement={gain:.2}dB steps={steps} params={} seconds={secs:.0}",
            trainer.model.param_count()
        ),
    );
}

/// Zero-mean both, optimal scaling, power ratio in dB, capped.
fn si_sdr_direct(est: &[f64], reference: &[f64]) -> f64 {
    let n = est.len() as f64;
    let me = est.iter().sum::<f64>() / n;
    let mr = reference.iter().sum::<f64>() / n;
    let e: Vec<f64> = est.iter().map(|v| v - me).collect();
    let s: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let alpha = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / s.iter().map(|v| v * v).sum::<f64>();
    let target: f64 = s.iter().map(|v| (alpha * v).powi(2)).sum();
    let noise: f64 = s.iter().zip(&e).map(|(a, b)| (alpha * a - b).powi(2)).sum();
    if noise == 0.0 {
        return DB_CAP;
    }
    (10.0 * (target / noise).log10()).min(DB_CAP)
}

#[test]
fn criterion_3_si_sdr_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_oracle, mut worst_scale) = (0.0f64, 0.0f64);
    let mut exact_power_of_two = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..400);
        let s = uniform(n, &mut rng);
        let mix_w = rng.random_range(0.0..1.0);
        let e: Vec<f64> = s.iter().map(|v| mix_w * v + rng.random_range(-0.5..0.5)).collect();
        let got = si_sdr_slices(&e, &s).unwrap();
        worst_oracle = worst_oracle.max((got - si_sdr_direct(&e, &s)).abs());
        for k in [-3, 1, 7] {
            let c = 2f64.powi(k);
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            exact_power_of_two &= si_sdr_slices(&scaled, &s).unwrap() == got;
        }
        let c = rng.random_range(1e-3..1e3);
        let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
        worst_scale = worst_scale.max((si_sdr_slices(&scaled, &s).unwrap() - got).abs());
    }
    let example = si_sdr(&sig(vec![1.0, 1.0, -2.0]), &sig(vec![1.0, 0.0, -1.0])).unwrap();
    let ok = worst_oracle <= 1e-9 && exact_power_of_two && worst_scale <= 1e-9 && (example - 4.771).abs() < 1e-3;
    report(
        3,
        ok,
        format!(
            "pairs=1000 max_oracle_diff={worst_oracle:.1e}dB power_of_two_scaling_bit_exact={exact_power_of_two} max_arbitrary_scale_diff={worst_scale:.1e}dB example={example:.4}dB"
        ),
    );
}

#[test]
fn criterion_4_mixing_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut lengths_ok = true;
    for _ in 0..1000 {
        let t = sig(uniform(rng.random_range(50..3000), &mut rng));
        let i = sig(uniform(rng.random_range(50..3000), &mut rng).iter().map(|v| v * 3.0).collect());
        let snr = rng.random_range(0.0..=5.0);
        let scaled = scale_to_snr(&t, &i, snr).unwrap();
        worst = worst.max((measured_snr_db(&t, &scaled).unwrap() - snr).abs());
        let m = mix(&t, &[scaled]).unwrap();
        lengths_ok &= m.mixture.len() == t.len().max(i.len());
    }
    report(
        4,
        worst <= 1e-9 && lengths_ok,
        format!("triples=1000 max_snr_error={worst:.1e}dB mixture_length_is_longer_source={lengths_ok}"),
    );
}

fn deep_config() -> TseNetConfig {
    TseNetConfig {
        m: 3,
        l: 4,
        n: 3,
        o: 4,
        p: 3,
        b: 8,
        r: 4,
        d1: 2,
        d2: 2,
        tcn_norm: NormKind::Channel,
    }
}

#[test]
fn criterion_5_architecture_accounting() {
    let params = TseNetModel::build(TseNetConfig::paper(), 0).unwrap().param_count();
    let params_ok = (8_550_000..=9_450_000).contains(&params);

    let cfg = TseNetConfig { l: 20, ..TseNetConfig::tiny() };
    let model = TseNetModel::build(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut frames_ok = true;
    for _ in 0..100 {
        let k = rng.random_range(1..300);
        let t = cfg.l + (k - 1) * cfg.l / 2;
        let a = model.encode(&sig(uniform(t, &mut rng))).unwrap();
        frames_ok &= a.cols() == 2 * (t - cfg.l) / cfg.l + 1 && a.cols() == k;
    }

    // invariance beyond the bound by perturbation, tightness by gradient support
    let deep = deep_config();
    let model = TseNetModel::build(deep, 15).unwrap();
    let frames = 2400;
    let k = 1200;
    let a = Tensor::uniform(3, frames, 1.0, &mut rng);
    let a = Tensor::new(3, frames, a.data().iter().map(|v| v.abs()).collect()).unwrap();
    let iv = SpeakerEmbedding::new(vec![0.3, -0.7]).unwrap();
    let column = |t: &Tensor| (0..t.rows()).map(|i| t.at(i, k)).collect::<Vec<f64>>();
    let base = column(&model.extract_mask(&a, &iv).unwrap());
    let mut invariant = true;
    for offset in [1021isize, -1021, 1179, -1199] {
        let mut p = a.clone();
        let col = (k as isize + offset) as usize;
        (0..3).for_each(|ch| p.set(ch, col, p.at(ch, col) + 0.5));
        invariant &= column(&model.extract_mask(&p, &iv).unwrap()) == base;
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let av = g.param(a.clone());
    let w = model.mask_graph(&mut g, &vars, av, &iv.vec).unwrap();
    let mut pick = Tensor::zeros(3, frames);
    (0..3).for_each(|ch| pick.set(ch, k, 1.0));
    let pick = g.input(pick);
    let sel = g.mul(w, pick).unwrap();
    let loss = g.sum(sel);
    let grads = g.backward(loss).unwrap();
    let ga = grads.get(av).unwrap();
    let support: Vec<usize> = (0..frames).filter(|&j| (0..3).any(|ch| ga.at(ch, j) != 0.0)).collect();
    let span = support.last().unwrap() - support.first().unwrap() + 1;
    let rf_ok = invariant && span == 2041 && support.len() == 2041 && deep.receptive_radius() == 1020;
    report(
        5,
        params_ok && frames_ok && rf_ok,
        format!(
            "paper_params={params} frame_law_100_random_T={frames_ok} invariant_beyond_1020={invariant} dependency_span={span}"
        ),
    );
}

#[test]
fn criterion_6_ivector_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let var = [rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)];
        let ubm = GmmUbm::new(1, vec![0.4, 0.6], vec![-1.0, 2.0], var.to_vec()).unwrap();
        let t = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let tv = TotalVariability::new(2, 1, 1, t.to_vec()).unwrap();
        let occ = [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)];
        let first = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let stats = BaumWelchStats {
            dims: 1,
            occupancy: occ.to_vec(),
            first_order: first.to_vec(),
        };
        let precision = 1.0 + (0..2).map(|c| occ[c] * t[c] * t[c] / var[c]).sum::<f64>();
        let linear = (0..2).map(|c| t[c] * first[c] / var[c]).sum::<f64>();
        let got = extract_ivector(&ubm, &tv, &stats).unwrap().vec[0];
        worst = worst.max((got - linear / precision).abs());
    }

    let corpus = synth_corpus(&SynthConfig {
        speakers: 6,
        utterances_per_speaker: 3,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let frame_cfg = features::FrameConfig::default();
    let feats: Vec<_> = corpus
        .iter()
        .map(|(_, audio)| features::pipeline(audio, &frame_cfg).unwrap())
        .collect();
    let ubm_cfg = UbmConfig {
        components: 16,
        em_iters: 8,
        ..UbmConfig::default()
    };
    let ubm = train_ubm(&feats, &ubm_cfg, 1).unwrap();
    let stats: Vec<_> = feats.iter().map(|f| accumulate_stats(&ubm.ubm, f).unwrap()).collect();
    let tv = train_tv(&ubm.ubm, &stats, &TvConfig { factors: 8, em_iters: 6 }, 1).unwrap();
    let monotone = |h: &[f64]| h.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs());
    let ubm_ok = monotone(&ubm.loglik_history);
    let tv_ok = monotone(&tv.objective_history);
    report(
        6,
        worst <= 1e-8 && ubm_ok && tv_ok,
        format!(
            "closed_form_max_diff={worst:.1e} ubm_loglik_monotone={ubm_ok} ({} values) tv_objective_monotone={tv_ok} ({} values)",
            ubm.loglik_history.len(),
            tv.objective_history.len()
        ),
    );
}

#[test]
fn criterion_7_sdr_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = sig(uniform(800, &mut rng));
    let cap = sdr_bsseval(&r, &[r.clone()], 32).unwrap();

    let rv = uniform(1000, &mut rng);
    let nv = uniform(1000, &mut rng);
    let rr: f64 = rv.iter().map(|v| v * v).sum();
    let proj = rv.iter().zip(&nv).map(|(a, b)| a * b).sum::<f64>() / rr;
    let nv: Vec<f64> = nv.iter().zip(&rv).map(|(b, a)| b - proj * a).collect();
    let g = (rr / (10.0 * nv.iter().map(|v| v * v).sum::<f64>())).sqrt();
    let est: Vec<f64> = rv.iter().zip(&nv).map(|(a, b)| a + g * b).collect();
    let ten = sdr_bsseval(&sig(est), &[sig(rv)], 1).unwrap();

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let s = uniform(500, &mut rng);
        let ms = s.iter().sum::<f64>() / 500.0;
        let s: Vec<f64> = s.iter().map(|v| v - ms).collect();
        let e: Vec<f64> = s.iter().map(|v| 0.5 * v + rng.random_range(-0.3..0.3)).collect();
        let me = e.iter().sum::<f64>() / 500.0;
        let e: Vec<f64> = e.iter().map(|v| v - me).collect();
        let a = sdr_bsseval(&sig(e.clone()), &[sig(s.clone())], 1).unwrap();
        worst = worst.max((a - si_sdr_slices(&e, &s).unwrap()).abs());
    }
    let ok = cap >= DB_CAP && (ten - 10.0).abs() <= 0.01 && worst <= 1e-6;
    report(7, ok, format!("identical={cap}dB orthogonal_ratio_10={ten:.4}dB max_sdr_vs_si_sdr={worst:.1e}dB"));
}

fn selftest(work: &Path) -> (String, Vec<Vec<u8>>, f64) {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_tsenet"))
        .args(["selftest", "--seed", "0", "--work", work.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = ["report.csv", "mixture.csv", "tables.txt", "summary.json"]
        .iter()
        .map(|f| std::fs::read(work.join("eval").join(f)).unwrap())
        .collect();
    (String::from_utf8_lossy(&out.stdout).into_owned(), files, started.elapsed().as_secs_f64())
}

#[test]
fn criterion_8_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let (out_a, files_a, secs_a) = selftest(&dir.path().join("a"));
    let (out_b, files_b, secs_b) = selftest(&dir.path().join("b"));
    let digest = |s: &str| s.lines().find(|l| l.starts_with("report_digest=")).map(str::to_string);
    let identical = files_a == files_b && digest(&out_a).is_some() && digest(&out_a) == digest(&out_b);
    report(
        8,
        identical && secs_a < 600.0 && secs_b < 600.0,
        format!(
            "reports_bit_identical={identical} {} seconds={secs_a:.0},{secs_b:.0}",
            digest(&out_a).unwrap_or_default()
        ),
    );
}

#[test]
fn criterion_9_report_structure() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mixtures = Vec::new();
    let mut as_mixture = Vec::new();
    let mut as_target = Vec::new();
    for (i, (snr, pair)) in [(0.5, GenderPair::Diff), (2.0, GenderPair::Same), (4.0, GenderPair::Diff)]
        .into_iter()
        .enumerate()
    {
        let t = sig(uniform(600, &mut rng));
        let o = sig(uniform(600, &mut rng));
        let m = mix(&t, &[scale_to_snr(&t, &o, snr).unwrap()]).unwrap();
        let id = format!("mix{i}");
        write_wav(base.join(format!("{id}.wav")), &m.mixture).unwrap();
        write_wav(base.join(format!("{id}_t.wav")), &m.target).unwrap();
        write_wav(base.join(format!("{id}_i.wav")), &m.interferences[0]).unwrap();
        mixtures.push(MixtureManifestEntry {
            mixture_path: format!("{id}.wav"),
            target_path: format!("{id}_t.wav"),
            interf_paths: vec![format!("{id}_i.wav")],
            reference_path: format!("{id}_t.wav"),
            snr_db: snr,
            gender_pair: pair,
        });
        as_mixture.push(EstimateEntry { id: id.clone(), path: format!("{id}.wav") });
        as_target.push(EstimateEntry { id: id.clone(), path: format!("{id}_t.wav") });
    }
    write_jsonl(base.join("mixtures.jsonl"), &mixtures).unwrap();
    write_jsonl(base.join("zero.jsonl"), &as_mixture).unwrap();
    write_jsonl(base.join("oracle.jsonl"), &as_target).unwrap();

    let zero = evaluate_corpus(&base.join("zero.jsonl"), &base.join("mixtures.jsonl"), 16, "Zero", None, false).unwrap();
    let zero_ok = zero.rows == zero.mixture_rows;
    let oracle =
        evaluate_corpus(&base.join("oracle.jsonl"), &base.join("mixtures.jsonl"), 16, "TseNet", Some(9_084_560), false)
            .unwrap();
    let capped = oracle.rows.iter().all(|r| r.sdr_db == DB_CAP && r.si_sdr_db == DB_CAP);
    let summary = oracle.mixture_summary();
    let bins_ok = summary.snr_bins.iter().all(|b| b.count == 1)
        && oracle.rows.iter().all(|r| snr_bin(r.snr_db).is_some());
    let rows = &oracle.mixture_rows;
    let mean = rows.iter().map(|r| r.sdr_db).sum::<f64>() / 3.0;
    let diff_mean = (rows[0].sdr_db + rows[2].sdr_db) / 2.0;
    let aggregates_ok = (summary.overall.sdr_db - mean).abs() < 1e-12
        && (summary.diff_gender.sdr_db - diff_mean).abs() < 1e-12
        && summary.same_gender.sdr_db == rows[1].sdr_db
        && Summary::of(rows) == summary;

    let tables = oracle.render_tables();
    let has_row = |cells: &[&str]| {
        tables.lines().any(|l| {
            let parts: Vec<&str> = l.split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
            parts == cells
        })
    };
    let layout_ok = has_row(&["Methods", "#Paras", "SDR", "SI-SDR"])
        && has_row(&["Methods", "SDR Diff.", "SDR Same"])
        && has_row(&["Methods \\ SNR(dB)", "[0, 1)", "[1, 3)", "[3, 5]"])
        && has_row(&["TseNet", "9.1M", "120.00", "120.00"])
        && tables.lines().filter(|l| l.starts_with("| Mixture")).count() == 3
        && tables.lines().filter(|l| l.starts_with("| TseNet")).count() == 3;
    report(
        9,
        zero_ok && capped && bins_ok && aggregates_ok && layout_ok,
        format!(
            "zero_effort_rows_match={zero_ok} oracle_capped={capped} one_record_per_snr_bin={bins_ok} aggregates={aggregates_ok} table_layout={layout_ok}"
        ),
    );
}
