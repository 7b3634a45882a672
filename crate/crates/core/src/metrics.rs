//! BSS-eval style SDR, corpus evaluation and the summary tables.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{read_jsonl, read_wav, resolve, AudioSignal, GenderPair, MixtureManifestEntry};
use crate::error::{Error, Result};
use crate::trainer::{si_sdr_slices, DB_CAP};

pub const DEFAULT_TAPS: usize = 512;
/// Ridge added to the normal equations, relative to their mean diagonal.
pub const RIDGE: f64 = 1e-10;

/// Energies of the BSS-eval decomposition `est = s_target + e_interf + e_artif`
/// (zero-padded by `taps − 1` samples).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BssDecomposition {
    pub target: f64,
    pub interference: f64,
    pub artifacts: f64,
    /// `‖e_interf + e_artif‖²`.
    pub distortion: f64,
}

impl BssDecomposition {
    pub fn sdr_db(&self) -> f64 {
        db_ratio(self.target, self.distortion)
    }
}

fn db_ratio(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).min(DB_CAP)
}

/// Cross-correlations `Σ_n x[n]·y[n+lag]` for all pairs, via one FFT per signal.
struct Correlator {
    n: usize,
    spectra: Vec<Vec<Complex<f64>>>,
    planner: FftPlanner<f64>,
}

impl Correlator {
    fn new(signals: &[&[f64]], max_lag: usize) -> Self {
        let len = signals.iter().map(|s| s.len()).max().unwrap_or(0);
        let n = (len + max_lag + 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let spectra = signals
            .iter()
            .map(|s| {
                let mut buf: Vec<Complex<f64>> = s.iter().map(|&v| Complex::new(v, 0.0)).collect();
                buf.resize(n, Complex::new(0.0, 0.0));
                fft.process(&mut buf);
                buf
            })
            .collect();
        Correlator { n, spectra, planner }
    }

    /// Lags `-(max_lag)..=max_lag`, indexed by `lag + max_lag`.
    fn xcorr(&mut self, i: usize, j: usize, max_lag: usize) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = self.spectra[i]
            .iter()
            .zip(&self.spectra[j])
            .map(|(a, b)| a.conj() * b)
            .collect();
        self.planner.plan_fft_inverse(self.n).process(&mut buf);
        let scale = 1.0 / self.n as f64;
        (0..=2 * max_lag)
            .map(|k| {
                let lag = k as isize - max_lag as isize;
                buf[lag.rem_euclid(self.n as isize) as usize].re * scale
            })
            .collect()
    }
}

fn solve_spd(mut g: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = g.nrows();
    let mean_diag = g.diagonal().sum() / n as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::Numerical("singular projection: references have no energy".into()));
    }
    for i in 0..n {
        g[(i, i)] += RIDGE * mean_diag;
    }
    let chol = g
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular projection: delayed references are dependent".into()))?;
    Ok(chol.solve(b))
}

/// Sum of delayed copies `Σ_j Σ_a c[j·taps + a]·r_j[t − a]` over the padded span.
fn filtered(refs: &[&[f64]], coef: &DVector<f64>, taps: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (j, r) in refs.iter().enumerate() {
        for a in 0..taps {
            let c = coef[j * taps + a];
            if c == 0.0 {
                continue;
            }
            for (o, v) in out[a..a + r.len()].iter_mut().zip(r.iter()) {
                *o += c * v;
            }
        }
    }
    out
}

/// Decomposition of `est` against `refs[0]` (target) and the remaining
/// interfering references, with a `taps`-long distortion filter.
pub fn bss_decompose(est: &AudioSignal, refs: &[AudioSignal], taps: usize) -> Result<BssDecomposition> {
    if refs.is_empty() || taps == 0 {
        return Err(Error::invalid("need at least one reference and taps >= 1"));
    }
    let t = est.len();
    if t == 0 || refs.iter().any(|r| r.len() != t) {
        return Err(Error::shape("sdr_bsseval", "estimate and references must share a non-zero length"));
    }
    let r: Vec<&[f64]> = refs.iter().map(AudioSignal::samples).collect();
    let mut signals = r.clone();
    signals.push(est.samples());
    let max_lag = taps - 1;
    let mut corr = Correlator::new(&signals, max_lag);
    let nref = r.len();
    let dim = nref * taps;
    let mut gram = DMatrix::zeros(dim, dim);
    for i in 0..nref {
        for j in i..nref {
            let xc = corr.xcorr(i, j, max_lag);
            for a in 0..taps {
                for b in 0..taps {
                    // ⟨r_i shifted by a, r_j shifted by b⟩ = xcorr_ij(a − b)
                    let v = xc[a + max_lag - b];
                    gram[(i * taps + a, j * taps + b)] = v;
                    gram[(j * taps + b, i * taps + a)] = v;
                }
            }
        }
    }
    let mut rhs = DVector::zeros(dim);
    for i in 0..nref {
        let xc = corr.xcorr(i, nref, max_lag);
        for a in 0..taps {
            rhs[i * taps + a] = xc[a + max_lag];
        }
    }
    let target_gram = gram.view((0, 0), (taps, taps)).into_owned();
    let target_rhs = rhs.rows(0, taps).into_owned();
    let c_target = solve_spd(target_gram, &target_rhs)?;
    let padded = t + taps - 1;
    let s_target = filtered(&r[..1], &c_target, taps, padded);
    let all = if nref == 1 {
        s_target.clone()
    } else {
        filtered(&r, &solve_spd(gram, &rhs)?, taps, padded)
    };
    let e = est.samples();
    let (mut target, mut interference, mut artifacts, mut distortion) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..padded {
        let ev = if k < t { e[k] } else { 0.0 };
        let st = s_target[k];
        let ei = all[k] - st;
        let ea = ev - all[k];
        target += st * st;
        interference += ei * ei;
        artifacts += ea * ea;
        distortion += (ev - st) * (ev - st);
    }
    if target.is_nan() || distortion.is_nan() {
        return Err(Error::Numerical("non-finite SDR projection".into()));
    }
    Ok(BssDecomposition {
        target,
        interference,
        artifacts,
        distortion,
    })
}

/// SDR in dB, capped at [`DB_CAP`].
pub fn sdr_bsseval(est: &AudioSignal, refs: &[AudioSignal], taps: usize) -> Result<f64> {
    Ok(bss_decompose(est, refs, taps)?.sdr_db())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub si_sdr_db: f64,
    pub sdr_db: f64,
    pub gender_pair: GenderPair,
    pub snr_db: f64,
}

pub const SNR_BIN_LABELS: [&str; 3] = ["[0, 1)", "[1, 3)", "[3, 5]"];

/// Index of the SNR bin holding `snr_db`, if inside `[0, 5]`.
pub fn snr_bin(snr_db: f64) -> Option<usize> {
    if (0.0..1.0).contains(&snr_db) {
        Some(0)
    } else if (1.0..3.0).contains(&snr_db) {
        Some(1)
    } else if (3.0..=5.0).contains(&snr_db) {
        Some(2)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Means {
    pub count: usize,
    pub sdr_db: f64,
    pub si_sdr_db: f64,
}

impl Means {
    fn of<'a>(rows: impl Iterator<Item = &'a EvalRow>) -> Self {
        let (mut n, mut sdr, mut si) = (0usize, 0.0, 0.0);
        for r in rows {
            n += 1;
            sdr += r.sdr_db;
            si += r.si_sdr_db;
        }
        let d = n as f64;
        Means {
            count: n,
            sdr_db: if n == 0 { f64::NAN } else { sdr / d },
            si_sdr_db: if n == 0 { f64::NAN } else { si / d },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub overall: Means,
    pub diff_gender: Means,
    pub same_gender: Means,
    pub snr_bins: [Means; 3],
}

impl Summary {
    pub fn of(rows: &[EvalRow]) -> Self {
        Summary {
            overall: Means::of(rows.iter()),
            diff_gender: Means::of(rows.iter().filter(|r| r.gender_pair == GenderPair::Diff)),
            same_gender: Means::of(rows.iter().filter(|r| r.gender_pair == GenderPair::Same)),
            snr_bins: [0, 1, 2].map(|b| Means::of(rows.iter().filter(|r| snr_bin(r.snr_db) == Some(b)))),
        }
    }
}

/// Per-utterance results for a method and for the unprocessed mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub param_count: Option<usize>,
    pub rows: Vec<EvalRow>,
    pub mixture_rows: Vec<EvalRow>,
}

fn write_rows(rows: &[EvalRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "id,si_sdr,sdr,gender_pair,snr_db")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.6},{},{:.6}", r.id, r.si_sdr_db, r.sdr_db, r.gender_pair.as_str(), r.snr_db)?;
    }
    Ok(())
}

/// `9.0M`, `3.7K` style parameter counts.
pub fn format_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.2}")
    }
}

fn render_table(out: &mut String, title: &str, header: &[&str], rows: &[Vec<String>]) {
    let cols = header.len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:^w$}", w = widths[c]) })
            .collect();
        format!("| {} |", parts.join(" | "))
    };
    let rule = format!("|{}|", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|"));
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{rule}");
    let _ = writeln!(out, "{}", line(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>()));
    let _ = writeln!(out, "{rule}");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "{}", line(r));
        if i == 0 {
            let _ = writeln!(out, "{rule}");
        }
    }
    let _ = writeln!(out, "{rule}");
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        Summary::of(&self.rows)
    }

    pub fn mixture_summary(&self) -> Summary {
        Summary::of(&self.mixture_rows)
    }

    pub fn write_csv(&self, w: impl Write) -> std::io::Result<()> {
        write_rows(&self.rows, w)
    }

    pub fn write_mixture_csv(&self, w: impl Write) -> std::io::Result<()> {
        write_rows(&self.mixture_rows, w)
    }

    /// Overall, gender-pair and SNR-bin tables, zero-effort Mixture row first.
    pub fn render_tables(&self) -> String {
        let mix = self.mixture_summary();
        let me = self.summary();
        let params = self.param_count.map_or("-".to_string(), format_params);
        let mut out = String::new();
        render_table(
            &mut out,
            "SDR (dB) and SI-SDR (dB); \"Mixture\" is the input mixture with zero effort",
            &["Methods", "#Paras", "SDR", "SI-SDR"],
            &[
                vec!["Mixture".into(), "-".into(), cell(mix.overall.sdr_db), cell(mix.overall.si_sdr_db)],
                vec![self.method.clone(), params, cell(me.overall.sdr_db), cell(me.overall.si_sdr_db)],
            ],
        );
        out.push('\n');
        render_table(
            &mut out,
            "SDR (dB) for different and same gender mixtures",
            &["Methods", "SDR Diff.", "SDR Same"],
            &[
                vec!["Mixture".into(), cell(mix.diff_gender.sdr_db), cell(mix.same_gender.sdr_db)],
                vec![self.method.clone(), cell(me.diff_gender.sdr_db), cell(me.same_gender.sdr_db)],
            ],
        );
        out.push('\n');
        let bins = |s: &Summary| s.snr_bins.iter().map(|m| cell(m.sdr_db)).collect::<Vec<_>>();
        let mut mix_row = vec!["Mixture".to_string()];
        mix_row.extend(bins(&mix));
        let mut me_row = vec![self.method.clone()];
        me_row.extend(bins(&me));
        let mut header = vec!["Methods \\ SNR(dB)"];
        header.extend(SNR_BIN_LABELS);
        render_table(&mut out, "SDR (dB) by mixture SNR", &header, &[mix_row, me_row]);
        let _ = writeln!(
            out,
            "\nutterances: {} (diff {}, same {}; per SNR bin {} / {} / {})",
            me.overall.count,
            me.diff_gender.count,
            me.same_gender.count,
            me.snr_bins[0].count,
            me.snr_bins[1].count,
            me.snr_bins[2].count
        );
        out
    }
}

/// Everything needed to score one utterance.
#[derive(Debug, Clone)]
pub struct EvalInput {
    pub id: String,
    pub estimate: AudioSignal,
    pub mixture: AudioSignal,
    pub target: AudioSignal,
    pub interferences: Vec<AudioSignal>,
    pub gender_pair: GenderPair,
    pub snr_db: f64,
}

fn score(input: &EvalInput, est: &AudioSignal, taps: usize) -> Result<EvalRow> {
    if est.len() != input.target.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{}: estimate has {} samples, target {}", input.id, est.len(), input.target.len()),
        ));
    }
    let mut refs = vec![input.target.clone()];
    refs.extend(input.interferences.iter().cloned());
    Ok(EvalRow {
        id: input.id.clone(),
        si_sdr_db: si_sdr_slices(est.samples(), input.target.samples())?,
        sdr_db: sdr_bsseval(est, &refs, taps)?,
        gender_pair: input.gender_pair,
        snr_db: input.snr_db,
    })
}

/// Scores estimates and the zero-effort mixtures; rows keep input order.
pub fn evaluate_records(
    inputs: &[EvalInput],
    taps: usize,
    method: &str,
    param_count: Option<usize>,
    parallel: bool,
) -> Result<EvalReport> {
    let run = |i: &EvalInput| -> Result<(EvalRow, EvalRow)> {
        Ok((score(i, &i.estimate, taps)?, score(i, &i.mixture, taps)?))
    };
    let pairs: Vec<(EvalRow, EvalRow)> = if parallel {
        inputs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        inputs.iter().map(run).collect::<Result<_>>()?
    };
    for (row, _) in &pairs {
        if snr_bin(row.snr_db).is_none() {
            log::warn!("event=snr_outside_bins id={} snr_db={}", row.id, row.snr_db);
        }
    }
    let (rows, mixture_rows) = pairs.into_iter().unzip();
    Ok(EvalReport {
        method: method.to_string(),
        param_count,
        rows,
        mixture_rows,
    })
}

/// One line of the estimate manifest written by extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateEntry {
    pub id: String,
    pub path: String,
}

/// Aligns an estimate manifest with a mixture manifest by id and scores it.
pub fn evaluate_corpus(
    est_manifest: &Path,
    mixture_manifest: &Path,
    taps: usize,
    method: &str,
    param_count: Option<usize>,
    parallel: bool,
) -> Result<EvalReport> {
    let estimates: Vec<EstimateEntry> = read_jsonl(est_manifest)?;
    let mixtures: Vec<MixtureManifestEntry> = read_jsonl(mixture_manifest)?;
    let est_base = est_manifest.parent().unwrap_or(Path::new("."));
    let mix_base = mixture_manifest.parent().unwrap_or(Path::new("."));
    let by_id: std::collections::HashMap<String, &EstimateEntry> =
        estimates.iter().map(|e| (e.id.clone(), e)).collect();
    if by_id.len() != estimates.len() {
        return Err(Error::Manifest("duplicate ids in estimate manifest".into()));
    }
    if estimates.len() != mixtures.len() {
        return Err(Error::Manifest(format!(
            "{} estimates for {} mixtures",
            estimates.len(),
            mixtures.len()
        )));
    }
    let mut inputs = Vec::with_capacity(mixtures.len());
    for m in &mixtures {
        let id = m.id();
        let e = by_id
            .get(&id)
            .ok_or_else(|| Error::Manifest(format!("no estimate for mixture '{id}'")))?;
        inputs.push(EvalInput {
            id: id.clone(),
            estimate: read_wav(resolve(est_base, &e.path))?,
            mixture: read_wav(resolve(mix_base, &m.mixture_path))?,
            target: read_wav(resolve(mix_base, &m.target_path))?,
            interferences: m
                .interf_paths
                .iter()
                .map(|p| read_wav(resolve(mix_base, p)))
                .collect::<Result<_>>()?,
            gender_pair: m.gender_pair,
            snr_db: m.snr_db,
        });
    }
    evaluate_records(&inputs, taps, method, param_count, parallel)
}
