//! MFCC + energy front end for the i-vector system: deltas, energy VAD and
//! sliding-window cepstral mean normalization.

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{frame_count, hamming, AudioSignal};
use crate::error::{Error, Result};

/// Base (static) feature width: cepstra plus log energy.
pub const STATIC_DIM: usize = 20;
/// Static + delta + delta-delta.
pub const FEATURE_DIM: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub win_samples: usize,
    pub hop_samples: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub preemphasis: f64,
    pub energy_floor: f64,
    pub vad_threshold_db: f64,
    pub cmn_window_frames: usize,
    pub sample_rate_hz: u32,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            win_samples: 200,
            hop_samples: 80,
            n_mels: 23,
            n_ceps: 19,
            preemphasis: 0.97,
            energy_floor: 1e-10,
            vad_threshold_db: 30.0,
            cmn_window_frames: 301,
            sample_rate_hz: crate::audio::SAMPLE_RATE_HZ,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.win_samples > self.hop_samples && self.hop_samples > 0) {
            return Err(Error::Config("need win_samples > hop_samples > 0".into()));
        }
        if self.n_ceps >= self.n_mels {
            return Err(Error::Config("need n_ceps < n_mels".into()));
        }
        if self.n_ceps + 1 != STATIC_DIM {
            return Err(Error::Config(format!(
                "n_ceps must be {} so that features are {FEATURE_DIM}-dimensional",
                STATIC_DIM - 1
            )));
        }
        if self.cmn_window_frames == 0 || self.cmn_window_frames % 2 == 0 {
            return Err(Error::Config("cmn_window_frames must be odd".into()));
        }
        Ok(())
    }

    fn fft_size(&self) -> usize {
        self.win_samples.next_power_of_two()
    }
}

/// Row-major frames × dims matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dims {
            return Err(Error::shape(
                "FeatureMatrix",
                format!("{} values for {frames}x{dims}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(FeatureMatrix { frames, dims, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::shape("FeatureMatrix", "ragged rows"));
        }
        Self::new(rows.len(), dims, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dims.max(1)).take(self.frames)
    }

    pub fn at(&self, t: usize, d: usize) -> f64 {
        self.data[t * self.dims + d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.at(t, d)).collect()
    }

    /// Keeps the frames whose mask entry is set.
    pub fn select(&self, mask: &VadMask) -> Result<FeatureMatrix> {
        if mask.len() != self.frames {
            return Err(Error::shape(
                "select",
                format!("mask of {} for {} frames", mask.len(), self.frames),
            ));
        }
        let data = self
            .rows()
            .zip(mask.iter())
            .filter(|(_, &keep)| keep)
            .flat_map(|(r, _)| r.iter().copied())
            .collect::<Vec<_>>();
        Ok(FeatureMatrix {
            frames: data.len() / self.dims.max(1),
            dims: self.dims,
            data,
        })
    }

    /// Stacks frames of several matrices with equal width.
    pub fn vstack(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let dims = parts.first().map_or(FEATURE_DIM, |m| m.dims);
        if parts.iter().any(|m| m.dims != dims) {
            return Err(Error::shape("vstack", "width mismatch"));
        }
        let data: Vec<f64> = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Ok(FeatureMatrix {
            frames: data.len() / dims.max(1),
            dims,
            data,
        })
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in self.rows() {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Per-frame speech decision.
pub type VadMask = Vec<bool>;

fn mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

/// Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let nyquist = sample_rate / 2.0;
    let (lo, hi) = (mel(0.0), mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)
        .collect();
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = mel(k as f64 * sample_rate / n_fft as f64);
                    if f > l && f < r {
                        if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II basis rows for coefficients `1..=n_ceps`.
fn dct_rows(n_in: usize, n_ceps: usize) -> Vec<Vec<f64>> {
    let scale = (2.0 / n_in as f64).sqrt();
    (1..=n_ceps)
        .map(|k| {
            (0..n_in)
                .map(|n| {
                    scale
                        * (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64
                            / (2 * n_in) as f64)
                            .cos()
                })
                .collect()
        })
        .collect()
}

/// Frames × 20: cepstra 1..=19 then log frame energy.
pub fn extract_mfcc_energy(signal: &AudioSignal, cfg: &FrameConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if signal.len() < cfg.win_samples {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one {}-sample window",
            signal.len(),
            cfg.win_samples
        )));
    }
    let frames = frame_count(signal.len(), cfg.win_samples, cfg.hop_samples);
    let n_fft = cfg.fft_size();
    let window = hamming(cfg.win_samples);
    let fbank = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate_hz as f64);
    let dct = dct_rows(cfg.n_mels, cfg.n_ceps);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let log_floor = cfg.energy_floor.ln();

    let x = signal.samples();
    let mut frame = vec![0.0; cfg.win_samples];
    let mut spec = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut log_mel = vec![0.0; cfg.n_mels];
    let mut data = Vec::with_capacity(frames * STATIC_DIM);
    for f in 0..frames {
        let raw = &x[f * cfg.hop_samples..f * cfg.hop_samples + cfg.win_samples];
        for i in (1..raw.len()).rev() {
            frame[i] = raw[i] - cfg.preemphasis * raw[i - 1];
        }
        frame[0] = raw[0] * (1.0 - cfg.preemphasis);
        for (v, w) in frame.iter_mut().zip(&window) {
            *v *= w;
        }
        let energy: f64 = frame.iter().map(|v| v * v).sum();

        spec.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &v) in spec.iter_mut().zip(&frame) {
            c.re = v;
        }
        fft.process(&mut spec);
        for (p, c) in power.iter_mut().zip(&spec) {
            *p = c.norm_sqr();
        }
        for (lm, filt) in log_mel.iter_mut().zip(&fbank) {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            *lm = e.max(cfg.energy_floor).ln();
        }
        data.extend(
            dct.iter()
                .map(|row| row.iter().zip(&log_mel).map(|(a, b)| a * b).sum::<f64>()),
        );
        data.push(energy.ln().max(log_floor));
    }
    FeatureMatrix::new(frames, STATIC_DIM, data)
}

fn regression_deltas(m: &FeatureMatrix) -> FeatureMatrix {
    let last = m.frames as isize - 1;
    let at = |t: isize, d: usize| m.at(t.clamp(0, last) as usize, d);
    let mut data = Vec::with_capacity(m.data.len());
    for t in 0..m.frames as isize {
        for d in 0..m.dims {
            let v = (2.0 * (at(t + 2, d) - at(t - 2, d)) + (at(t + 1, d) - at(t - 1, d))) / 10.0;
            data.push(v);
        }
    }
    FeatureMatrix {
        frames: m.frames,
        dims: m.dims,
        data,
    }
}

/// Appends Δ and ΔΔ (±2-frame regression, edges replicated).
pub fn append_deltas(feats: &FeatureMatrix) -> Result<FeatureMatrix> {
    if feats.frames < 5 {
        return Err(Error::invalid(format!(
            "deltas need at least 5 frames, got {}",
            feats.frames
        )));
    }
    let d1 = regression_deltas(feats);
    let d2 = regression_deltas(&d1);
    let dims = feats.dims * 3;
    let mut data = Vec::with_capacity(feats.frames * dims);
    for t in 0..feats.frames {
        data.extend_from_slice(feats.row(t));
        data.extend_from_slice(d1.row(t));
        data.extend_from_slice(d2.row(t));
    }
    FeatureMatrix::new(feats.frames, dims, data)
}

/// Energy VAD on the log-energy column of a static (20-wide) matrix.
///
/// A frame is speech when its log energy is within `threshold_db` of the
/// utterance maximum and above the energy floor. If nothing qualifies the
/// loudest frame is kept.
pub fn energy_vad(feats: &FeatureMatrix, threshold_db: f64, cfg: &FrameConfig) -> VadMask {
    let energy_col = STATIC_DIM - 1;
    if feats.frames == 0 || feats.dims <= energy_col {
        return vec![false; feats.frames];
    }
    let energy = feats.column(energy_col);
    let (argmax, max) = energy
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, e)| {
            if e > best.1 {
                (i, e)
            } else {
                best
            }
        });
    let threshold = max - threshold_db * std::f64::consts::LN_10 / 10.0;
    let floor = cfg.energy_floor.ln();
    let mut mask: VadMask = energy.iter().map(|&e| e >= threshold && e > floor).collect();
    if !mask.iter().any(|&m| m) {
        mask[argmax] = true;
    }
    mask
}

/// Subtracts the per-coefficient mean over a centered window clipped to the utterance.
pub fn sliding_cmn(feats: &FeatureMatrix, window_frames: usize) -> Result<FeatureMatrix> {
    if window_frames == 0 {
        return Err(Error::invalid("CMN window must be positive"));
    }
    let half = window_frames / 2;
    let (n, d) = (feats.frames, feats.dims);
    let mut prefix = vec![0.0; (n + 1) * d];
    for t in 0..n {
        for c in 0..d {
            prefix[(t + 1) * d + c] = prefix[t * d + c] + feats.at(t, c);
        }
    }
    let mut data = Vec::with_capacity(n * d);
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(n);
        let count = (hi - lo) as f64;
        for c in 0..d {
            let mean = (prefix[hi * d + c] - prefix[lo * d + c]) / count;
            data.push(feats.at(t, c) - mean);
        }
    }
    FeatureMatrix::new(n, d, data)
}

/// extract → deltas → CMN → keep VAD-speech frames.
pub fn pipeline(signal: &AudioSignal, cfg: &FrameConfig) -> Result<FeatureMatrix> {
    let base = extract_mfcc_energy(signal, cfg)?;
    let mask = energy_vad(&base, cfg.vad_threshold_db, cfg);
    let full = append_deltas(&base)?;
    let normed = sliding_cmn(&full, cfg.cmn_window_frames)?;
    normed.select(&mask)
}

const ARCHIVE_INDEX_HEADER: &str = "utterance_id\toffset\tframes";

/// Writes `<stem>.bin` records `{u32 id_len, id, u32 frames, frames*dims f32}` and a TSV index.
pub fn write_archive(bin_path: &Path, items: &[(String, FeatureMatrix)]) -> Result<()> {
    let mut bin = Vec::new();
    let mut index = String::from(ARCHIVE_INDEX_HEADER);
    index.push('\n');
    for (id, m) in items {
        if m.dims != FEATURE_DIM {
            return Err(Error::shape(
                "write_archive",
                format!("{id}: {} columns, expected {FEATURE_DIM}", m.dims),
            ));
        }
        index.push_str(&format!("{id}\t{}\t{}\n", bin.len(), m.frames));
        bin.extend_from_slice(&(id.len() as u32).to_le_bytes());
        bin.extend_from_slice(id.as_bytes());
        bin.extend_from_slice(&(m.frames as u32).to_le_bytes());
        for v in &m.data {
            bin.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(bin_path, bin).map_err(|e| Error::io(bin_path, e))?;
    let idx = archive_index_path(bin_path);
    std::fs::write(&idx, index).map_err(|e| Error::io(&idx, e))
}

pub fn archive_index_path(bin_path: &Path) -> std::path::PathBuf {
    bin_path.with_extension("idx")
}

pub fn read_archive(bin_path: &Path) -> Result<Vec<(String, FeatureMatrix)>> {
    let bin = std::fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let corrupt = |detail: String| Error::Format {
        path: bin_path.to_path_buf(),
        detail,
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bin
            .get(pos..pos + n)
            .ok_or_else(|| corrupt(format!("truncated record at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let id_len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(id_len)?.to_vec())
            .map_err(|_| corrupt("utterance id is not utf-8".into()))?;
        let frames = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let data = take(frames * FEATURE_DIM * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((id, FeatureMatrix::new(frames, FEATURE_DIM, data)?));
    }
    Ok(out)
}
