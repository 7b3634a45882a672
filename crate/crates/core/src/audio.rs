//! Waveform I/O, SNR-controlled mixing and spectrogram emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate of every signal in the pipeline.
pub const SAMPLE_RATE_HZ: u32 = 8000;

const PCM_SCALE: f64 = 32768.0;

/// Mono waveform with amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(AudioSignal {
            samples,
            sample_rate_hz,
        })
    }

    /// Signal at the pipeline rate.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE_HZ)
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Self {
        AudioSignal {
            samples: vec![0.0; len],
            sample_rate_hz,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Copy zero-padded at the tail to `len` samples (never truncates).
    pub fn padded_to(&self, len: usize) -> AudioSignal {
        let mut samples = self.samples.clone();
        if samples.len() < len {
            samples.resize(len, 0.0);
        }
        AudioSignal {
            samples,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn scaled(&self, gain: f64) -> AudioSignal {
        AudioSignal {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Concatenation of two signals at the same rate.
    pub fn concat(&self, other: &AudioSignal) -> Result<AudioSignal> {
        if self.sample_rate_hz != other.sample_rate_hz {
            return Err(Error::invalid("sample-rate mismatch in concat"));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(AudioSignal {
            samples,
            sample_rate_hz: self.sample_rate_hz,
        })
    }
}

/// Sample-rate check applied by [`read_wav_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateCheck {
    Strict(u32),
    Any,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    read_wav_with(path, RateCheck::Strict(SAMPLE_RATE_HZ))
}

/// Reads a 16-bit PCM mono WAV, scaling samples by 1/32768.
pub fn read_wav_with(path: impl AsRef<Path>, rate: RateCheck) -> Result<AudioSignal> {
    let path = path.as_ref();
    let wav_err = |message: String| Error::Wav {
        path: path.to_path_buf(),
        message,
    };
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(format!("non-mono input ({} channels)", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(format!(
            "unsupported encoding ({:?}, {} bits); expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if let RateCheck::Strict(expected) = rate {
        if spec.sample_rate != expected {
            return Err(wav_err(format!(
                "sample rate {} Hz, expected {expected} Hz",
                spec.sample_rate
            )));
        }
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    AudioSignal::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM. Samples outside [-1, 1] are hard-clipped with a warning.
pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    let mut clipped = 0usize;
    for &s in &signal.samples {
        if !(-1.0..=1.0).contains(&s) {
            clipped += 1;
        }
        writer.write_sample(quantize(s)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    if clipped > 0 {
        log::warn!(
            "event=clip path={} clipped_samples={clipped}",
            path.display()
        );
    }
    Ok(())
}

fn quantize(s: f64) -> i16 {
    (s * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Mean squared amplitude.
pub fn signal_power(signal: &AudioSignal) -> Result<f64> {
    power(signal.samples())
}

pub(crate) fn power(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("power of an empty signal"));
    }
    Ok(samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64)
}

/// Gain that puts `interference` at `snr_db` below `target`, powers over full extents.
pub fn snr_gain(target: &AudioSignal, interference: &AudioSignal, snr_db: f64) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    let pt = signal_power(target)?;
    let pi = signal_power(interference)?;
    if pt <= 0.0 || pi <= 0.0 {
        return Err(Error::invalid(
            "cannot scale to an SNR with a zero-power target or interference",
        ));
    }
    Ok((pt / pi).sqrt() * 10f64.powf(-snr_db / 20.0))
}

pub fn scale_to_snr(
    target: &AudioSignal,
    interference: &AudioSignal,
    snr_db: f64,
) -> Result<AudioSignal> {
    Ok(interference.scaled(snr_gain(target, interference, snr_db)?))
}

/// Measured SNR in dB between two signals over their full extents.
pub fn measured_snr_db(target: &AudioSignal, interference: &AudioSignal) -> Result<f64> {
    Ok(10.0 * (signal_power(target)? / signal_power(interference)?).log10())
}

/// Sum of a target and already-scaled interferences, tail-padded to the longest input.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub mixture: AudioSignal,
    pub target: AudioSignal,
    pub interferences: Vec<AudioSignal>,
}

pub fn mix(target: &AudioSignal, interferences: &[AudioSignal]) -> Result<Mixed> {
    let rate = target.sample_rate_hz;
    if interferences.iter().any(|s| s.sample_rate_hz != rate) {
        return Err(Error::invalid("sample-rate mismatch between mixture inputs"));
    }
    let len = interferences
        .iter()
        .map(AudioSignal::len)
        .fold(target.len(), usize::max);
    let target = target.padded_to(len);
    let interferences: Vec<_> = interferences.iter().map(|s| s.padded_to(len)).collect();
    let mut mixture = target.samples.clone();
    for s in &interferences {
        for (m, v) in mixture.iter_mut().zip(&s.samples) {
            *m += v;
        }
    }
    Ok(Mixed {
        mixture: AudioSignal {
            samples: mixture,
            sample_rate_hz: rate,
        },
        target,
        interferences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    #[serde(alias = "m", alias = "M")]
    Male,
    #[serde(alias = "f", alias = "F")]
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenderPair {
    Diff,
    Same,
}

impl GenderPair {
    pub fn of(a: Gender, b: Gender) -> Self {
        if a == b {
            GenderPair::Same
        } else {
            GenderPair::Diff
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GenderPair::Diff => "diff",
            GenderPair::Same => "same",
        }
    }
}

/// One row of the utterance manifest CSV (`speaker_id,gender,path`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub speaker_id: String,
    pub gender: Gender,
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct UtteranceManifest {
    speakers: BTreeMap<String, SpeakerUtterances>,
}

#[derive(Debug, Clone)]
pub struct SpeakerUtterances {
    pub gender: Gender,
    pub utterances: Vec<String>,
}

impl UtteranceManifest {
    pub fn from_entries(entries: &[UtteranceEntry]) -> Result<Self> {
        let mut speakers: BTreeMap<String, SpeakerUtterances> = BTreeMap::new();
        for e in entries {
            let slot = speakers
                .entry(e.speaker_id.clone())
                .or_insert_with(|| SpeakerUtterances {
                    gender: e.gender,
                    utterances: Vec::new(),
                });
            if slot.gender != e.gender {
                return Err(Error::Manifest(format!(
                    "speaker {} listed with two genders",
                    e.speaker_id
                )));
            }
            slot.utterances.push(e.path.clone());
        }
        Ok(UtteranceManifest { speakers })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(&read_utterance_csv(path)?)
    }

    pub fn speakers(&self) -> &BTreeMap<String, SpeakerUtterances> {
        &self.speakers
    }

    pub fn entries(&self) -> Vec<UtteranceEntry> {
        self.speakers
            .iter()
            .flat_map(|(id, s)| {
                s.utterances.iter().map(move |p| UtteranceEntry {
                    speaker_id: id.clone(),
                    gender: s.gender,
                    path: p.clone(),
                })
            })
            .collect()
    }

    pub fn speaker_of(&self, utterance: &str) -> Option<(&str, Gender)> {
        self.speakers.iter().find_map(|(id, s)| {
            s.utterances
                .iter()
                .any(|u| u == utterance)
                .then_some((id.as_str(), s.gender))
        })
    }
}

pub fn read_utterance_csv(path: impl AsRef<Path>) -> Result<Vec<UtteranceEntry>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Manifest(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_utterance_csv(path: impl AsRef<Path>, entries: &[UtteranceEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    for e in entries {
        w.serialize(e)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sampling decision for one simulated mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub target_utterance: String,
    pub interference_utterances: Vec<String>,
    pub reference_utterance: String,
    pub snr_db: f64,
    pub gender_pair: GenderPair,
    pub seed: u64,
}

/// One realized example: all signals share length and rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub mixture: AudioSignal,
    pub target_source: AudioSignal,
    pub interference_sources: Vec<AudioSignal>,
    pub target_utterance: String,
    pub reference_utterance: String,
    pub snr_db: f64,
    pub gender_pair: GenderPair,
}

/// RNG stream for record `index`, independent of every other record.
pub(crate) fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `count` two-speaker mixture specs from the manifest.
pub fn plan_corpus(
    manifest: &UtteranceManifest,
    count: usize,
    snr_low: f64,
    snr_high: f64,
    seed: u64,
) -> Result<Vec<MixtureSpec>> {
    if !(snr_low.is_finite() && snr_high.is_finite()) || snr_low > snr_high {
        return Err(Error::invalid(format!(
            "invalid SNR range [{snr_low}, {snr_high}]"
        )));
    }
    let speakers: Vec<(&String, &SpeakerUtterances)> = manifest.speakers.iter().collect();
    if speakers.len() < 2 {
        return Err(Error::Manifest("need at least two speakers".into()));
    }
    if !speakers.iter().any(|(_, s)| s.utterances.len() >= 2) {
        return Err(Error::Manifest(
            "no speaker has two utterances (one is needed for the reference)".into(),
        ));
    }
    (0..count)
        .map(|i| {
            let mut rng = record_rng(seed, i as u64);
            // re-draw targets that have no spare utterance for the reference
            let t = loop {
                let t = rng.random_range(0..speakers.len());
                if speakers[t].1.utterances.len() >= 2 {
                    break t;
                }
            };
            let mut o = rng.random_range(0..speakers.len() - 1);
            if o >= t {
                o += 1;
            }
            let (_, tspk) = speakers[t];
            let (_, ospk) = speakers[o];
            let tu = rng.random_range(0..tspk.utterances.len());
            let ou = rng.random_range(0..ospk.utterances.len());
            let mut ru = rng.random_range(0..tspk.utterances.len() - 1);
            if ru >= tu {
                ru += 1;
            }
            let snr_db = if snr_high > snr_low {
                rng.random_range(snr_low..=snr_high)
            } else {
                snr_low
            };
            Ok(MixtureSpec {
                target_utterance: tspk.utterances[tu].clone(),
                interference_utterances: vec![ospk.utterances[ou].clone()],
                reference_utterance: tspk.utterances[ru].clone(),
                snr_db,
                gender_pair: GenderPair::of(tspk.gender, ospk.gender),
                seed: rng.random(),
            })
        })
        .collect()
}

/// Loads the utterances named by `spec` and mixes them at its SNR.
pub fn realize<F>(spec: &MixtureSpec, load: &F) -> Result<MixtureRecord>
where
    F: Fn(&str) -> Result<AudioSignal>,
{
    let target = load(&spec.target_utterance)?;
    let scaled = spec
        .interference_utterances
        .iter()
        .map(|u| scale_to_snr(&target, &load(u)?, spec.snr_db))
        .collect::<Result<Vec<_>>>()?;
    let mixed = mix(&target, &scaled)?;
    Ok(MixtureRecord {
        mixture: mixed.mixture,
        target_source: mixed.target,
        interference_sources: mixed.interferences,
        target_utterance: spec.target_utterance.clone(),
        reference_utterance: spec.reference_utterance.clone(),
        snr_db: spec.snr_db,
        gender_pair: spec.gender_pair,
    })
}

pub fn simulate_corpus<F>(
    manifest: &UtteranceManifest,
    count: usize,
    snr_low: f64,
    snr_high: f64,
    seed: u64,
    load: F,
) -> Result<Vec<MixtureRecord>>
where
    F: Fn(&str) -> Result<AudioSignal>,
{
    plan_corpus(manifest, count, snr_low, snr_high, seed)?
        .iter()
        .map(|spec| realize(spec, &load))
        .collect()
}

/// One line of the mixture manifest (JSON-lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureManifestEntry {
    pub mixture_path: String,
    pub target_path: String,
    pub interf_paths: Vec<String>,
    pub reference_path: String,
    pub snr_db: f64,
    pub gender_pair: GenderPair,
}

impl MixtureManifestEntry {
    /// Record id: file stem of the mixture path.
    pub fn id(&self) -> String {
        Path::new(&self.mixture_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.mixture_path.clone())
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Frames × bins matrix of natural-log magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

pub const SPECTROGRAM_EPS: f64 = 1e-12;

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        for f in 0..self.frames {
            let row: Vec<String> = self.frame(f).iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Binary PGM, time on x, low frequencies at the bottom, min-max scaled to 0..=255.
    pub fn write_pgm(&self, mut w: impl Write) -> std::io::Result<()> {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        write!(w, "P5\n{} {}\n255\n", self.frames, self.bins)?;
        let mut pixels = Vec::with_capacity(self.frames * self.bins);
        for b in (0..self.bins).rev() {
            for f in 0..self.frames {
                pixels.push(((self.at(f, b) - lo) / span * 255.0).round() as u8);
            }
        }
        w.write_all(&pixels)
    }
}

pub(crate) fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Number of full frames of `win` samples at hop `hop` in `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Hamming-windowed DFT log magnitudes, `win/2 + 1` bins per frame.
pub fn log_spectrogram(signal: &AudioSignal, win_samples: usize, hop_samples: usize) -> Result<Spectrogram> {
    if hop_samples == 0 || win_samples < hop_samples {
        return Err(Error::invalid(format!(
            "need win >= hop > 0, got win={win_samples} hop={hop_samples}"
        )));
    }
    if signal.len() < win_samples {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one window ({win_samples})",
            signal.len()
        )));
    }
    let frames = frame_count(signal.len(), win_samples, hop_samples);
    let bins = win_samples / 2 + 1;
    let window = hamming(win_samples);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win_samples);
    let mut buf = vec![Complex::new(0.0, 0.0); win_samples];
    let mut data = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop_samples;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(signal.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend(buf[..bins].iter().map(|c| (c.norm() + SPECTROGRAM_EPS).ln()));
    }
    Ok(Spectrogram { frames, bins, data })
}
