//! Synthetic "speakers": sums of harmonics with per-speaker pitch range,
//! spectral envelope and syllable rhythm, separated by short pauses.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{record_rng, write_utterance_csv, write_wav, AudioSignal, Gender, UtteranceEntry, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            speakers: 8,
            utterances_per_speaker: 4,
            min_seconds: 1.5,
            max_seconds: 3.0,
            seed: 0,
        }
    }
}

/// Voice parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpeaker {
    pub id: String,
    pub gender: Gender,
    pub f0_hz: f64,
    /// Formant centre frequencies (Hz) of the spectral envelope.
    pub formants: [f64; 3],
    pub syllable_seconds: f64,
}

impl SynthSpeaker {
    pub fn random(id: String, gender: Gender, rng: &mut impl Rng) -> Self {
        let f0_hz = match gender {
            Gender::Male => rng.random_range(90.0..150.0),
            Gender::Female => rng.random_range(170.0..250.0),
        };
        let shift = if gender == Gender::Female { 1.15 } else { 1.0 };
        SynthSpeaker {
            id,
            gender,
            f0_hz,
            formants: [
                rng.random_range(450.0..800.0) * shift,
                rng.random_range(1100.0..1900.0) * shift,
                rng.random_range(2300.0..3100.0) * shift,
            ],
            syllable_seconds: rng.random_range(0.15..0.3),
        }
    }

    fn envelope(&self, f: f64, vowel: f64) -> f64 {
        self.formants
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let centre = c * (1.0 + 0.15 * vowel * if i == 1 { 1.0 } else { 0.4 });
                let bw = 80.0 + 60.0 * i as f64;
                let d = (f - centre) / bw;
                (1.0 / (1.0 + d * d)) / (1.0 + i as f64)
            })
            .sum::<f64>()
            + 0.02
    }

    /// One utterance of roughly `seconds` at RMS 0.05, peak at most 0.45 so
    /// two-source mixtures stay inside the WAV range.
    pub fn utterance(&self, seconds: f64, rng: &mut impl Rng) -> Result<AudioSignal> {
        let rate = SAMPLE_RATE_HZ as f64;
        let total = (seconds * rate).round() as usize;
        let mut out = vec![0.0; total];
        let mut pos = (rng.random_range(0.02..0.1) * rate) as usize;
        while pos < total {
            let dur = (self.syllable_seconds * rng.random_range(0.7..1.4) * rate) as usize;
            let end = (pos + dur).min(total);
            let start_f0 = self.f0_hz * rng.random_range(0.9..1.12);
            let glide = rng.random_range(-0.15..0.15);
            let vowel = rng.random_range(-1.0..1.0);
            let mut phase = rng.random_range(0.0..2.0 * PI);
            let n = end - pos;
            for (j, o) in out[pos..end].iter_mut().enumerate() {
                let frac = j as f64 / n.max(1) as f64;
                let f0 = start_f0 * (1.0 + glide * frac);
                phase += 2.0 * PI * f0 / rate;
                let amp = (PI * frac).sin().powf(0.6);
                let mut v = 0.0;
                let mut h = 1;
                while (h as f64) * f0 < 0.45 * rate {
                    let hf = h as f64 * f0;
                    v += self.envelope(hf, vowel) * (h as f64 * phase).sin();
                    h += 1;
                }
                *o = amp * v;
            }
            pos = end + (rng.random_range(0.04..0.2) * rate) as usize;
        }
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / total.max(1) as f64).sqrt();
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if rms > 0.0 {
            let gain = (0.05 / rms).min(0.45 / peak);
            out.iter_mut().for_each(|v| *v *= gain);
        }
        AudioSignal::new(out, SAMPLE_RATE_HZ)
    }
}

/// Alternating-gender speakers and their utterances, deterministic in the seed.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<(UtteranceEntry, AudioSignal)>> {
    if cfg.speakers < 2 || cfg.utterances_per_speaker == 0 {
        return Err(Error::Config("synthetic corpus needs >= 2 speakers and >= 1 utterance each".into()));
    }
    if !(cfg.min_seconds > 0.0) || cfg.max_seconds < cfg.min_seconds {
        return Err(Error::Config("invalid synthetic utterance duration range".into()));
    }
    let mut out = Vec::with_capacity(cfg.speakers * cfg.utterances_per_speaker);
    let mut voice_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for s in 0..cfg.speakers {
        let gender = if s % 2 == 0 { Gender::Male } else { Gender::Female };
        let spk = SynthSpeaker::random(format!("spk{s:02}"), gender, &mut voice_rng);
        for u in 0..cfg.utterances_per_speaker {
            let mut rng = record_rng(cfg.seed, (s * cfg.utterances_per_speaker + u) as u64);
            let secs = if cfg.max_seconds > cfg.min_seconds {
                rng.random_range(cfg.min_seconds..cfg.max_seconds)
            } else {
                cfg.min_seconds
            };
            let audio = spk.utterance(secs, &mut rng)?;
            out.push((
                UtteranceEntry {
                    speaker_id: spk.id.clone(),
                    gender,
                    path: format!("{}_u{u:02}.wav", spk.id),
                },
                audio,
            ));
        }
    }
    Ok(out)
}

/// Writes the corpus WAVs into `dir` plus `utterances.csv`; returns the CSV path.
pub fn write_synth_corpus(dir: &Path, cfg: &SynthConfig) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let corpus = synth_corpus(cfg)?;
    for (entry, audio) in &corpus {
        write_wav(dir.join(&entry.path), audio)?;
    }
    let entries: Vec<UtteranceEntry> = corpus.into_iter().map(|(e, _)| e).collect();
    let csv = dir.join("utterances.csv");
    write_utterance_csv(&csv, &entries)?;
    Ok(csv)
}
