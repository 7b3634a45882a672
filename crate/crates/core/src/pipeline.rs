//! Resolved pipeline configuration, on-disk layout and the stages behind the
//! `tsenet` subcommands.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{
    log_spectrogram, plan_corpus, read_jsonl, read_utterance_csv, read_wav, realize, resolve, write_jsonl, write_wav,
    AudioSignal, MixtureManifestEntry, UtteranceManifest,
};
use crate::error::{Error, Result};
use crate::features::{self, read_archive, write_archive, FeatureMatrix, FrameConfig};
use crate::graph::gradcheck::{check_operators, GradcheckResult};
use crate::ivector::{
    accumulate_stats, extract_ivector, train_tv, train_ubm, BaumWelchStats, GmmUbm, IvectorRecord, SpeakerEmbedding,
    TotalVariability, TvConfig, UbmConfig,
};
use crate::metrics::{evaluate_corpus, EstimateEntry, EvalReport, DEFAULT_TAPS};
use crate::model::{TseNetConfig, TseNetModel};
use crate::synth::{write_synth_corpus, SynthConfig};
use crate::trainer::{gradcheck_model, segment_dataset, train, TrainConfig, TrainOutputs, TrainUtterance};

pub const SCHEMA_VERSION: u32 = 1;
/// Signal length of the end-to-end gradient check.
pub const GRADCHECK_SAMPLES: usize = 400;
pub const GRADCHECK_ENTRIES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub snr_low_db: f64,
    pub snr_high_db: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            train_count: 200,
            dev_count: 50,
            test_count: 50,
            snr_low_db: 0.0,
            snr_high_db: 5.0,
        }
    }
}

/// Which enrollment data conditions extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IvectorSource {
    /// The single reference utterance named by each mixture.
    Reference,
    /// Statistics pooled over every utterance of the reference speaker.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub taps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub work_dir: String,
    /// Utterance CSV; `None` synthesizes a corpus under the work dir.
    pub utterances: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub simulate: SimulateConfig,
    pub frames: FrameConfig,
    pub ubm: UbmConfig,
    pub tv: TvConfig,
    pub ivector_source: IvectorSource,
    pub model: TseNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            paths: Paths {
                work_dir: "tsenet-work".into(),
                utterances: None,
            },
            synth: SynthConfig::default(),
            simulate: SimulateConfig::default(),
            frames: FrameConfig::default(),
            ubm: UbmConfig::default(),
            tv: TvConfig::default(),
            ivector_source: IvectorSource::Reference,
            model: TseNetConfig::paper(),
            train: TrainConfig::default(),
            eval: EvalConfig { taps: DEFAULT_TAPS },
        }
    }
}

impl PipelineConfig {
    /// Desk-scale end-to-end run on the bundled synthetic corpus.
    pub fn selftest() -> Self {
        let model = TseNetConfig::tiny();
        PipelineConfig {
            simulate: SimulateConfig {
                train_count: 40,
                dev_count: 8,
                test_count: 12,
                ..SimulateConfig::default()
            },
            ubm: UbmConfig {
                components: 16,
                em_iters: 8,
                ..UbmConfig::default()
            },
            tv: TvConfig {
                factors: model.d1,
                em_iters: 4,
            },
            model,
            train: TrainConfig {
                max_epochs: 12,
                ..TrainConfig::default()
            },
            eval: EvalConfig { taps: 32 },
            ..PipelineConfig::default()
        }
    }

    /// `default` and `selftest`, or a model preset on top of the defaults.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "selftest" => Ok(Self::selftest()),
            other => {
                let model = TseNetConfig::preset(other)?;
                Ok(PipelineConfig {
                    model,
                    tv: TvConfig {
                        factors: model.d1,
                        ..TvConfig::default()
                    },
                    ..Self::default()
                })
            }
        }
    }

    /// A JSON file if `spec` names one, otherwise a preset.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !path.is_file() {
            return Self::preset(spec);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.frames.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.tv.factors != self.model.d1 {
            return Err(Error::Config(format!(
                "i-vector dimension {} differs from model D1 {}",
                self.tv.factors, self.model.d1
            )));
        }
        let s = &self.simulate;
        if !(s.snr_low_db <= s.snr_high_db) || s.train_count == 0 || s.dev_count == 0 || s.test_count == 0 {
            return Err(Error::Config("simulate needs non-empty splits and snr_low_db <= snr_high_db".into()));
        }
        if self.eval.taps == 0 {
            return Err(Error::Config("eval.taps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: PathBuf::from(&self.paths.work_dir),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent sub-seed for a named stage.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Fixed file layout under the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn mixtures_dir(&self, split: Split) -> PathBuf {
        self.root.join("mixtures").join(split.as_str())
    }

    pub fn mixture_manifest(&self, split: Split) -> PathBuf {
        self.mixtures_dir(split).join("mixtures.jsonl")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features").join("utterances.bin")
    }

    pub fn ubm(&self) -> PathBuf {
        self.root.join("models").join("ubm.bin")
    }

    pub fn tv(&self) -> PathBuf {
        self.root.join("models").join("tv.bin")
    }

    pub fn ivectors(&self) -> PathBuf {
        self.root.join("ivectors").join("utterances.jsonl")
    }

    pub fn speaker_ivectors(&self) -> PathBuf {
        self.root.join("ivectors").join("speakers.jsonl")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.train_dir().join("best.ckpt")
    }

    pub fn extract_dir(&self) -> PathBuf {
        self.root.join("extract")
    }

    pub fn estimates(&self) -> PathBuf {
        self.extract_dir().join("estimates.jsonl")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

/// File stem used as utterance and record id.
pub fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Runs `f` over `items` in order, in parallel when asked; results keep input order.
fn map_items<T: Sync, U: Send>(items: &[T], parallel: bool, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if parallel {
        items.par_iter().map(&f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub tsenet: &'static str,
    pub config_schema: u32,
}

/// Provenance written next to every subcommand's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

pub fn write_run_manifest(
    cfg: &PipelineConfig,
    subcommand: &str,
    started: Instant,
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions: Versions {
            tsenet: env!("CARGO_PKG_VERSION"),
            config_schema: SCHEMA_VERSION,
        },
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let runs = cfg.layout().runs_dir();
    write_json(&runs.join(format!("{subcommand}.config.json")), cfg)?;
    let path = runs.join(format!("{subcommand}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

fn utterance_csv(cfg: &PipelineConfig) -> PathBuf {
    match &cfg.paths.utterances {
        Some(p) => PathBuf::from(p),
        None => cfg.layout().corpus_dir().join("utterances.csv"),
    }
}

fn csv_base(csv: &Path) -> PathBuf {
    csv.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// Writes the train/dev/test mixture corpora; returns their manifests.
pub fn simulate(cfg: &PipelineConfig, parallel: bool) -> Result<Vec<PathBuf>> {
    let layout = cfg.layout();
    let synthesized = cfg.paths.utterances.is_none();
    let csv = if synthesized {
        write_synth_corpus(&layout.corpus_dir(), &cfg.synth)?
    } else {
        utterance_csv(cfg)
    };
    let manifest = UtteranceManifest::read_csv(&csv)?;
    let base = csv_base(&csv);
    let load = |p: &str| read_wav(resolve(&base, p));
    let reference = |utt: &str| -> Result<String> {
        if synthesized {
            // mixtures/<split>/ → corpus/
            Ok(format!("../../corpus/{utt}"))
        } else {
            let p = resolve(&base, utt);
            let abs = p.canonicalize().map_err(|e| Error::io(&p, e))?;
            Ok(abs.display().to_string())
        }
    };
    let s = &cfg.simulate;
    let mut manifests = Vec::new();
    for (split, count) in Split::ALL.into_iter().zip([s.train_count, s.dev_count, s.test_count]) {
        let specs = plan_corpus(
            &manifest,
            count,
            s.snr_low_db,
            s.snr_high_db,
            derive_seed(cfg.seed, split.as_str()),
        )?;
        let dir = layout.mixtures_dir(split);
        create_dir(&dir)?;
        let indexed: Vec<(usize, _)> = specs.iter().enumerate().collect();
        let entries = map_items(&indexed, parallel, |(i, spec)| {
            let rec = realize(spec, &load)?;
            let id = format!("{}_{i:04}", split.as_str());
            let mixture_path = format!("{id}.wav");
            let target_path = format!("{id}_target.wav");
            write_wav(dir.join(&mixture_path), &rec.mixture)?;
            write_wav(dir.join(&target_path), &rec.target_source)?;
            let mut interf_paths = Vec::new();
            for (k, src) in rec.interference_sources.iter().enumerate() {
                let p = format!("{id}_interf{k}.wav");
                write_wav(dir.join(&p), src)?;
                interf_paths.push(p);
            }
            Ok(MixtureManifestEntry {
                mixture_path,
                target_path,
                interf_paths,
                reference_path: reference(&rec.reference_utterance)?,
                snr_db: rec.snr_db,
                gender_pair: rec.gender_pair,
            })
        })?;
        let path = layout.mixture_manifest(split);
        write_jsonl(&path, &entries)?;
        log::info!("event=simulate split={} mixtures={}", split.as_str(), entries.len());
        manifests.push(path);
    }
    Ok(manifests)
}

/// Front-end features for every utterance of the utterance manifest.
pub fn extract_features(cfg: &PipelineConfig, parallel: bool) -> Result<PathBuf> {
    let csv = utterance_csv(cfg);
    let base = csv_base(&csv);
    let entries = read_utterance_csv(&csv)?;
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(stem(&e.path)) {
            return Err(Error::Manifest(format!("duplicate utterance file stem '{}'", stem(&e.path))));
        }
    }
    let items = map_items(&entries, parallel, |e| {
        let audio = read_wav(resolve(&base, &e.path))?;
        Ok((stem(&e.path), features::pipeline(&audio, &cfg.frames)?))
    })?;
    let path = cfg.layout().features();
    create_dir(path.parent().expect("features path has a parent"))?;
    write_archive(&path, &items)?;
    log::info!("event=features utterances={} path={}", items.len(), path.display());
    Ok(path)
}

fn load_features(cfg: &PipelineConfig) -> Result<Vec<(String, FeatureMatrix)>> {
    read_archive(&cfg.layout().features())
}

/// Writes every archived feature matrix to `<dir>/<id>.csv`, one frame per row.
pub fn dump_features_csv(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    load_features(cfg)?
        .into_iter()
        .map(|(id, m)| {
            let path = dir.join(format!("{id}.csv"));
            let mut buf = Vec::new();
            m.write_csv(&mut buf).map_err(|e| Error::io(&path, e))?;
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[derive(Serialize)]
struct History<'a> {
    objective: &'a [f64],
}

pub fn run_train_ubm(cfg: &PipelineConfig) -> Result<PathBuf> {
    let layout = cfg.layout();
    let feats: Vec<FeatureMatrix> = load_features(cfg)?.into_iter().map(|(_, f)| f).collect();
    let out = train_ubm(&feats, &cfg.ubm, derive_seed(cfg.seed, "ubm"))?;
    let path = layout.ubm();
    create_dir(path.parent().expect("model path has a parent"))?;
    out.ubm.save(&path)?;
    write_json(
        &path.with_file_name("ubm_history.json"),
        &History {
            objective: &out.loglik_history,
        },
    )?;
    log::info!(
        "event=train_ubm components={} final_loglik={:.6}",
        out.ubm.components(),
        out.loglik_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(path)
}

fn all_stats(cfg: &PipelineConfig, ubm: &GmmUbm, parallel: bool) -> Result<Vec<(String, BaumWelchStats)>> {
    let feats = load_features(cfg)?;
    map_items(&feats, parallel, |(id, f)| Ok((id.clone(), accumulate_stats(ubm, f)?)))
}

pub fn run_train_tv(cfg: &PipelineConfig, parallel: bool) -> Result<PathBuf> {
    let layout = cfg.layout();
    let ubm = GmmUbm::load(&layout.ubm())?;
    let stats: Vec<BaumWelchStats> = all_stats(cfg, &ubm, parallel)?.into_iter().map(|(_, s)| s).collect();
    let out = train_tv(&ubm, &stats, &cfg.tv, derive_seed(cfg.seed, "tv"))?;
    let path = layout.tv();
    out.tv.save(&path)?;
    write_json(
        &path.with_file_name("tv_history.json"),
        &History {
            objective: &out.objective_history,
        },
    )?;
    log::info!(
        "event=train_tv factors={} final_objective={:.6}",
        out.tv.factors(),
        out.objective_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(path)
}

fn sum_stats(parts: &[&BaumWelchStats]) -> BaumWelchStats {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc.occupancy.iter_mut().zip(&p.occupancy).for_each(|(a, b)| *a += b);
        acc.first_order.iter_mut().zip(&p.first_order).for_each(|(a, b)| *a += b);
    }
    acc
}

/// Per-utterance i-vectors plus one pooled i-vector per speaker.
pub fn run_ivectors(cfg: &PipelineConfig, parallel: bool) -> Result<Vec<PathBuf>> {
    let layout = cfg.layout();
    let ubm = GmmUbm::load(&layout.ubm())?;
    let tv = TotalVariability::load(&layout.tv())?;
    let csv = utterance_csv(cfg);
    let speaker_of: HashMap<String, String> = read_utterance_csv(&csv)?
        .into_iter()
        .map(|e| (stem(&e.path), e.speaker_id))
        .collect();
    let stats = all_stats(cfg, &ubm, parallel)?;
    let records = map_items(&stats, parallel, |(id, s)| {
        let speaker_id = speaker_of
            .get(id)
            .ok_or_else(|| Error::Manifest(format!("utterance '{id}' is not in {}", csv.display())))?
            .clone();
        Ok(IvectorRecord {
            utterance_id: id.clone(),
            speaker_id,
            vec: extract_ivector(&ubm, &tv, s)?.vec,
        })
    })?;
    let mut by_speaker: std::collections::BTreeMap<&str, Vec<&BaumWelchStats>> = Default::default();
    for (rec, (_, s)) in records.iter().zip(&stats) {
        by_speaker.entry(rec.speaker_id.as_str()).or_default().push(s);
    }
    let pooled = by_speaker
        .iter()
        .map(|(spk, parts)| {
            Ok(IvectorRecord {
                utterance_id: format!("pooled:{spk}"),
                speaker_id: spk.to_string(),
                vec: extract_ivector(&ubm, &tv, &sum_stats(parts))?.vec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(layout.ivectors().parent().expect("ivector path has a parent"))?;
    write_jsonl(layout.ivectors(), &records)?;
    write_jsonl(layout.speaker_ivectors(), &pooled)?;
    log::info!("event=ivectors utterances={} speakers={}", records.len(), pooled.len());
    Ok(vec![layout.ivectors(), layout.speaker_ivectors()])
}

/// Looks up the conditioning i-vector of a mixture.
pub struct IvectorTable {
    source: IvectorSource,
    by_utterance: HashMap<String, IvectorRecord>,
    by_speaker: HashMap<String, Vec<f64>>,
}

impl IvectorTable {
    pub fn load(layout: &Layout, source: IvectorSource) -> Result<Self> {
        let utts: Vec<IvectorRecord> = read_jsonl(layout.ivectors())?;
        let spks: Vec<IvectorRecord> = read_jsonl(layout.speaker_ivectors())?;
        Ok(IvectorTable {
            source,
            by_utterance: utts.into_iter().map(|r| (r.utterance_id.clone(), r)).collect(),
            by_speaker: spks.into_iter().map(|r| (r.speaker_id, r.vec)).collect(),
        })
    }

    pub fn for_mixture(&self, entry: &MixtureManifestEntry) -> Result<SpeakerEmbedding> {
        let id = stem(&entry.reference_path);
        let rec = self
            .by_utterance
            .get(&id)
            .ok_or_else(|| Error::Manifest(format!("no i-vector for reference utterance '{id}'")))?;
        let vec = match self.source {
            IvectorSource::Reference => rec.vec.clone(),
            IvectorSource::Pooled => self
                .by_speaker
                .get(&rec.speaker_id)
                .ok_or_else(|| Error::Manifest(format!("no pooled i-vector for speaker '{}'", rec.speaker_id)))?
                .clone(),
        };
        SpeakerEmbedding::new(vec)
    }
}

fn load_split(layout: &Layout, split: Split, table: &IvectorTable) -> Result<Vec<TrainUtterance>> {
    let manifest = layout.mixture_manifest(split);
    let base = layout.mixtures_dir(split);
    let entries: Vec<MixtureManifestEntry> = read_jsonl(&manifest)?;
    entries
        .iter()
        .map(|e| {
            Ok(TrainUtterance {
                id: e.id(),
                mixture: read_wav(resolve(&base, &e.mixture_path))?,
                target: read_wav(resolve(&base, &e.target_path))?,
                ivector: table.for_mixture(e)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
}

pub fn run_train(cfg: &PipelineConfig, parallel: bool) -> Result<TrainSummary> {
    let layout = cfg.layout();
    let table = IvectorTable::load(&layout, cfg.ivector_source)?;
    let t = &cfg.train;
    let train_set = segment_dataset(
        &load_split(&layout, Split::Train, &table)?,
        t.segment_seconds,
        t.min_remnant_seconds,
    )?;
    let dev_set = segment_dataset(&load_split(&layout, Split::Dev, &table)?, t.segment_seconds, t.min_remnant_seconds)?;
    let model = TseNetModel::build(cfg.model, derive_seed(cfg.seed, "model"))?;
    log::info!(
        "event=train_start params={} train_segments={} dev_segments={}",
        model.param_count(),
        train_set.len(),
        dev_set.len()
    );
    let outputs = TrainOutputs { dir: layout.train_dir() };
    let out = train(model, &train_set, &dev_set, t, Some(&outputs), parallel)?;
    let best_dev_loss = out
        .history
        .iter()
        .find(|h| h.epoch == out.best_epoch)
        .map_or(f64::NAN, |h| h.dev_loss);
    Ok(TrainSummary {
        epochs: out.history.len(),
        best_epoch: out.best_epoch,
        best_dev_loss,
        stopped_early: out.stopped_early,
        checkpoint: outputs.best_checkpoint(),
    })
}

/// Extracts one mixture; the output has the mixture's length.
pub fn extract_one(model: &TseNetModel, mixture: &AudioSignal, ivector: &SpeakerEmbedding) -> Result<AudioSignal> {
    Ok(model.forward(mixture, ivector)?.0)
}

/// A single i-vector record (one JSON object, or the first JSON-lines record).
pub fn read_ivector_file(path: &Path) -> Result<SpeakerEmbedding> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let rec: IvectorRecord = serde_json::from_str(text.trim())
        .or_else(|_| serde_json::from_str(first))
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected an i-vector record: {e}"),
        })?;
    SpeakerEmbedding::new(rec.vec)
}

/// Extracts every test mixture with the trained checkpoint.
pub fn run_extract_corpus(cfg: &PipelineConfig, ckpt: &Path, parallel: bool) -> Result<PathBuf> {
    let layout = cfg.layout();
    let model = TseNetModel::load(ckpt)?;
    let table = IvectorTable::load(&layout, cfg.ivector_source)?;
    let base = layout.mixtures_dir(Split::Test);
    let entries: Vec<MixtureManifestEntry> = read_jsonl(layout.mixture_manifest(Split::Test))?;
    let dir = layout.extract_dir();
    create_dir(&dir)?;
    let estimates = map_items(&entries, parallel, |e| {
        let mixture = read_wav(resolve(&base, &e.mixture_path))?;
        let est = extract_one(&model, &mixture, &table.for_mixture(e)?)?;
        let id = e.id();
        let path = format!("{id}.wav");
        write_wav(dir.join(&path), &est)?;
        Ok(EstimateEntry { id, path })
    })?;
    write_jsonl(layout.estimates(), &estimates)?;
    log::info!("event=extract mixtures={}", estimates.len());
    Ok(layout.estimates())
}

/// Scores the extracted test set; writes CSVs, the text tables and a JSON summary.
pub fn run_evaluate(cfg: &PipelineConfig, ckpt: Option<&Path>, parallel: bool) -> Result<(EvalReport, Vec<PathBuf>)> {
    let layout = cfg.layout();
    let params = match ckpt {
        Some(p) => Some(TseNetModel::load(p)?.param_count()),
        None => None,
    };
    let report = evaluate_corpus(
        &layout.estimates(),
        &layout.mixture_manifest(Split::Test),
        cfg.eval.taps,
        "TseNet",
        params,
        parallel,
    )?;
    let dir = layout.eval_dir();
    create_dir(&dir)?;
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(p, e)
    };
    let report_csv = dir.join("report.csv");
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(csv_err(&report_csv))?;
    std::fs::write(&report_csv, &buf).map_err(csv_err(&report_csv))?;
    let mixture_csv = dir.join("mixture.csv");
    buf.clear();
    report.write_mixture_csv(&mut buf).map_err(csv_err(&mixture_csv))?;
    std::fs::write(&mixture_csv, &buf).map_err(csv_err(&mixture_csv))?;
    let tables = dir.join("tables.txt");
    write_text(&tables, &report.render_tables())?;
    let summary = dir.join("summary.json");
    write_json(
        &summary,
        &serde_json::json!({
            "method": report.method,
            "param_count": report.param_count,
            "taps": cfg.eval.taps,
            "method_summary": report.summary(),
            "mixture_summary": report.mixture_summary(),
        }),
    )?;
    Ok((report, vec![report_csv, mixture_csv, tables, summary]))
}

/// Log-magnitude spectrogram of a WAV as CSV, or PGM when `out` ends in `.pgm`.
pub fn run_spectrogram(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<()> {
    let audio = read_wav(input)?;
    let spec = log_spectrogram(&audio, cfg.frames.win_samples, cfg.frames.hop_samples)?;
    let mut buf = Vec::new();
    let res = if out.extension().is_some_and(|e| e == "pgm") {
        spec.write_pgm(&mut buf)
    } else {
        spec.write_csv(&mut buf)
    };
    res.map_err(|e| Error::io(out, e))?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    std::fs::write(out, buf).map_err(|e| Error::io(out, e))
}

/// Per-operator checks followed by the end-to-end loss on `model`.
pub fn run_gradcheck(model: TseNetConfig, seed: u64) -> Result<Vec<GradcheckResult>> {
    let mut results = check_operators(seed)?;
    for mut r in gradcheck_model(model, GRADCHECK_SAMPLES, GRADCHECK_ENTRIES, seed)? {
        r.name = format!("end_to_end/{}", r.name);
        results.push(r);
    }
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct SelftestOutcome {
    pub tables: String,
    /// Hex SHA-256 over the evaluation CSVs and tables.
    pub report_digest: String,
    pub train: TrainSummary,
}

/// The whole pipeline on the bundled synthetic corpus, each stage leaving a
/// run manifest.
pub fn run_selftest(cfg: &PipelineConfig, parallel: bool) -> Result<SelftestOutcome> {
    cfg.validate()?;
    let stage = |name: &str, f: &mut dyn FnMut() -> Result<Vec<PathBuf>>| -> Result<()> {
        let started = Instant::now();
        let outputs = f()?;
        write_run_manifest(cfg, name, started, &outputs)?;
        log::info!("event=stage_done stage={name} seconds={:.2}", started.elapsed().as_secs_f64());
        Ok(())
    };
    stage("simulate", &mut || simulate(cfg, parallel))?;
    stage("features", &mut || Ok(vec![extract_features(cfg, parallel)?]))?;
    stage("train-ubm", &mut || Ok(vec![run_train_ubm(cfg)?]))?;
    stage("train-tv", &mut || Ok(vec![run_train_tv(cfg, parallel)?]))?;
    stage("ivector", &mut || run_ivectors(cfg, parallel))?;
    let mut summary = None;
    stage("train", &mut || {
        let s = run_train(cfg, parallel)?;
        let ckpt = s.checkpoint.clone();
        summary = Some(s);
        Ok(vec![ckpt])
    })?;
    let ckpt = cfg.layout().checkpoint();
    stage("extract", &mut || Ok(vec![run_extract_corpus(cfg, &ckpt, parallel)?]))?;
    let mut eval = None;
    stage("evaluate", &mut || {
        let (report, outputs) = run_evaluate(cfg, Some(&ckpt), parallel)?;
        eval = Some(report);
        Ok(outputs)
    })?;
    let report = eval.expect("evaluate stage ran");
    let dir = cfg.layout().eval_dir();
    let mut h = Sha256::new();
    for name in ["report.csv", "mixture.csv", "tables.txt"] {
        let p = dir.join(name);
        h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(SelftestOutcome {
        tables: report.render_tables(),
        report_digest: hex(&h.finalize()),
        train: summary.expect("train stage ran"),
    })
}
