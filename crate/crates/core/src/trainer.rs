//! SI-SDR objective, segmentation and the Adam training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_jsonl, AudioSignal};
use crate::error::{Error, Result};
use crate::graph::gradcheck::{check_piecewise, GradcheckResult};
use crate::graph::{zero_mean, AdamState, Graph, Tensor};
use crate::ivector::SpeakerEmbedding;
use crate::model::{TseNetConfig, TseNetModel};

/// Reported SI-SDR and SDR never exceed this value.
pub const DB_CAP: f64 = 120.0;

/// SI-SDR in dB on raw slices, zero-meaned, capped at [`DB_CAP`].
pub fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() || est.len() < 2 {
        return Err(Error::shape(
            "si_sdr",
            format!("estimate of {} samples vs reference of {}", est.len(), reference.len()),
        ));
    }
    let e = zero_mean(est);
    let s = zero_mean(reference);
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss <= 0.0 {
        return Err(Error::invalid("SI-SDR reference has zero power after mean removal"));
    }
    let alpha = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let (mut signal, mut noise) = (0.0, 0.0);
    for (ev, sv) in e.iter().zip(&s) {
        let t = alpha * sv;
        signal += t * t;
        noise += (t - ev) * (t - ev);
    }
    if noise == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * (signal / noise).log10()).min(DB_CAP))
}

pub fn si_sdr(est: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    si_sdr_slices(est.samples(), reference.samples())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub halve_patience: usize,
    pub stop_patience: usize,
    pub segment_seconds: f64,
    /// Remnants shorter than this are dropped, longer ones zero-padded.
    pub min_remnant_seconds: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-3,
            halve_patience: 3,
            stop_patience: 10,
            segment_seconds: 4.0,
            min_remnant_seconds: 1.0,
            batch_size: 10,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) || !(self.segment_seconds > 0.0) || self.min_remnant_seconds < 0.0 {
            return Err(Error::Config("learning rate and segment length must be positive".into()));
        }
        if self.halve_patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch size and max epochs must be positive".into()));
        }
        if self.stop_patience < self.halve_patience {
            return Err(Error::Config("stop_patience must be >= halve_patience".into()));
        }
        Ok(())
    }
}

/// A full-length training utterance before segmentation.
#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub id: String,
    pub mixture: AudioSignal,
    pub target: AudioSignal,
    pub ivector: SpeakerEmbedding,
}

/// One fixed-length segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub mixture: Vec<f64>,
    pub target: Vec<f64>,
    pub ivector: Vec<f64>,
}

/// Joint non-overlapping windows over mixture and target.
pub fn segment_dataset(utts: &[TrainUtterance], seconds: f64, min_remnant_seconds: f64) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for u in utts {
        if u.mixture.len() != u.target.len() {
            return Err(Error::shape("segment_dataset", format!("{}: mixture and target lengths differ", u.id)));
        }
        let rate = u.mixture.sample_rate_hz() as f64;
        let win = (seconds * rate).round() as usize;
        let min_len = (min_remnant_seconds * rate).round() as usize;
        if win == 0 {
            return Err(Error::Config("segment length rounds to zero samples".into()));
        }
        let (m, t) = (u.mixture.samples(), u.target.samples());
        for (i, start) in (0..m.len()).step_by(win).enumerate() {
            let end = (start + win).min(m.len());
            if end - start < win && end - start < min_len {
                continue;
            }
            let mut mix = m[start..end].to_vec();
            let mut tgt = t[start..end].to_vec();
            mix.resize(win, 0.0);
            tgt.resize(win, 0.0);
            out.push(TrainExample {
                id: format!("{}#{i}", u.id),
                mixture: mix,
                target: tgt,
                ivector: u.ivector.vec.clone(),
            });
        }
    }
    Ok(out)
}

fn example_graph(model: &TseNetModel, ex: &TrainExample, trainable: bool) -> Result<(Graph, Vec<crate::graph::Var>, crate::graph::Var)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, trainable);
    let f = model.forward_graph(&mut g, &p, &ex.mixture, &ex.ivector)?;
    let loss = g.neg_si_sdr(f.estimate, &ex.target)?;
    Ok((g, p, loss))
}

/// Negative SI-SDR of one example on a fresh graph; returns the loss and,
/// when `with_grad`, gradients for every model parameter.
fn example_loss(model: &TseNetModel, ex: &TrainExample, with_grad: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
    let (g, p, loss) = example_graph(model, ex, with_grad)?;
    let value = g.value(loss).item();
    if !with_grad {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss)?;
    let out = p
        .iter()
        .zip(model.params())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    Ok((value, Some(out)))
}

/// Per-example results reduced in input order, so the outcome does not
/// depend on whether examples ran in parallel.
fn map_examples<T: Send>(
    batch: &[&TrainExample],
    parallel: bool,
    f: impl Fn(&TrainExample) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if parallel {
        batch.par_iter().map(|ex| f(ex)).collect()
    } else {
        batch.iter().map(|ex| f(ex)).collect()
    }
}

/// Mean negative SI-SDR over a batch (uncapped).
pub fn neg_si_sdr_loss(model: &TseNetModel, batch: &[&TrainExample], parallel: bool) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let losses = map_examples(batch, parallel, |ex| Ok(example_loss(model, ex, false)?.0))?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Mean loss and its gradient for every parameter.
pub fn loss_and_grad(model: &TseNetModel, batch: &[&TrainExample], parallel: bool) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    let mut loss = 0.0;
    let mut absorb = |(l, grads): (f64, Option<Vec<Tensor>>)| {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads.unwrap_or_default()) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v * scale);
        }
    };
    if parallel {
        for r in map_examples(batch, true, |ex| example_loss(model, ex, true))? {
            absorb(r);
        }
    } else {
        for ex in batch {
            absorb(example_loss(model, ex, true)?);
        }
    }
    Ok((loss * scale, total))
}

/// What the schedule decided after one epoch's dev loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleDecision {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Halve the learning rate after `halve_patience` epochs without a new best
/// dev loss; stop after `stop_patience`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub best: f64,
    pub since_best: usize,
    pub since_halving: usize,
    halve_patience: usize,
    stop_patience: usize,
}

impl LrSchedule {
    pub fn new(lr: f64, halve_patience: usize, stop_patience: usize) -> Self {
        LrSchedule {
            lr,
            best: f64::INFINITY,
            since_best: 0,
            since_halving: 0,
            halve_patience,
            stop_patience,
        }
    }

    pub fn observe(&mut self, dev_loss: f64) -> ScheduleDecision {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.since_best = 0;
            self.since_halving = 0;
            return ScheduleDecision {
                improved: true,
                halved: false,
                stop: false,
            };
        }
        self.since_best += 1;
        self.since_halving += 1;
        let halved = self.since_halving >= self.halve_patience;
        if halved {
            self.lr /= 2.0;
            self.since_halving = 0;
        }
        ScheduleDecision {
            improved: false,
            halved,
            stop: self.since_best >= self.stop_patience,
        }
    }
}

/// Parameters plus optimizer state, advanced one minibatch at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TseNetModel,
    pub adam: AdamState,
    pub parallel: bool,
}

impl Trainer {
    pub fn new(model: TseNetModel) -> Self {
        let adam = AdamState::new(model.params());
        Trainer {
            model,
            adam,
            parallel: false,
        }
    }

    /// One Adam step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[&TrainExample], lr: f64) -> Result<f64> {
        let (loss, grads) = loss_and_grad(&self.model, batch, self.parallel)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss or gradient (loss {loss})")));
        }
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.jsonl")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    /// Snapshot written whenever `epoch` sets a new best dev loss.
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch{epoch:03}.ckpt"))
    }

    pub fn meta(&self) -> PathBuf {
        self.dir.join("history_meta.json")
    }

    pub fn divergence_dump(&self) -> PathBuf {
        self.dir.join("divergence.json")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev loss.
    pub best_model: TseNetModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

#[derive(Serialize)]
struct Meta<'a> {
    dev_loss_basis: &'static str,
    schedule: &'static str,
    config: &'a TrainConfig,
    model: &'a TseNetConfig,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    detail: String,
    batch_ids: Vec<&'a str>,
    nonfinite_params: Vec<&'a str>,
}

/// Seeded-shuffle minibatch training with dev-loss driven LR halving and
/// early stopping.
pub fn train(
    model: TseNetModel,
    train_set: &[TrainExample],
    dev_set: &[TrainExample],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
    parallel: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::invalid("training and dev sets must be non-empty"));
    }
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        let meta = Meta {
            dev_loss_basis: "segments",
            schedule: "halve after halve_patience epochs without a new best dev loss; stop after stop_patience",
            config: cfg,
            model: model.config(),
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(o.meta(), text).map_err(|e| Error::io(o.meta(), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(model);
    trainer.parallel = parallel;
    let mut schedule = LrSchedule::new(cfg.lr_init, cfg.halve_patience, cfg.stop_patience);
    let mut best_model = trainer.model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let dev_refs: Vec<&TrainExample> = dev_set.iter().collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            match trainer.step(&batch, lr) {
                Ok(l) => loss_sum += l,
                Err(Error::Numerical(detail)) => {
                    let err = Error::Divergence { epoch, step, detail };
                    if let Some(o) = outputs {
                        dump_divergence(o, &trainer.model, epoch, step, lr, &err, &batch)?;
                    }
                    return Err(err);
                }
                Err(e) => return Err(e),
            }
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let dev_loss = neg_si_sdr_loss(&trainer.model, &dev_refs, parallel)?;
        if !dev_loss.is_finite() {
            let err = Error::Divergence {
                epoch,
                step: batches,
                detail: format!("dev loss {dev_loss}"),
            };
            if let Some(o) = outputs {
                dump_divergence(o, &trainer.model, epoch, batches, lr, &err, &[])?;
            }
            return Err(err);
        }
        let decision = schedule.observe(dev_loss);
        log::info!(
            "event=epoch epoch={epoch} train_loss={train_loss:.6} dev_loss={dev_loss:.6} lr={lr:e} improved={} halved={}",
            decision.improved,
            decision.halved
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            lr,
        });
        if decision.improved {
            best_model = trainer.model.clone();
            best_epoch = epoch;
            if let Some(o) = outputs {
                best_model.save(&o.epoch_checkpoint(epoch))?;
                best_model.save(&o.best_checkpoint())?;
            }
        }
        if let Some(o) = outputs {
            write_jsonl(o.history(), &history)?;
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best_model,
        best_epoch,
        history,
        stopped_early,
    })
}

fn dump_divergence(
    o: &TrainOutputs,
    model: &TseNetModel,
    epoch: usize,
    step: usize,
    lr: f64,
    err: &Error,
    batch: &[&TrainExample],
) -> Result<()> {
    let dump = DivergenceDump {
        epoch,
        step,
        lr,
        detail: err.to_string(),
        batch_ids: batch.iter().map(|e| e.id.as_str()).collect(),
        nonfinite_params: model
            .param_names()
            .iter()
            .zip(model.params())
            .filter(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
            .collect(),
    };
    let text = serde_json::to_string_pretty(&dump).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(o.divergence_dump(), text).map_err(|e| Error::io(o.divergence_dump(), e))?;
    log::error!("event=divergence epoch={epoch} step={step} dump={}", o.divergence_dump().display());
    Ok(())
}

/// Finite-difference check of the end-to-end loss gradient for every
/// parameter tensor of a freshly built model.
pub fn gradcheck_model(config: TseNetConfig, samples: usize, max_entries: usize, seed: u64) -> Result<Vec<GradcheckResult>> {
    let model = TseNetModel::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let target: Vec<f64> = (0..samples).map(|i| (i as f64 * 0.05).sin() * 0.5 + rng.random_range(-0.05..0.05)).collect();
    let mixture: Vec<f64> = target.iter().map(|t| t + rng.random_range(-0.3..0.3)).collect();
    let ivector: Vec<f64> = (0..config.d1).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ex = TrainExample {
        id: "gradcheck".into(),
        mixture,
        target,
        ivector,
    };
    let (_, grads) = loss_and_grad(&model, &[&ex], false)?;
    let mut results = Vec::with_capacity(grads.len());
    for (i, (name, grad)) in model.param_names().iter().zip(&grads).enumerate() {
        let probe = std::cell::RefCell::new(model.clone());
        let r = check_piecewise(
            name,
            std::slice::from_ref(&model.params()[i]),
            std::slice::from_ref(grad),
            |t| {
                let mut m = probe.borrow_mut();
                m.params_mut()[i].data_mut().copy_from_slice(t[0].data());
                let (g, _, loss) = example_graph(&m, &ex, false)?;
                Ok((g.value(loss).item(), g.activation_pattern()))
            },
            max_entries,
            seed.wrapping_add(i as u64),
        )?;
        results.extend(r);
    }
    Ok(results)
}

/// Loads a history JSON-lines file.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    crate::audio::read_jsonl(path)
}
