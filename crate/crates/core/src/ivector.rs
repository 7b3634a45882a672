//! GMM-UBM and total-variability training, Baum-Welch statistics and i-vector
//! extraction.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binfmt::{read_file, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::gemm;

const UBM_MAGIC: &[u8; 8] = b"TSE-UBM\0";
const TV_MAGIC: &[u8; 8] = b"TSE-TVM\0";
const MODEL_VERSION: u32 = 1;

/// Frames per E-step work unit. Fixed so reductions do not depend on thread count.
const CHUNK_FRAMES: usize = 2048;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UbmConfig {
    pub components: usize,
    /// Full EM passes once all components exist.
    pub em_iters: usize,
    /// EM passes after each splitting round.
    pub split_em_iters: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor_ratio: f64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        UbmConfig {
            components: 512,
            em_iters: 10,
            split_em_iters: 2,
            var_floor_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvConfig {
    pub factors: usize,
    pub em_iters: usize,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            factors: 400,
            em_iters: 5,
        }
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmUbm {
    dims: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

/// Per-component terms that turn frame scoring into two matrix products.
struct Scorer {
    consts: Vec<f64>,
    mean_over_var: Vec<f64>,
    half_inv_var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EmAccum {
    loglik: f64,
    occ: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl EmAccum {
    fn zeros(c: usize, f: usize) -> Self {
        EmAccum {
            loglik: 0.0,
            occ: vec![0.0; c],
            first: vec![0.0; c * f],
            second: vec![0.0; c * f],
        }
    }

    fn add(&mut self, o: &EmAccum) {
        self.loglik += o.loglik;
        add_into(&mut self.occ, &o.occ);
        add_into(&mut self.first, &o.first);
        add_into(&mut self.second, &o.second);
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Row-major frames × dims data plus its elementwise square.
struct FrameData {
    frames: usize,
    dims: usize,
    x: Vec<f64>,
    x2: Vec<f64>,
}

impl FrameData {
    fn from_features(features: &[FeatureMatrix]) -> Result<Self> {
        let dims = features
            .iter()
            .find(|m| m.frames() > 0)
            .map(FeatureMatrix::dims)
            .ok_or_else(|| Error::invalid("no feature frames to train on"))?;
        if features.iter().any(|m| m.frames() > 0 && m.dims() != dims) {
            return Err(Error::shape("train_ubm", "feature dimensions differ"));
        }
        let x: Vec<f64> = features.iter().flat_map(|m| m.data().iter().copied()).collect();
        let x2 = x.iter().map(|v| v * v).collect();
        Ok(FrameData {
            frames: x.len() / dims,
            dims,
            x,
            x2,
        })
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        (0..self.frames)
            .step_by(CHUNK_FRAMES)
            .map(|s| (s, (s + CHUNK_FRAMES).min(self.frames)))
            .collect()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmUbm {
    pub fn new(dims: usize, weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let c = weights.len();
        if c == 0 || dims == 0 || means.len() != c * dims || variances.len() != c * dims {
            return Err(Error::shape("GmmUbm::new", format!("{c} components, {dims} dims")));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("UBM weights must be positive and sum to 1"));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("UBM means must be finite and variances positive"));
        }
        Ok(GmmUbm {
            dims,
            weights,
            means,
            variances,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dims..(c + 1) * self.dims]
    }

    pub fn variance(&self, c: usize) -> &[f64] {
        &self.variances[c * self.dims..(c + 1) * self.dims]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn scorer(&self) -> Scorer {
        let (c, f) = (self.components(), self.dims);
        let mut consts = Vec::with_capacity(c);
        let mut mean_over_var = Vec::with_capacity(c * f);
        let mut half_inv_var = Vec::with_capacity(c * f);
        for k in 0..c {
            let (m, v) = (self.mean(k), self.variance(k));
            let mut acc = self.weights[k].ln();
            for d in 0..f {
                acc -= 0.5 * (LN_2PI + v[d].ln() + m[d] * m[d] / v[d]);
                mean_over_var.push(m[d] / v[d]);
                half_inv_var.push(0.5 / v[d]);
            }
            consts.push(acc);
        }
        Scorer {
            consts,
            mean_over_var,
            half_inv_var,
        }
    }

    /// Per-frame joint log-likelihoods `log w_c + log N(x | c)`, frames × components.
    fn joint_loglik(&self, sc: &Scorer, x: &[f64], x2: &[f64], n: usize) -> Vec<f64> {
        let (c, f) = (self.components(), self.dims);
        let mut out = vec![0.0; n * c];
        gemm(n, f, c, x, false, &sc.mean_over_var, true, 0.0, &mut out);
        let mut quad = vec![0.0; n * c];
        gemm(n, f, c, x2, false, &sc.half_inv_var, true, 0.0, &mut quad);
        for (row, qrow) in out.chunks_exact_mut(c).zip(quad.chunks_exact(c)) {
            for ((o, q), k) in row.iter_mut().zip(qrow).zip(&sc.consts) {
                *o += k - q;
            }
        }
        out
    }

    /// Converts joint log-likelihoods into posteriors in place; returns Σ log p(x).
    fn normalize_rows(ll: &mut [f64], c: usize) -> f64 {
        let mut total = 0.0;
        for row in ll.chunks_exact_mut(c) {
            let lse = log_sum_exp(row);
            total += lse;
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        total
    }

    /// Posterior responsibilities, frames × components.
    pub fn posteriors(&self, feats: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_dims(feats)?;
        let x = feats.data();
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let mut ll = self.joint_loglik(&self.scorer(), x, &x2, feats.frames());
        Self::normalize_rows(&mut ll, self.components());
        Ok(ll)
    }

    /// Σ_t log p(x_t).
    pub fn log_likelihood(&self, feats: &FeatureMatrix) -> Result<f64> {
        self.check_dims(feats)?;
        let x = feats.data();
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let mut ll = self.joint_loglik(&self.scorer(), x, &x2, feats.frames());
        Ok(Self::normalize_rows(&mut ll, self.components()))
    }

    fn check_dims(&self, feats: &FeatureMatrix) -> Result<()> {
        if feats.frames() > 0 && feats.dims() != self.dims {
            return Err(Error::shape(
                "ubm",
                format!("features have {} dims, model {}", feats.dims(), self.dims),
            ));
        }
        Ok(())
    }

    fn e_step(&self, data: &FrameData) -> EmAccum {
        let sc = self.scorer();
        let (c, f) = (self.components(), self.dims);
        let parts: Vec<EmAccum> = data
            .chunks()
            .into_par_iter()
            .map(|(s, e)| {
                let n = e - s;
                let x = &data.x[s * f..e * f];
                let x2 = &data.x2[s * f..e * f];
                let mut post = self.joint_loglik(&sc, x, x2, n);
                let mut acc = EmAccum::zeros(c, f);
                acc.loglik = Self::normalize_rows(&mut post, c);
                for row in post.chunks_exact(c) {
                    add_into(&mut acc.occ, row);
                }
                gemm(c, n, f, &post, true, x, false, 0.0, &mut acc.first);
                gemm(c, n, f, &post, true, x2, false, 0.0, &mut acc.second);
                acc
            })
            .collect();
        let mut total = EmAccum::zeros(c, f);
        for p in &parts {
            total.add(p);
        }
        total
    }

    fn m_step(&mut self, acc: &EmAccum, floor: &[f64]) -> Vec<usize> {
        let f = self.dims;
        let total: f64 = acc.occ.iter().sum();
        let mut starved = Vec::new();
        for k in 0..self.components() {
            let n = acc.occ[k];
            if n < 1.0 {
                starved.push(k);
                continue;
            }
            self.weights[k] = n / total;
            for d in 0..f {
                let m = acc.first[k * f + d] / n;
                let v = acc.second[k * f + d] / n - m * m;
                self.means[k * f + d] = m;
                self.variances[k * f + d] = v.max(floor[d]);
            }
        }
        self.renormalize_weights();
        starved
    }

    fn renormalize_weights(&mut self) {
        let s: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= s);
    }

    fn heaviest(&self) -> usize {
        (0..self.components())
            .max_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b]).then(b.cmp(&a)))
            .unwrap()
    }

    /// Splits component `k` into two, appending the new one (or overwriting `into`).
    fn split(&mut self, k: usize, into: Option<usize>, direction: &[f64]) {
        let f = self.dims;
        let w = self.weights[k] / 2.0;
        let mean: Vec<f64> = self.mean(k).to_vec();
        let var: Vec<f64> = self.variance(k).to_vec();
        let plus: Vec<f64> = (0..f).map(|d| mean[d] + direction[d] * 0.2 * var[d].sqrt()).collect();
        let minus: Vec<f64> = (0..f).map(|d| mean[d] - direction[d] * 0.2 * var[d].sqrt()).collect();
        self.weights[k] = w;
        self.means[k * f..(k + 1) * f].copy_from_slice(&plus);
        match into {
            Some(j) => {
                self.weights[j] = w;
                self.means[j * f..(j + 1) * f].copy_from_slice(&minus);
                self.variances[j * f..(j + 1) * f].copy_from_slice(&var);
            }
            None => {
                self.weights.push(w);
                self.means.extend_from_slice(&minus);
                self.variances.extend_from_slice(&var);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(UBM_MAGIC, MODEL_VERSION);
        w.u32(self.components() as u32);
        w.u32(self.dims as u32);
        w.f64s(&self.weights);
        w.f64s(&self.means);
        w.f64s(&self.variances);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::open(path, &bytes, UBM_MAGIC, MODEL_VERSION)?;
        let c = r.u32()? as usize;
        let f = r.u32()? as usize;
        let weights = r.f64s(c)?;
        let means = r.f64s(c * f)?;
        let variances = r.f64s(c * f)?;
        r.finish()?;
        GmmUbm::new(f, weights, means, variances)
    }
}

/// Outcome of UBM training: the model and the data log-likelihood before
/// each final-stage EM pass plus one after the last.
#[derive(Debug, Clone)]
pub struct UbmTraining {
    pub ubm: GmmUbm,
    pub loglik_history: Vec<f64>,
}

fn random_signs(f: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..f).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Binary-splitting initialization from the global Gaussian followed by EM.
pub fn train_ubm(features: &[FeatureMatrix], cfg: &UbmConfig, seed: u64) -> Result<UbmTraining> {
    if cfg.components == 0 || cfg.em_iters == 0 {
        return Err(Error::Config("UBM needs components >= 1 and em_iters >= 1".into()));
    }
    let data = FrameData::from_features(features)?;
    let f = data.dims;
    let n = data.frames as f64;
    let mut mean = vec![0.0; f];
    for row in data.x.chunks_exact(f) {
        add_into(&mut mean, row);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; f];
    for row in data.x.chunks_exact(f) {
        for d in 0..f {
            var[d] += (row[d] - mean[d]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let floor: Vec<f64> = var.iter().map(|v| (v * cfg.var_floor_ratio).max(1e-12)).collect();
    let global_var: Vec<f64> = var.iter().zip(&floor).map(|(v, fl)| v.max(*fl)).collect();
    if data.frames < cfg.components {
        return Err(Error::invalid(format!(
            "{} frames cannot support {} components",
            data.frames, cfg.components
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ubm = GmmUbm::new(f, vec![1.0], mean, global_var)?;
    while ubm.components() < cfg.components {
        let want = (cfg.components - ubm.components()).min(ubm.components());
        let mut order: Vec<usize> = (0..ubm.components()).collect();
        order.sort_by(|&a, &b| ubm.weights[b].total_cmp(&ubm.weights[a]).then(a.cmp(&b)));
        for &k in &order[..want] {
            let dir = random_signs(f, &mut rng);
            ubm.split(k, None, &dir);
        }
        for _ in 0..cfg.split_em_iters {
            em_pass(&mut ubm, &data, &floor, &mut rng);
        }
    }
    let mut history = Vec::with_capacity(cfg.em_iters + 1);
    for _ in 0..cfg.em_iters {
        history.push(em_pass(&mut ubm, &data, &floor, &mut rng));
    }
    history.push(ubm.e_step(&data).loglik);
    Ok(UbmTraining {
        ubm,
        loglik_history: history,
    })
}

/// One EM pass; returns the log-likelihood under the parameters it started from.
fn em_pass(ubm: &mut GmmUbm, data: &FrameData, floor: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let acc = ubm.e_step(data);
    let starved = ubm.m_step(&acc, floor);
    for k in starved {
        let donor = ubm.heaviest();
        log::warn!("event=ubm_starved component={k} resplit_from={donor}");
        let dir = random_signs(ubm.dims, rng);
        ubm.split(donor, Some(k), &dir);
    }
    acc.loglik
}

/// Zero-order occupancies and mean-centered first-order sums.
#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    pub dims: usize,
    pub occupancy: Vec<f64>,
    pub first_order: Vec<f64>,
}

impl BaumWelchStats {
    pub fn components(&self) -> usize {
        self.occupancy.len()
    }

    pub fn frames(&self) -> f64 {
        self.occupancy.iter().sum()
    }

    pub fn scaled(&self, k: f64) -> BaumWelchStats {
        BaumWelchStats {
            dims: self.dims,
            occupancy: self.occupancy.iter().map(|v| v * k).collect(),
            first_order: self.first_order.iter().map(|v| v * k).collect(),
        }
    }

    pub fn first(&self, c: usize) -> &[f64] {
        &self.first_order[c * self.dims..(c + 1) * self.dims]
    }
}

pub fn accumulate_stats(ubm: &GmmUbm, feats: &FeatureMatrix) -> Result<BaumWelchStats> {
    let (c, f) = (ubm.components(), ubm.dims());
    let mut occupancy = vec![0.0; c];
    let mut first_order = vec![0.0; c * f];
    if feats.frames() > 0 {
        let post = ubm.posteriors(feats)?;
        for row in post.chunks_exact(c) {
            add_into(&mut occupancy, row);
        }
        gemm(c, feats.frames(), f, &post, true, feats.data(), false, 0.0, &mut first_order);
        for k in 0..c {
            for d in 0..f {
                first_order[k * f + d] -= occupancy[k] * ubm.mean(k)[d];
            }
        }
    }
    Ok(BaumWelchStats {
        dims: f,
        occupancy,
        first_order,
    })
}

/// Total-variability matrix, `(C·F) × R`, row-major, component blocks stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalVariability {
    components: usize,
    dims: usize,
    factors: usize,
    matrix: Vec<f64>,
}

/// Speaker i-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vec: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn new(vec: Vec<f64>) -> Result<Self> {
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite i-vector".into()));
        }
        Ok(SpeakerEmbedding { vec })
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }
}

/// Posterior of the latent factor for one utterance.
struct Posterior {
    mean: DVector<f64>,
    precision_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    linear: DVector<f64>,
}

impl TotalVariability {
    pub fn new(components: usize, dims: usize, factors: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != components * dims * factors || factors == 0 {
            return Err(Error::shape("TotalVariability::new", format!("{} values", matrix.len())));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite total-variability entry".into()));
        }
        Ok(TotalVariability {
            components,
            dims,
            factors,
            matrix,
        })
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Column `r` as a supervector.
    pub fn column(&self, r: usize) -> Vec<f64> {
        self.matrix.iter().skip(r).step_by(self.factors).copied().collect()
    }

    fn check(&self, ubm: &GmmUbm, stats: &BaumWelchStats) -> Result<()> {
        if ubm.components() != self.components
            || ubm.dims() != self.dims
            || stats.components() != self.components
            || stats.dims != self.dims
        {
            return Err(Error::shape(
                "ivector",
                format!(
                    "UBM {}x{}, T {}x{}, stats {}x{}",
                    ubm.components(),
                    ubm.dims(),
                    self.components,
                    self.dims,
                    stats.components(),
                    stats.dims
                ),
            ));
        }
        Ok(())
    }

    /// `L = I + Tᵀ Σ⁻¹ N T`, `b = Tᵀ Σ⁻¹ f`, and `w = L⁻¹ b`.
    fn posterior(&self, ubm: &GmmUbm, stats: &BaumWelchStats) -> Result<Posterior> {
        let (cf, r) = (self.components * self.dims, self.factors);
        let mut scaled = vec![0.0; cf * r];
        let mut weighted_f = vec![0.0; cf];
        for row in 0..cf {
            let c = row / self.dims;
            let inv = 1.0 / ubm.variances()[row];
            let s = (stats.occupancy[c] * inv).sqrt();
            for k in 0..r {
                scaled[row * r + k] = self.matrix[row * r + k] * s;
            }
            weighted_f[row] = stats.first_order[row] * inv;
        }
        let mut precision = vec![0.0; r * r];
        gemm(r, cf, r, &scaled, true, &scaled, false, 0.0, &mut precision);
        for k in 0..r {
            precision[k * r + k] += 1.0;
        }
        let mut linear = vec![0.0; r];
        gemm(r, cf, 1, &self.matrix, true, &weighted_f, false, 0.0, &mut linear);
        let l = DMatrix::from_row_slice(r, r, &precision);
        let chol = l
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("i-vector precision is not positive definite".into()))?;
        let b = DVector::from_vec(linear);
        let mean = chol.solve(&b);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite i-vector solve".into()));
        }
        Ok(Posterior {
            mean,
            precision_chol: chol,
            linear: b,
        })
    }

    /// Posterior mean of the latent factor (no length normalization).
    pub fn extract(&self, ubm: &GmmUbm, stats: &BaumWelchStats) -> Result<SpeakerEmbedding> {
        self.check(ubm, stats)?;
        let post = self.posterior(ubm, stats)?;
        SpeakerEmbedding::new(post.mean.iter().copied().collect())
    }

    /// The `T`-dependent part of the utterance log-likelihood, `½ bᵀL⁻¹b − ½ log|L|`.
    fn objective_term(post: &Posterior) -> f64 {
        let logdet: f64 = post.precision_chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        0.5 * post.linear.dot(&post.mean) - 0.5 * logdet
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(TV_MAGIC, MODEL_VERSION);
        w.u32(self.components as u32);
        w.u32(self.dims as u32);
        w.u32(self.factors as u32);
        w.f64s(&self.matrix);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::open(path, &bytes, TV_MAGIC, MODEL_VERSION)?;
        let c = r.u32()? as usize;
        let f = r.u32()? as usize;
        let k = r.u32()? as usize;
        let m = r.f64s(c * f * k)?;
        r.finish()?;
        TotalVariability::new(c, f, k, m)
    }
}

pub fn extract_ivector(
    ubm: &GmmUbm,
    tv: &TotalVariability,
    stats: &BaumWelchStats,
) -> Result<SpeakerEmbedding> {
    tv.extract(ubm, stats)
}

/// Outcome of total-variability training with the EM objective before each
/// pass plus one after the last.
#[derive(Debug, Clone)]
pub struct TvTraining {
    pub tv: TotalVariability,
    pub objective_history: Vec<f64>,
}

struct TvAccum {
    objective: f64,
    /// Per component `Σ_u n_uc (L_u⁻¹ + w_u w_uᵀ)`, each R×R.
    second: Vec<f64>,
    /// `Σ_u f_u w_uᵀ`, (C·F) × R.
    cross: Vec<f64>,
}

fn tv_e_step(ubm: &GmmUbm, tv: &TotalVariability, stats: &[BaumWelchStats]) -> Result<TvAccum> {
    let (c, r, cf) = (tv.components, tv.factors, tv.components * tv.dims);
    let per_utt: Vec<Result<(f64, Vec<f64>, Vec<f64>, &BaumWelchStats)>> = stats
        .par_iter()
        .map(|s| {
            let post = tv.posterior(ubm, s)?;
            let cov = post.precision_chol.inverse();
            let w = &post.mean;
            let mut ewwt = vec![0.0; r * r];
            for i in 0..r {
                for j in 0..r {
                    ewwt[i * r + j] = cov[(i, j)] + w[i] * w[j];
                }
            }
            Ok((TotalVariability::objective_term(&post), ewwt, w.iter().copied().collect(), s))
        })
        .collect();
    let mut acc = TvAccum {
        objective: 0.0,
        second: vec![0.0; c * r * r],
        cross: vec![0.0; cf * r],
    };
    for item in per_utt {
        let (obj, ewwt, w, s) = item?;
        acc.objective += obj;
        for k in 0..c {
            let n = s.occupancy[k];
            if n == 0.0 {
                continue;
            }
            let block = &mut acc.second[k * r * r..(k + 1) * r * r];
            block.iter_mut().zip(&ewwt).for_each(|(a, b)| *a += n * b);
        }
        gemm(cf, 1, r, &s.first_order, false, &w, false, 1.0, &mut acc.cross);
    }
    Ok(acc)
}

fn tv_m_step(tv: &mut TotalVariability, acc: &TvAccum) -> Result<()> {
    let (f, r) = (tv.dims, tv.factors);
    for k in 0..tv.components {
        let mut a = DMatrix::from_row_slice(r, r, &acc.second[k * r * r..(k + 1) * r * r]);
        let chol = match a.clone().cholesky() {
            Some(ch) => ch,
            None => {
                log::warn!("event=tv_mstep_regularized component={k}");
                for i in 0..r {
                    a[(i, i)] += 1e-6;
                }
                a.cholesky().ok_or_else(|| {
                    Error::Numerical(format!("singular M-step system for component {k}"))
                })?
            }
        };
        // rows of T_c solve A_c t = cross_row
        let rhs = DMatrix::from_row_slice(f, r, &acc.cross[k * f * r..(k + 1) * f * r]).transpose();
        let sol = chol.solve(&rhs);
        for d in 0..f {
            for j in 0..r {
                tv.matrix[(k * f + d) * r + j] = sol[(j, d)];
            }
        }
    }
    if tv.matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite total-variability update".into()));
    }
    Ok(())
}

/// EM training of the total-variability matrix from per-utterance statistics.
pub fn train_tv(
    ubm: &GmmUbm,
    stats: &[BaumWelchStats],
    cfg: &TvConfig,
    seed: u64,
) -> Result<TvTraining> {
    if cfg.factors == 0 || cfg.em_iters == 0 {
        return Err(Error::Config("TV needs factors >= 1 and em_iters >= 1".into()));
    }
    if stats.is_empty() {
        return Err(Error::invalid("no utterance statistics for TV training"));
    }
    let (c, f, r) = (ubm.components(), ubm.dims(), cfg.factors);
    if stats.len() < r {
        log::warn!("event=tv_few_utterances utterances={} factors={r}", stats.len());
    }
    let mean_var = ubm.variances().iter().sum::<f64>() / ubm.variances().len() as f64;
    let scale = 0.001 * mean_var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrix = (0..c * f * r)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut tv = TotalVariability::new(c, f, r, matrix)?;
    for s in stats {
        tv.check(ubm, s)?;
    }
    let mut history = Vec::with_capacity(cfg.em_iters + 1);
    for _ in 0..cfg.em_iters {
        let acc = tv_e_step(ubm, &tv, stats)?;
        history.push(acc.objective);
        tv_m_step(&mut tv, &acc)?;
    }
    history.push(tv_e_step(ubm, &tv, stats)?.objective);
    Ok(TvTraining {
        tv,
        objective_history: history,
    })
}

/// One line of the i-vector export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvectorRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub vec: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn two_clusters(n: usize, seed: u64) -> (FeatureMatrix, [Vec<f64>; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..n {
            if i % 2 == 0 {
                a.push(-5.0 + gaussian(&mut rng));
            } else {
                b.push(5.0 + 0.5 * gaussian(&mut rng));
            }
        }
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        (FeatureMatrix::new(all.len(), 1, all).unwrap(), [a, b])
    }

    /// Plain scalar EM on a 1-D two-component mixture.
    fn scalar_em(x: &[f64], mut w: [f64; 2], mut m: [f64; 2], mut v: [f64; 2], iters: usize, floor: f64) -> [f64; 2] {
        for _ in 0..iters {
            let mut n = [0.0; 2];
            let mut s1 = [0.0; 2];
            let mut s2 = [0.0; 2];
            for &xi in x {
                let p: Vec<f64> = (0..2)
                    .map(|k| w[k] * (-(xi - m[k]).powi(2) / (2.0 * v[k])).exp() / (2.0 * std::f64::consts::PI * v[k]).sqrt())
                    .collect();
                let z = p[0] + p[1];
                for k in 0..2 {
                    let g = p[k] / z;
                    n[k] += g;
                    s1[k] += g * xi;
                    s2[k] += g * xi * xi;
                }
            }
            for k in 0..2 {
                w[k] = n[k] / x.len() as f64;
                m[k] = s1[k] / n[k];
                v[k] = (s2[k] / n[k] - m[k] * m[k]).max(floor);
            }
        }
        m
    }

    #[test]
    fn two_cluster_ubm_matches_oracle() {
        let (feats, [a, b]) = two_clusters(2000, 1);
        let cfg = UbmConfig {
            components: 2,
            em_iters: 60,
            split_em_iters: 2,
            var_floor_ratio: 0.01,
        };
        let out = train_ubm(std::slice::from_ref(&feats), &cfg, 3).unwrap();
        let mut means = [out.ubm.mean(0)[0], out.ubm.mean(1)[0]];
        means.sort_by(f64::total_cmp);

        let x = feats.data();
        let n = x.len() as f64;
        let gm = x.iter().sum::<f64>() / n;
        let gv = x.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / n;
        let off = 0.2 * gv.sqrt();
        let mut oracle = scalar_em(x, [0.5, 0.5], [gm + off, gm - off], [gv, gv], 62, 0.01 * gv);
        oracle.sort_by(f64::total_cmp);
        for k in 0..2 {
            assert!((means[k] - oracle[k]).abs() < 1e-6, "{means:?} vs {oracle:?}");
        }

        for (mean, cluster, sd) in [(means[0], &a, 1.0), (means[1], &b, 0.5)] {
            let cm = cluster.iter().sum::<f64>() / cluster.len() as f64;
            let se = sd / (cluster.len() as f64).sqrt();
            assert!((mean - cm).abs() < 3.0 * se, "{mean} vs cluster mean {cm}");
        }
    }

    #[test]
    fn single_component_is_global_gaussian() {
        let (feats, _) = two_clusters(500, 2);
        let cfg = UbmConfig {
            components: 1,
            em_iters: 1,
            ..UbmConfig::default()
        };
        let out = train_ubm(std::slice::from_ref(&feats), &cfg, 0).unwrap();
        let x = feats.data();
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|e| (e - m).powi(2)).sum::<f64>() / n;
        assert!((out.ubm.mean(0)[0] - m).abs() < 1e-12);
        assert!((out.ubm.variance(0)[0] - v).abs() < 1e-10);
        assert_eq!(out.ubm.weights(), &[1.0]);
    }

    fn random_feats(frames: usize, dims: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * dims)
            .map(|i| gaussian(&mut rng) + if (i / dims) % 3 == 0 { 2.0 } else { -1.0 })
            .collect();
        FeatureMatrix::new(frames, dims, data).unwrap()
    }

    #[test]
    fn ubm_em_is_monotone_and_valid() {
        let feats: Vec<_> = (0..4).map(|s| random_feats(300, 3, s)).collect();
        let cfg = UbmConfig {
            components: 6,
            em_iters: 8,
            split_em_iters: 2,
            var_floor_ratio: 0.01,
        };
        let out = train_ubm(&feats, &cfg, 9).unwrap();
        assert_eq!(out.ubm.components(), 6);
        assert!((out.ubm.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for w in out.loglik_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{:?}", out.loglik_history);
        }
        let again = train_ubm(&feats, &cfg, 9).unwrap();
        assert_eq!(out.ubm, again.ubm);
        assert!(train_ubm(&[], &cfg, 0).is_err());
    }

    #[test]
    fn stats_sum_center_and_scale() {
        let feats = random_feats(200, 3, 4);
        let cfg = UbmConfig {
            components: 4,
            em_iters: 3,
            ..UbmConfig::default()
        };
        let ubm = train_ubm(std::slice::from_ref(&feats), &cfg, 1).unwrap().ubm;
        let s = accumulate_stats(&ubm, &feats).unwrap();
        assert!((s.frames() - 200.0).abs() < 1e-9);
        assert!(s.occupancy.iter().all(|&n| n >= 0.0));

        let doubled = FeatureMatrix::vstack(&[&feats, &feats]).unwrap();
        let s2 = accumulate_stats(&ubm, &doubled).unwrap();
        for (a, b) in s2.occupancy.iter().zip(&s.occupancy) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
        for (a, b) in s2.first_order.iter().zip(&s.first_order) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }

        let dominant = GmmUbm::new(2, vec![0.999, 0.001], vec![1.0, 2.0, -30.0, 40.0], vec![1.0; 4]).unwrap();
        let at_mean = FeatureMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let s = accumulate_stats(&dominant, &at_mean).unwrap();
        assert!((s.occupancy[0] - 1.0).abs() < 1e-12);
        assert!(s.first(0).iter().all(|v| v.abs() < 1e-12));
    }

    fn toy_ubm() -> GmmUbm {
        GmmUbm::new(1, vec![0.4, 0.6], vec![0.0, 1.0], vec![2.0, 0.5]).unwrap()
    }

    #[test]
    fn ivector_scalar_closed_form() {
        let ubm = toy_ubm();
        let t = [0.7, -1.3];
        let tv = TotalVariability::new(2, 1, 1, t.to_vec()).unwrap();
        for (n, f) in [([3.0, 5.0], [1.2, -0.4]), ([0.5, 0.0], [0.3, 0.0]), ([10.0, 2.0], [-4.0, 7.5])] {
            let stats = BaumWelchStats {
                dims: 1,
                occupancy: n.to_vec(),
                first_order: f.to_vec(),
            };
            let w = extract_ivector(&ubm, &tv, &stats).unwrap().vec[0];
            let var = [2.0, 0.5];
            let precision = 1.0 + (0..2).map(|c| t[c] * t[c] * n[c] / var[c]).sum::<f64>();
            let linear: f64 = (0..2).map(|c| t[c] * f[c] / var[c]).sum();
            assert!((w - linear / precision).abs() < 1e-8);
        }
    }

    #[test]
    fn ivector_degenerate_and_linear_cases() {
        let ubm = toy_ubm();
        let zeros = TotalVariability::new(2, 1, 3, vec![0.0; 6]).unwrap();
        let stats = BaumWelchStats {
            dims: 1,
            occupancy: vec![4.0, 1.0],
            first_order: vec![2.0, -1.0],
        };
        assert!(extract_ivector(&ubm, &zeros, &stats).unwrap().vec.iter().all(|&v| v == 0.0));

        let tv = TotalVariability::new(2, 1, 2, vec![0.3, -0.2, 1.1, 0.4]).unwrap();
        let empty = BaumWelchStats {
            dims: 1,
            occupancy: vec![0.0, 0.0],
            first_order: vec![0.0, 0.0],
        };
        assert!(extract_ivector(&ubm, &tv, &empty).unwrap().vec.iter().all(|&v| v == 0.0));

        let base = extract_ivector(&ubm, &tv, &stats).unwrap();
        let scaled_f = BaumWelchStats {
            first_order: stats.first_order.iter().map(|v| v * 3.5).collect(),
            ..stats.clone()
        };
        let w = extract_ivector(&ubm, &tv, &scaled_f).unwrap();
        for (a, b) in w.vec.iter().zip(&base.vec) {
            assert!((a - 3.5 * b).abs() < 1e-12);
        }

        let bad = BaumWelchStats {
            dims: 2,
            occupancy: vec![1.0, 1.0],
            first_order: vec![0.0; 4],
        };
        assert!(extract_ivector(&ubm, &tv, &bad).is_err());
    }

    #[test]
    fn ivector_solve_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, f, r) = (4, 3, 5);
        let ubm = GmmUbm::new(f, vec![0.25; 4], (0..c * f).map(|_| gaussian(&mut rng)).collect(), (0..c * f).map(|_| 0.5 + rng.random::<f64>()).collect()).unwrap();
        let tv = TotalVariability::new(c, f, r, (0..c * f * r).map(|_| gaussian(&mut rng)).collect()).unwrap();
        let stats = BaumWelchStats {
            dims: f,
            occupancy: (0..c).map(|_| 10.0 * rng.random::<f64>()).collect(),
            first_order: (0..c * f).map(|_| gaussian(&mut rng)).collect(),
        };
        let post = tv.posterior(&ubm, &stats).unwrap();
        let l = post.precision_chol.l() * post.precision_chol.l().transpose();
        let resid = (&l * &post.mean - &post.linear).norm() / post.linear.norm();
        assert!(resid <= 1e-8, "{resid}");
    }

    /// Utterance stats drawn from a known one-factor model with hard alignments.
    fn one_factor_stats(ubm: &GmmUbm, truth: &[f64], utts: usize, seed: u64) -> Vec<BaumWelchStats> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f) = (ubm.components(), ubm.dims());
        (0..utts)
            .map(|_| {
                let w = gaussian(&mut rng);
                let mut occupancy = vec![0.0; c];
                let mut first_order = vec![0.0; c * f];
                for k in 0..c {
                    let frames = 20 + rng.random_range(0..30);
                    occupancy[k] = frames as f64;
                    for _ in 0..frames {
                        for d in 0..f {
                            let sd = ubm.variance(k)[d].sqrt();
                            first_order[k * f + d] += truth[k * f + d] * w + sd * gaussian(&mut rng);
                        }
                    }
                }
                BaumWelchStats {
                    dims: f,
                    occupancy,
                    first_order,
                }
            })
            .collect()
    }

    #[test]
    fn tv_recovers_known_direction_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, f) = (4, 3);
        let ubm = GmmUbm::new(f, vec![0.25; 4], (0..c * f).map(|_| gaussian(&mut rng)).collect(), vec![1.0; c * f]).unwrap();
        let truth: Vec<f64> = (0..c * f).map(|_| gaussian(&mut rng)).collect();
        let stats = one_factor_stats(&ubm, &truth, 60, 9);
        let cfg = TvConfig {
            factors: 1,
            em_iters: 20,
        };
        let out = train_tv(&ubm, &stats, &cfg, 10).unwrap();
        let learned = out.tv.column(0);
        let dot: f64 = learned.iter().zip(&truth).map(|(a, b)| a * b).sum();
        let na = learned.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() >= 0.9, "cosine {}", dot / (na * nb));
        for w in out.objective_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", out.objective_history);
        }
        let again = train_tv(&ubm, &stats, &cfg, 10).unwrap();
        assert_eq!(out.tv, again.tv);
    }

    #[test]
    fn tv_scalar_update_matches_hand_formulas() {
        let ubm = GmmUbm::new(1, vec![1.0], vec![0.0], vec![2.0]).unwrap();
        let stats = vec![
            BaumWelchStats { dims: 1, occupancy: vec![3.0], first_order: vec![1.5] },
            BaumWelchStats { dims: 1, occupancy: vec![5.0], first_order: vec![-2.0] },
        ];
        let cfg = TvConfig { factors: 1, em_iters: 1 };
        let out = train_tv(&ubm, &stats, &cfg, 4).unwrap();

        // replay the init draw, then one E/M step by hand
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t0 = 0.001 * 2f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let mut a = 0.0;
        let mut cross = 0.0;
        for s in &stats {
            let (n, f) = (s.occupancy[0], s.first_order[0]);
            let l = 1.0 + t0 * t0 * n / 2.0;
            let w = t0 * f / 2.0 / l;
            a += n * (1.0 / l + w * w);
            cross += f * w;
        }
        assert!((out.tv.matrix()[0] - cross / a).abs() < 1e-12);
    }

    #[test]
    fn model_files_round_trip_and_reject_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ubm = toy_ubm();
        let p = dir.path().join("ubm.bin");
        ubm.save(&p).unwrap();
        assert_eq!(GmmUbm::load(&p).unwrap(), ubm);
        let tv = TotalVariability::new(2, 1, 2, vec![0.3, -0.2, 1.1, 0.4]).unwrap();
        let q = dir.path().join("tv.bin");
        tv.save(&q).unwrap();
        assert_eq!(TotalVariability::load(&q).unwrap(), tv);
        let bytes = std::fs::read(&q).unwrap();
        std::fs::write(&q, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(TotalVariability::load(&q), Err(Error::Format { .. })));
        assert!(GmmUbm::load(&q).is_err());
    }
}
