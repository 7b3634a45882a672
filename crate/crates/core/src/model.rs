//! The speaker-conditioned extractor: encoder, TCN mask estimator, decoder.
//!
//! Internal arrays are `channels × frames`; the encoded representation `A`
//! and the mask `W` are therefore stored as `M × K`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioSignal;
use crate::binfmt::{read_file, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormKind, Tensor, Var};
use crate::ivector::SpeakerEmbedding;

const CKPT_MAGIC: &[u8; 8] = b"TSE-CKPT";
const CKPT_VERSION: u32 = 1;

pub const PRELU_INIT: f64 = 0.25;

fn default_tcn_norm() -> NormKind {
    NormKind::Global
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TseNetConfig {
    /// Encoder filters.
    #[serde(rename = "M")]
    pub m: usize,
    /// Filter length in samples.
    #[serde(rename = "L")]
    pub l: usize,
    /// TCN channels.
    #[serde(rename = "N")]
    pub n: usize,
    /// Depthwise channels.
    #[serde(rename = "O")]
    pub o: usize,
    /// Depthwise kernel width.
    #[serde(rename = "P")]
    pub p: usize,
    /// Blocks per batch.
    pub b: usize,
    /// Batches.
    pub r: usize,
    #[serde(rename = "D1")]
    pub d1: usize,
    #[serde(rename = "D2")]
    pub d2: usize,
    /// Normalization inside TCN blocks.
    #[serde(default = "default_tcn_norm")]
    pub tcn_norm: NormKind,
}

impl TseNetConfig {
    pub fn paper() -> Self {
        TseNetConfig {
            m: 256,
            l: 20,
            n: 256,
            o: 512,
            p: 3,
            b: 8,
            r: 4,
            d1: 400,
            d2: 100,
            tcn_norm: NormKind::Global,
        }
    }

    pub fn tiny() -> Self {
        TseNetConfig {
            m: 16,
            l: 4,
            n: 16,
            o: 32,
            p: 3,
            b: 2,
            r: 1,
            d1: 8,
            d2: 4,
            tcn_norm: NormKind::Global,
        }
    }

    pub fn tiny_plus() -> Self {
        TseNetConfig {
            m: 64,
            l: 20,
            n: 64,
            o: 128,
            b: 4,
            r: 2,
            ..TseNetConfig::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            "tiny-plus" => Ok(Self::tiny_plus()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.m, self.l, self.n, self.o, self.p, self.b, self.r, self.d1, self.d2];
        if all.contains(&0) {
            return Err(Error::Config("all model sizes must be positive".into()));
        }
        if self.l % 2 != 0 {
            return Err(Error::Config(format!("L must be even, got {}", self.l)));
        }
        if self.p % 2 == 0 {
            return Err(Error::Config(format!("P must be odd, got {}", self.p)));
        }
        if self.b >= usize::BITS as usize {
            return Err(Error::Config(format!("b = {} gives an unrepresentable dilation", self.b)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.l / 2
    }

    /// Frames on either side of an output frame that can influence it through
    /// the dilated convolutions.
    pub fn receptive_radius(&self) -> usize {
        self.r * ((self.p - 1) / 2) * ((1usize << self.b) - 1)
    }

    /// Input length after tail padding so the encoder frames tile it exactly.
    pub fn padded_len(&self, t: usize) -> usize {
        if t <= self.l {
            return self.l;
        }
        let s = self.stride();
        t + (s - (t - self.l) % s) % s
    }

    /// `K = 2(T − L)/L + 1` for a padded length.
    pub fn frames(&self, t: usize) -> usize {
        (self.padded_len(t) - self.l) / self.stride() + 1
    }

    /// Parameter count from layer formulas.
    pub fn param_count(&self) -> usize {
        let c = self;
        let block = |in_w: usize| c.o * in_w + c.o * (8 + c.p) + c.n * c.o + c.n;
        let per_batch = (c.d2 * c.d1 + c.d2) + block(c.d2 + c.n) + (c.b - 1) * block(c.n);
        c.m * c.l + 2 * c.m + (c.n * c.m + c.n) + c.r * per_batch + (c.m * c.n + c.m) + c.m * c.l
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    in_w: usize,
    in_b: usize,
    slope1: usize,
    gain1: usize,
    bias1: usize,
    dw: usize,
    dw_b: usize,
    slope2: usize,
    gain2: usize,
    bias2: usize,
    out_w: usize,
    out_b: usize,
    dilation: usize,
    concat_fed: bool,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: usize,
    norm_gain: usize,
    norm_bias: usize,
    bottleneck_w: usize,
    bottleneck_b: usize,
    adapters: Vec<(usize, usize)>,
    blocks: Vec<Vec<BlockLayout>>,
    mask_w: usize,
    mask_b: usize,
    decoder: usize,
}

enum Init {
    Uniform { fan_in: usize },
    Const(f64),
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn layout(c: &TseNetConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize, init: Init| {
        specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
        });
        specs.len() - 1
    };
    let encoder = add("encoder.U".into(), c.m, c.l, Init::Uniform { fan_in: c.l });
    let norm_gain = add("encoder_norm.gain".into(), c.m, 1, Init::Const(1.0));
    let norm_bias = add("encoder_norm.bias".into(), c.m, 1, Init::Const(0.0));
    let bottleneck_w = add("bottleneck.weight".into(), c.n, c.m, Init::Uniform { fan_in: c.m });
    let bottleneck_b = add("bottleneck.bias".into(), c.n, 1, Init::Const(0.0));
    let mut adapters = Vec::with_capacity(c.r);
    let mut blocks = Vec::with_capacity(c.r);
    for j in 0..c.r {
        let w = add(format!("batch{j}.adapter.weight"), c.d2, c.d1, Init::Uniform { fan_in: c.d1 });
        let bb = add(format!("batch{j}.adapter.bias"), c.d2, 1, Init::Const(0.0));
        adapters.push((w, bb));
        let mut batch = Vec::with_capacity(c.b);
        for i in 0..c.b {
            let in_width = if i == 0 { c.d2 + c.n } else { c.n };
            let p = format!("batch{j}.block{i}");
            batch.push(BlockLayout {
                in_w: add(format!("{p}.in.weight"), c.o, in_width, Init::Uniform { fan_in: in_width }),
                in_b: add(format!("{p}.in.bias"), c.o, 1, Init::Const(0.0)),
                slope1: add(format!("{p}.prelu1"), c.o, 1, Init::Const(PRELU_INIT)),
                gain1: add(format!("{p}.norm1.gain"), c.o, 1, Init::Const(1.0)),
                bias1: add(format!("{p}.norm1.bias"), c.o, 1, Init::Const(0.0)),
                dw: add(format!("{p}.depthwise.weight"), c.o, c.p, Init::Uniform { fan_in: c.p }),
                dw_b: add(format!("{p}.depthwise.bias"), c.o, 1, Init::Const(0.0)),
                slope2: add(format!("{p}.prelu2"), c.o, 1, Init::Const(PRELU_INIT)),
                gain2: add(format!("{p}.norm2.gain"), c.o, 1, Init::Const(1.0)),
                bias2: add(format!("{p}.norm2.bias"), c.o, 1, Init::Const(0.0)),
                out_w: add(format!("{p}.out.weight"), c.n, c.o, Init::Uniform { fan_in: c.o }),
                out_b: add(format!("{p}.out.bias"), c.n, 1, Init::Const(0.0)),
                dilation: 1 << i,
                concat_fed: i == 0,
            });
        }
        blocks.push(batch);
    }
    let mask_w = add("mask.weight".into(), c.m, c.n, Init::Uniform { fan_in: c.n });
    let mask_b = add("mask.bias".into(), c.m, 1, Init::Const(0.0));
    let decoder = add("decoder.V".into(), c.m, c.l, Init::Uniform { fan_in: c.m });
    (
        Layout {
            encoder,
            norm_gain,
            norm_bias,
            bottleneck_w,
            bottleneck_b,
            adapters,
            blocks,
            mask_w,
            mask_b,
            decoder,
        },
        specs,
    )
}

#[derive(Debug, Clone)]
pub struct TseNetModel {
    config: TseNetConfig,
    seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub representation: Var,
    pub mask: Var,
    pub masked: Var,
    /// Decoded waveform trimmed to the unpadded input length.
    pub estimate: Var,
}

impl PartialEq for TseNetModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.seed == other.seed && self.names == other.names && self.params == other.params
    }
}

impl TseNetModel {
    pub fn build(config: TseNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            let t = match s.init {
                Init::Uniform { fan_in } => Tensor::uniform(s.rows, s.cols, (1.0 / fan_in as f64).sqrt(), &mut rng),
                Init::Const(v) => Tensor::filled(s.rows, s.cols, v),
            };
            names.push(s.name);
            params.push(t);
        }
        let model = TseNetModel {
            config,
            seed,
            names,
            params,
            layout,
        };
        log::debug!("event=model_built params={}", model.param_count());
        Ok(model)
    }

    pub fn config(&self) -> &TseNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Pushes every parameter onto `g`, trainable or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    fn check_ivector(&self, ivec: &[f64]) -> Result<()> {
        if ivec.len() != self.config.d1 {
            return Err(Error::shape(
                "extract_mask",
                format!("i-vector has {} dims, model expects D1 = {}", ivec.len(), self.config.d1),
            ));
        }
        Ok(())
    }

    /// `ReLU(conv1d(y, U))` on the padded waveform.
    pub fn encode_graph(&self, g: &mut Graph, p: &[Var], samples: &[f64]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot encode an empty signal"));
        }
        let c = &self.config;
        let padded_len = c.padded_len(samples.len());
        let mut padded = samples.to_vec();
        padded.resize(padded_len, 0.0);
        let y = g.input(Tensor::row(padded));
        let conv = g.conv1d(y, p[self.layout.encoder], c.l, c.stride())?;
        Ok(g.relu(conv))
    }

    pub fn mask_graph(&self, g: &mut Graph, p: &[Var], a: Var, ivec: &[f64]) -> Result<Var> {
        self.check_ivector(ivec)?;
        let c = &self.config;
        let lay = &self.layout;
        let (ch, k) = g.shape(a);
        if ch != c.m {
            return Err(Error::shape("extract_mask", format!("representation has {ch} channels, M = {}", c.m)));
        }
        let normed = g.channelwise_norm(a, p[lay.norm_gain], p[lay.norm_bias])?;
        let mut x = g.pointwise_conv(normed, p[lay.bottleneck_w], p[lay.bottleneck_b])?;
        let i1 = g.input(Tensor::vector(ivec.to_vec()));
        for (batch, &(aw, ab)) in lay.blocks.iter().zip(&lay.adapters) {
            let dense = g.dense(i1, p[aw], p[ab])?;
            let i2 = g.relu(dense);
            let tiled = g.repeat_vector(i2, k)?;
            let batch_input = x;
            let mut h = g.concat_channels(x, tiled)?;
            for blk in batch {
                let residual = if blk.concat_fed { batch_input } else { h };
                h = self.block_graph(g, p, blk, h, residual)?;
            }
            x = h;
        }
        let logits = g.pointwise_conv(x, p[lay.mask_w], p[lay.mask_b])?;
        Ok(g.sigmoid(logits))
    }

    fn block_graph(&self, g: &mut Graph, p: &[Var], blk: &BlockLayout, x: Var, residual: Var) -> Result<Var> {
        let kind = self.config.tcn_norm;
        let h = g.pointwise_conv(x, p[blk.in_w], p[blk.in_b])?;
        let h = g.prelu(h, p[blk.slope1])?;
        let h = g.norm(h, p[blk.gain1], p[blk.bias1], kind)?;
        let h = g.depthwise_conv1d(h, p[blk.dw], blk.dilation)?;
        let h = g.add_bias(h, p[blk.dw_b])?;
        let h = g.prelu(h, p[blk.slope2])?;
        let h = g.norm(h, p[blk.gain2], p[blk.bias2], kind)?;
        let h = g.pointwise_conv(h, p[blk.out_w], p[blk.out_b])?;
        g.add(h, residual)
    }

    /// Overlap-add decoding, trimmed to `len` samples when given.
    pub fn decode_graph(&self, g: &mut Graph, p: &[Var], s: Var, len: Option<usize>) -> Result<Var> {
        let (ch, _) = g.shape(s);
        if ch != self.config.m {
            return Err(Error::shape("decode", format!("{ch} channels, M = {}", self.config.m)));
        }
        let out = g.conv_transpose1d(s, p[self.layout.decoder], self.config.stride())?;
        match len {
            Some(n) => g.trim_cols(out, n),
            None => Ok(out),
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, p: &[Var], mixture: &[f64], ivec: &[f64]) -> Result<ForwardVars> {
        let representation = self.encode_graph(g, p, mixture)?;
        let mask = self.mask_graph(g, p, representation, ivec)?;
        let masked = g.mul(mask, representation)?;
        let estimate = self.decode_graph(g, p, masked, Some(mixture.len()))?;
        Ok(ForwardVars {
            representation,
            mask,
            masked,
            estimate,
        })
    }

    /// Encoded representation `A` (`M × K`).
    pub fn encode(&self, mixture: &AudioSignal) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let a = self.encode_graph(&mut g, &p, mixture.samples())?;
        Ok(g.value(a).clone())
    }

    /// Mask `W` (`M × K`) for a representation `A` and an i-vector.
    pub fn extract_mask(&self, a: &Tensor, ivec: &SpeakerEmbedding) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let av = g.input(a.clone());
        let w = self.mask_graph(&mut g, &p, av, &ivec.vec)?;
        Ok(g.value(w).clone())
    }

    /// Waveform from a masked representation; `len` trims the overlap-add output.
    pub fn decode(&self, s: &Tensor, len: Option<usize>) -> Result<AudioSignal> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let sv = g.input(s.clone());
        let out = self.decode_graph(&mut g, &p, sv, len)?;
        AudioSignal::from_samples(g.value(out).data().to_vec())
    }

    /// Extracted waveform (same length and rate as the mixture) and its mask.
    pub fn forward(&self, mixture: &AudioSignal, ivec: &SpeakerEmbedding) -> Result<(AudioSignal, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &p, mixture.samples(), &ivec.vec)?;
        let est = AudioSignal::new(g.value(f.estimate).data().to_vec(), mixture.sample_rate_hz())?;
        Ok((est, g.value(f.mask).clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(CKPT_MAGIC, CKPT_VERSION);
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        w.bytes(&cfg);
        w.u64(self.seed);
        w.u32(self.params.len() as u32);
        for (name, t) in self.names.iter().zip(&self.params) {
            w.bytes(name.as_bytes());
            w.u32(t.rows() as u32);
            w.u32(t.cols() as u32);
            w.f64s(t.data());
        }
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::open(path, &bytes, CKPT_MAGIC, CKPT_VERSION)?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let config: TseNetConfig =
            serde_json::from_slice(r.bytes()?).map_err(|e| bad(format!("config: {e}")))?;
        let seed = r.u64()?;
        let mut model = TseNetModel::build(config, seed)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(bad(format!("{count} tensors, config implies {}", model.params.len())));
        }
        for i in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| bad("non-utf8 name".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let expect = &model.params[i];
            if name != model.names[i] || (rows, cols) != expect.shape() {
                return Err(bad(format!("tensor {i} is {name} {rows}x{cols}, expected {} {:?}", model.names[i], expect.shape())));
            }
            model.params[i] = Tensor::new(rows, cols, r.f64s(rows * cols)?)?;
        }
        r.finish()?;
        if !model.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(model)
    }
}

/// `S = W ⊙ A`.
pub fn apply_mask(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    if a.shape() != w.shape() {
        return Err(Error::shape("apply_mask", format!("{:?} vs {:?}", a.shape(), w.shape())));
    }
    let data = a.data().iter().zip(w.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.rows(), a.cols(), data)
}
