//! The localization network: convolutional input projection, positional
//! embedding, a stack of temporal-aware attention encoder layers, a decoder over
//! learnable proposal queries, and classification/regression heads.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::matching::{Prediction, Segment};
use crate::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::taa::{self, FusionMode, FusionWeights, ScoreScale, ShiftMode, TaaConfig, TaaParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"APF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEmbedding {
    #[default]
    Sinusoidal,
    /// Trainable table; sequences longer than `max_len` are rejected.
    Learned { max_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub positional: PositionalEmbedding,
    /// Sinusoidal positions are stretched so that every sequence spans this
    /// many virtual steps; `None` uses raw step indices.
    #[serde(default)]
    pub position_span: Option<f64>,
    /// Add the sinusoidal table to the memory keys of every cross-attention.
    #[serde(default)]
    pub cross_positions: bool,
    /// Query `n` predicts its center as an offset (in logit space) from the
    /// fixed reference `(n + 0.5) / N_q`.
    #[serde(default)]
    pub anchored_queries: bool,
    /// Add `-(t_rel - c_n)^2 / (2 sigma_h^2)` to the cross-attention scores of
    /// query `n`, with `c_n` its anchor and `sigma_h = 0.05 * 4^h` per head.
    /// Requires `anchored_queries`.
    #[serde(default)]
    pub query_locality: bool,
    pub encoder_taa: TaaConfig,
    pub decoder_taa: TaaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale(16, 5)
    }
}

impl ModelConfig {
    /// `C_D = 64`, 4 heads, 2 + 2 layers, 10 queries, window 5, shifts 9 / 7.
    pub fn desk_scale(input_dim: usize, classes: usize) -> Self {
        let encoder_taa = TaaConfig::default();
        Self {
            input_dim,
            model_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            queries: 10,
            classes,
            mlp_ratio: 4,
            activation: Activation::Gelu,
            positional: PositionalEmbedding::Sinusoidal,
            position_span: Some(128.0),
            cross_positions: true,
            anchored_queries: true,
            query_locality: true,
            encoder_taa,
            decoder_taa: TaaConfig {
                shift_size: 7,
                ..encoder_taa
            },
        }
    }

    /// Tiny configuration used by gradient checks.
    pub fn tiny(input_dim: usize, classes: usize) -> Self {
        let encoder_taa = TaaConfig {
            model_dim: 8,
            heads: 2,
            window: 3,
            shift_size: 3,
            ..TaaConfig::default()
        };
        Self {
            input_dim,
            model_dim: 8,
            encoder_layers: 2,
            decoder_layers: 2,
            queries: 3,
            classes,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            positional: PositionalEmbedding::Sinusoidal,
            position_span: None,
            cross_positions: false,
            anchored_queries: false,
            query_locality: false,
            encoder_taa,
            decoder_taa: encoder_taa,
        }
    }

    pub fn heads(&self) -> usize {
        self.encoder_taa.heads
    }

    pub fn with_window(mut self, w: usize) -> Self {
        self.encoder_taa.window = w;
        self.decoder_taa.window = w;
        self
    }

    pub fn with_fusion(mut self, mode: FusionMode) -> Self {
        self.encoder_taa.fusion_mode = mode;
        self.decoder_taa.fusion_mode = mode;
        self
    }

    pub fn with_shift_mode(mut self, mode: ShiftMode) -> Self {
        self.encoder_taa.shift_mode = mode;
        self.decoder_taa.shift_mode = mode;
        self
    }

    pub fn with_score_scale(mut self, scale: ScoreScale) -> Self {
        self.encoder_taa.score_scale = scale;
        self.decoder_taa.score_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("queries", self.queries),
            ("classes", self.classes),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, taa) in [("encoder_taa", &self.encoder_taa), ("decoder_taa", &self.decoder_taa)] {
            taa.validate()?;
            if taa.model_dim != self.model_dim {
                return Err(Error::Config(format!(
                    "{name}.model_dim {} differs from model_dim {}",
                    taa.model_dim, self.model_dim
                )));
            }
        }
        if self.position_span.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("position_span must be positive".into()));
        }
        if self.query_locality && !self.anchored_queries {
            return Err(Error::Config("query_locality requires anchored_queries".into()));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even for the positional embedding".into()));
        }
        Ok(())
    }
}

/// Fixed sinusoidal table `[T, C_D]`: even channels sine, odd channels cosine.
/// With a `span`, position `i` is placed at `i * span / T`.
pub fn positional_embedding(t: usize, dim: usize, span: Option<f64>) -> Tensor {
    let scale = span.map_or(1.0, |s| s / t as f64);
    let mut data = vec![0.0; t * dim];
    for pos in 0..t {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * scale * freq;
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::raw(vec![t, dim], data)
}

/// Width of the locality prior of head `h`, in units of the sequence length.
pub fn locality_width(h: usize) -> f64 {
    0.05 * 4f64.powi(h as i32)
}

/// Additive cross-attention prior `[N_q, T]` for head `h`, centered on each query's anchor.
pub fn locality_bias(queries: usize, t: usize, h: usize) -> Tensor {
    let sigma = locality_width(h);
    let mut data = Vec::with_capacity(queries * t);
    for n in 0..queries {
        let c = (n as f64 + 0.5) / queries as f64;
        for j in 0..t {
            let d = (j as f64 + 0.5) / t as f64 - c;
            data.push(-d * d / (2.0 * sigma * sigma));
        }
    }
    Tensor::raw(vec![queries, t], data)
}

/// Logit-space offsets `[N_q, 2]` placing query `n` at center `(n + 0.5) / N_q`.
pub fn query_anchors(n: usize) -> Tensor {
    let mut data = vec![0.0; 2 * n];
    for q in 0..n {
        let c = (q as f64 + 0.5) / n as f64;
        data[2 * q] = (c / (1.0 - c)).ln();
    }
    Tensor::raw(vec![n, 2], data)
}

/// Kernel-3 same-padded convolution over time, as an im2col gather plus a
/// linear map `[3 C_in, C_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub linear: Linear,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, name, 3 * c_in, c_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (t, c) = (g.value(x).rows(), g.value(x).cols());
        let mut map = Vec::with_capacity(t * 3 * c);
        for i in 0..t as isize {
            for k in -1..=1isize {
                let src = i + k;
                for ch in 0..c {
                    map.push((src >= 0 && src < t as isize).then(|| (src as usize * c + ch) as u32));
                }
            }
        }
        let cols = g.gather(x, vec![t, 3 * c], map)?;
        self.linear.forward(g, store, cols)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub taa: TaaParams,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// Dense multi-head attention projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub norm_memory: LayerNorm,
    pub cross_attn: Attention,
    pub value_fusion: FusionWeights,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    conv1: Conv1d,
    conv2: Conv1d,
    positions: Option<ParamId>,
    encoder: Vec<EncoderLayer>,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    class_head: Linear,
    box_head: Mlp,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// `[N_q, classes]`
    pub logits: Var,
    /// `[N_q, 2]` normalized `(start, end)`.
    pub boundaries: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

/// Initial bias of the class head, `-ln((1 - p) / p)` for a prior of 0.01.
const CLASS_PRIOR_BIAS: f64 = -4.59511985013459;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, d) = (config.input_dim, config.model_dim);
        let hidden = config.mlp_ratio * d;

        let conv1 = Conv1d::new(&mut store, "input.conv1", c, d, &mut rng);
        let conv2 = Conv1d::new(&mut store, "input.conv2", d, d, &mut rng);
        let positions = match config.positional {
            PositionalEmbedding::Sinusoidal => None,
            PositionalEmbedding::Learned { max_len } => {
                Some(store.add("input.positions", positional_embedding(max_len, d, None).scale(0.1)))
            }
        };
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let name = format!("encoder.{l}");
                EncoderLayer {
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d),
                    taa: TaaParams::new(&mut store, &format!("{name}.taa"), &config.encoder_taa, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d),
                    mlp: Mlp::new(&mut store, &format!("{name}.mlp"), (d, hidden, d), config.activation, &mut rng),
                }
            })
            .collect();
        let queries = store.add(
            "decoder.queries",
            Tensor::uniform(&[config.queries, d], -1.0, 1.0, &mut rng),
        );
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                let name = format!("decoder.{l}");
                DecoderLayer {
                    norm_self: LayerNorm::new(&mut store, &format!("{name}.norm_self"), d),
                    self_attn: Attention::new(&mut store, &format!("{name}.self_attn"), d, &mut rng),
                    norm_cross: LayerNorm::new(&mut store, &format!("{name}.norm_cross"), d),
                    norm_memory: LayerNorm::new(&mut store, &format!("{name}.norm_memory"), d),
                    cross_attn: Attention::new(&mut store, &format!("{name}.cross_attn"), d, &mut rng),
                    value_fusion: FusionWeights::new(
                        &mut store,
                        &format!("{name}.cross_attn.fusion"),
                        config.decoder_taa.fusion_mode,
                    ),
                    norm_mlp: LayerNorm::new(&mut store, &format!("{name}.norm_mlp"), d),
                    mlp: Mlp::new(&mut store, &format!("{name}.mlp"), (d, hidden, d), config.activation, &mut rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "decoder.final_norm", d);
        let class_head = Linear::new(&mut store, "head.class", d, config.classes, &mut rng);
        store.get_mut(class_head.bias).data_mut().fill(CLASS_PRIOR_BIAS);
        let box_head = Mlp::new(&mut store, "head.box", (d, d, 2), Activation::Relu, &mut rng);

        Ok(Self {
            config,
            params: store,
            layout: Layout {
                conv1,
                conv2,
                positions,
                encoder,
                queries,
                decoder,
                final_norm,
                class_head,
                box_head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.layout.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.layout.decoder
    }

    pub fn class_head(&self) -> Linear {
        self.layout.class_head
    }

    pub fn box_head(&self) -> Mlp {
        self.layout.box_head
    }

    pub fn query_param(&self) -> ParamId {
        self.layout.queries
    }

    /// Projects `[T, C]` features to `[T, C_D]` and adds positions.
    pub fn embed(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let fv = g.value(features);
        if fv.rank() != 2 || fv.cols() != self.config.input_dim {
            return Err(Error::Config(format!(
                "features have shape {:?}, expected [T, {}]",
                fv.shape(),
                self.config.input_dim
            )));
        }
        let t = fv.rows();
        let h = self.layout.conv1.forward(g, &self.params, features)?;
        let h = self.config.activation.apply(g, h);
        let h = self.layout.conv2.forward(g, &self.params, h)?;
        let pos = match (self.layout.positions, self.config.positional) {
            (Some(id), PositionalEmbedding::Learned { max_len }) => {
                if t > max_len {
                    return Err(Error::Config(format!(
                        "sequence length {t} exceeds learned position table {max_len}"
                    )));
                }
                let table = g.param(&self.params, id);
                g.select_rows(table, &(0..t).collect::<Vec<_>>())?
            }
            _ => g.constant(positional_embedding(t, self.config.model_dim, self.config.position_span)),
        };
        g.add(h, pos)
    }

    pub fn encoder_layer(&self, g: &mut Graph, layer: &EncoderLayer, x: Var) -> Result<Var> {
        let p = &self.params;
        let n = layer.norm1.forward(g, p, x)?;
        let a = taa::taa_forward(g, p, n, &layer.taa, &self.config.encoder_taa)?;
        let h1 = g.add(a, x)?;
        let n = layer.norm2.forward(g, p, h1)?;
        let m = layer.mlp.forward(g, p, n)?;
        g.add(m, h1)
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.layout
            .encoder
            .iter()
            .try_fold(x, |h, layer| self.encoder_layer(g, layer, h))
    }

    /// Dense multi-head attention of `queries: [N, C]` over `keys`/`values: [T, C]`.
    fn dense_heads(&self, g: &mut Graph, q: Var, k: Var, v: Var, local: bool) -> Result<Var> {
        let heads = self.config.heads();
        let dh = self.config.model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let s = if local {
                let (n, t) = (g.value(s).rows(), g.value(s).cols());
                let bias = g.constant(locality_bias(n, t, h));
                g.add(s, bias)?
            } else {
                s
            };
            let p = g.softmax(s, None)?;
            outs.push(g.matmul(p, vh)?);
        }
        g.concat_cols(&outs)
    }

    /// Query self-attention, cross-attention over the memory with the shift
    /// branch fused into the value stream, then the MLP; each pre-normed and residual.
    pub fn decoder_layer(&self, g: &mut Graph, layer: &DecoderLayer, queries: Var, memory: Var) -> Result<Var> {
        let p = &self.params;
        let cfg = &self.config.decoder_taa;

        let n = layer.norm_self.forward(g, p, queries)?;
        let (q, k, v) = (
            layer.self_attn.query.forward(g, p, n)?,
            layer.self_attn.key.forward(g, p, n)?,
            layer.self_attn.value.forward(g, p, n)?,
        );
        let a = self.dense_heads(g, q, k, v, false)?;
        let a = layer.self_attn.output.forward(g, p, a)?;
        let x = g.add(a, queries)?;

        let n = layer.norm_cross.forward(g, p, x)?;
        let mem = layer.norm_memory.forward(g, p, memory)?;
        let q = layer.cross_attn.query.forward(g, p, n)?;
        let keys_in = if self.config.cross_positions {
            let t = g.value(mem).rows();
            let pos = g.constant(positional_embedding(t, self.config.model_dim, self.config.position_span));
            g.add(mem, pos)?
        } else {
            mem
        };
        let k = layer.cross_attn.key.forward(g, p, keys_in)?;
        let v = layer.cross_attn.value.forward(g, p, mem)?;
        let shifted = taa::lcs_var(g, v, cfg.head_dim(), cfg.shift_size, cfg.shift_mode)?;
        let v = taa::fuse(g, p, v, shifted, cfg.fusion_mode, &layer.value_fusion)?;
        let a = self.dense_heads(g, q, k, v, self.config.query_locality)?;
        let a = layer.cross_attn.output.forward(g, p, a)?;
        let x = g.add(a, x)?;

        let n = layer.norm_mlp.forward(g, p, x)?;
        let m = layer.mlp.forward(g, p, n)?;
        g.add(m, x)
    }

    pub fn decode(&self, g: &mut Graph, memory: Var) -> Result<Var> {
        let q = g.param(&self.params, self.layout.queries);
        self.decode_from(g, q, memory)
    }

    /// Decoder stack starting from explicit query embeddings.
    pub fn decode_from(&self, g: &mut Graph, queries: Var, memory: Var) -> Result<Var> {
        self.layout
            .decoder
            .iter()
            .try_fold(queries, |h, layer| self.decoder_layer(g, layer, h, memory))
    }

    /// Class logits and `(start, end)` from decoded queries `[N_q, C_D]`.
    /// The box head emits a `(center, width)` pair in `(0, 1)`, and the
    /// boundaries are `center -/+ width / 2` clamped to `[0, 1]`.
    pub fn heads(&self, g: &mut Graph, decoded: Var) -> Result<ModelOutput> {
        let p = &self.params;
        let x = self.layout.final_norm.forward(g, p, decoded)?;
        let logits = self.layout.class_head.forward(g, p, x)?;
        let raw = self.layout.box_head.forward(g, p, x)?;
        let raw = if self.config.anchored_queries {
            let n = g.value(raw).rows();
            let bias = query_anchors(n);
            let bias = g.constant(bias);
            g.add(raw, bias)?
        } else {
            raw
        };
        let cw = g.sigmoid(raw);
        let center = g.slice_cols(cw, 0, 1)?;
        let width = g.slice_cols(cw, 1, 1)?;
        let half = g.scale(width, 0.5);
        let start = g.sub(center, half)?;
        let end = g.add(center, half)?;
        let start = g.clamp(start, 0.0, 1.0);
        let end = g.clamp(end, 0.0, 1.0);
        let boundaries = g.concat_cols(&[start, end])?;
        Ok(ModelOutput { logits, boundaries })
    }

    /// Full forward pass for `features: [T, C]`.
    pub fn forward(&self, g: &mut Graph, features: &Tensor) -> Result<ModelOutput> {
        if features.rank() != 2 || features.rows() == 0 {
            return Err(Error::EmptySequence);
        }
        let x = g.constant(features.clone());
        let e = self.embed(g, x)?;
        let memory = self.encode(g, e)?;
        let decoded = self.decode(g, memory)?;
        self.heads(g, decoded)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features)?;
        Ok(predictions(&g, &out))
    }

    // -- checkpoints --------------------------------------------------------

    /// Writes `APF1`, a little-endian `u32` manifest length, the JSON manifest,
    /// then every parameter as little-endian `f64` in manifest order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (_, name, t) in self.params.iter() {
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let manifest = CheckpointManifest {
            config: self.config,
            params: entries,
        };
        let header = serde_json::to_vec(&manifest).map_err(|e| Error::json(path, e))?;
        let mut buf = Vec::with_capacity(8 + header.len() + offset as usize);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint with the configuration stored inside it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (manifest, payload) = parse_checkpoint(path, &bytes)?;
        let mut model = Model::new(manifest.config, 0)?;
        for entry in &manifest.params {
            let id = model.params.id(&entry.name).ok_or_else(|| Error::CheckpointMismatch {
                field: format!("params.{}", entry.name),
            })?;
            let target = model.params.get_mut(id);
            if target.shape() != entry.shape.as_slice() {
                return Err(Error::CheckpointMismatch {
                    field: format!("params.{}.shape", entry.name),
                });
            }
            let start = entry.offset as usize;
            let end = start + 8 * target.len();
            let block = payload.get(start..end).ok_or_else(|| Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("parameter {} needs bytes {start}..{end}", entry.name),
            })?;
            for (dst, chunk) in target.data_mut().iter_mut().zip(block.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        if manifest.params.len() != model.params.len() {
            return Err(Error::CheckpointMismatch {
                field: "params".into(),
            });
        }
        Ok(model)
    }

    /// Loads a checkpoint and requires its stored configuration to equal `expected`.
    pub fn load_with_config(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if let Some(field) = first_difference(
            &serde_json::to_value(expected).expect("config serializes"),
            &serde_json::to_value(model.config).expect("config serializes"),
            String::new(),
        ) {
            return Err(Error::CheckpointMismatch { field });
        }
        Ok(model)
    }
}

/// Reads decoded predictions out of a finished forward graph.
pub fn predictions(g: &Graph, out: &ModelOutput) -> Vec<Prediction> {
    let logits = g.value(out.logits);
    let bounds = g.value(out.boundaries);
    (0..logits.rows())
        .map(|n| Prediction {
            segment: Segment::new(bounds.at(n, 0), bounds.at(n, 1)),
            class_logits: logits.row(n).to_vec(),
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload that follows the manifest.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

fn parse_checkpoint<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointManifest, &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "APF1",
        });
    }
    let len_bytes = bytes.get(4..8).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        detail: "missing manifest length".into(),
    })?;
    let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let header = bytes.get(8..8 + len).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        detail: format!("manifest needs {len} bytes"),
    })?;
    let manifest: CheckpointManifest = serde_json::from_slice(header).map_err(|e| Error::json(path, e))?;
    let expected: u64 = manifest
        .params
        .iter()
        .map(|p| 8 * p.shape.iter().product::<usize>() as u64)
        .sum();
    let payload = &bytes[8 + len..];
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("payload has {} of {expected} bytes", payload.len()),
        });
    }
    if payload.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            detail: format!("payload has {} bytes, manifest describes {expected}", payload.len()),
        });
    }
    Ok((manifest, payload))
}

/// Dotted path of the first differing leaf between two JSON values.
pub(crate) fn first_difference(a: &serde_json::Value, b: &serde_json::Value, prefix: String) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(l), Some(r)) => first_difference(l, r, path),
                    _ => Some(path),
                }
            })
        }
        _ if a == b => None,
        _ => Some(if prefix.is_empty() { "<root>".into() } else { prefix }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(t: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[t, c], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn positional_embedding_fixtures() {
        let pe = positional_embedding(50, 16, None);
        for i in 0..8 {
            assert_eq!(pe.at(0, 2 * i), 0.0);
            assert_eq!(pe.at(0, 2 * i + 1), 1.0);
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn spanned_positions_depend_only_on_relative_place() {
        let short = positional_embedding(64, 16, Some(128.0));
        let long = positional_embedding(128, 16, Some(128.0));
        assert_eq!(long, positional_embedding(128, 16, None));
        for i in 0..64 {
            assert!(short.row(i).iter().zip(long.row(2 * i)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn positional_columns_are_distinct() {
        let pe = positional_embedding(10_000, 64, None);
        let mut rows: Vec<&[f64]> = (0..10_000).map(|t| pe.row(t)).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(rows.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn conv_impulse_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 1, 1, &mut rng);
        let k = store.get(conv.linear.weight).clone();
        let mut x = Tensor::zeros(&[7, 1]);
        x.data_mut()[3] = 1.0;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = conv.forward(&mut g, &store, xv).unwrap();
        let y = g.value(y);
        // out[t] = sum_k W[k] x[t + k - 1]: the impulse at 3 shows up reversed
        assert_eq!(y.data()[2], k.data()[2]);
        assert_eq!(y.data()[3], k.data()[1]);
        assert_eq!(y.data()[4], k.data()[0]);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[6], 0.0);
    }

    #[test]
    fn projection_preserves_length_and_zero() {
        let model = Model::new(ModelConfig::tiny(5, 3), 0).unwrap();
        for t in [1, 2, 9] {
            let mut g = Graph::new();
            let x = g.constant(features(t, 5, 2));
            let e = model.embed(&mut g, x).unwrap();
            assert_eq!(g.value(e).shape(), &[t, 8]);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[6, 5]));
        let h = model.layout.conv1.forward(&mut g, &model.params, x).unwrap();
        let h = g.gelu(h);
        let h = model.layout.conv2.forward(&mut g, &model.params, h).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_layer_with_zeroed_outputs_is_identity() {
        let mut model = Model::new(ModelConfig::tiny(5, 3), 3).unwrap();
        let layer = model.layout.encoder[0];
        layer.taa.output.zero(&mut model.params);
        layer.mlp.fc2.zero(&mut model.params);
        for t in [4, 100] {
            let mut g = Graph::new();
            let x = g.constant(features(t, 8, 4));
            let y = model.encoder_layer(&mut g, &layer, x).unwrap();
            assert_eq!(g.value(y), g.value(x));
        }
    }

    #[test]
    fn encode_composes_layers() {
        let mut cfg = ModelConfig::tiny(5, 3);
        cfg.encoder_layers = 0;
        let model = Model::new(cfg, 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(features(10, 8, 6));
        let y = model.encode(&mut g, x).unwrap();
        assert_eq!(x, y);

        let model = Model::new(ModelConfig::tiny(5, 3), 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(features(10, 8, 6));
        let a = model.encode(&mut g, x).unwrap();
        let l0 = model.layout.encoder[0];
        let l1 = model.layout.encoder[1];
        let b = model.encoder_layer(&mut g, &l0, x).unwrap();
        let b = model.encoder_layer(&mut g, &l1, b).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn decoder_layer_with_zeroed_outputs_is_identity() {
        let mut model = Model::new(ModelConfig::tiny(5, 3), 7).unwrap();
        let layer = model.layout.decoder[0];
        layer.self_attn.output.zero(&mut model.params);
        layer.cross_attn.output.zero(&mut model.params);
        layer.mlp.fc2.zero(&mut model.params);
        let mut g = Graph::new();
        let q = g.constant(features(3, 8, 8));
        let m = g.constant(features(12, 8, 9));
        let y = model.decoder_layer(&mut g, &layer, q, m).unwrap();
        assert_eq!(g.value(y), g.value(q));
    }

    #[test]
    fn constant_memory_gives_query_independent_cross_attention() {
        let mut model = Model::new(ModelConfig::tiny(5, 3), 10).unwrap();
        let layer = model.layout.decoder[0];
        // isolate the cross-attention: silence self-attention and MLP
        layer.self_attn.output.zero(&mut model.params);
        layer.mlp.fc2.zero(&mut model.params);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mem = Tensor::from_parts(vec![12, 8], row.iter().copied().cycle().take(96).collect()).unwrap();
        let mut g = Graph::new();
        let q = g.constant(features(3, 8, 11));
        let m = g.constant(mem);
        let y = model.decoder_layer(&mut g, &layer, q, m).unwrap();
        let delta = g.value(y).sub(g.value(q)).unwrap();
        for n in 1..3 {
            for j in 0..8 {
                assert!((delta.at(n, j) - delta.at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_heads_give_centered_half_width_segments() {
        let mut model = Model::new(ModelConfig::tiny(5, 4), 12).unwrap();
        let bh = model.layout.box_head;
        bh.fc1.zero(&mut model.params);
        bh.fc2.zero(&mut model.params);
        let preds = model.predict(&features(9, 5, 13)).unwrap();
        assert_eq!(preds.len(), 3);
        for p in &preds {
            assert_eq!(p.segment, Segment::new(0.25, 0.75));
            assert_eq!(p.class_logits.len(), 4);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(ModelConfig::tiny(5, 3), 14).unwrap();
        let f = features(17, 5, 15);
        assert_eq!(model.predict(&f).unwrap(), model.predict(&f).unwrap());
        let again = Model::new(ModelConfig::tiny(5, 3), 14).unwrap();
        assert_eq!(model.predict(&f).unwrap(), again.predict(&f).unwrap());
    }

    #[test]
    fn learned_positions_reject_long_sequences() {
        let mut cfg = ModelConfig::tiny(5, 3);
        cfg.positional = PositionalEmbedding::Learned { max_len: 8 };
        let model = Model::new(cfg, 0).unwrap();
        assert!(model.predict(&features(8, 5, 1)).is_ok());
        assert!(model.predict(&features(9, 5, 1)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.apf");
        let model = Model::new(ModelConfig::tiny(5, 3), 16).unwrap();
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params(), model.params());

        let other = ModelConfig::tiny(5, 3).with_window(5);
        match Model::load_with_config(&path, &other) {
            Err(Error::CheckpointMismatch { field }) => assert_eq!(field, "decoder_taa.window"),
            r => panic!("unexpected {r:?}"),
        }

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Truncated { .. })));
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(Model::load(&path), Err(Error::BadMagic { .. })));
    }
}
