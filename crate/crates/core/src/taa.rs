//! Temporal-aware attention: a windowed global-perception attention branch and
//! a local convolutional shift branch that share one Q/K/V projection and are
//! fused with learnable weights.
//!
//! All sequence tensors are `[T, C_D]`; head `h` owns columns
//! `h * D_h .. (h + 1) * D_h`. [`split_heads`] and [`merge_heads`] convert
//! to and from the `[H_n, T, D_h]` view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, ParamId, ParamStore, Var};
use crate::nn::Linear;
use crate::tensor::{softmax_row, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftMode {
    /// One-directional offsets `d mod s` in `[0, s - 1]`.
    General,
    /// Symmetric offsets `(d mod s) - (s - 1) / 2`.
    #[default]
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `attn + conv`
    Fixed11,
    /// `attn + a * conv`
    AlphaRight,
    /// `a * attn + conv`
    AlphaLeft,
    /// `a * attn + (1 - a) * conv`
    #[default]
    AlphaComplement,
    /// `a1 * attn + a2 * conv`
    TwoAlphas,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Fixed11,
        FusionMode::AlphaRight,
        FusionMode::AlphaLeft,
        FusionMode::AlphaComplement,
        FusionMode::TwoAlphas,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    /// Divide scores by the square root of the sequence length.
    #[default]
    SqrtT,
    /// Divide scores by the square root of the head dimension.
    SqrtDh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaaConfig {
    pub model_dim: usize,
    pub heads: usize,
    /// Odd window size `w`; each query sees three such windows.
    pub window: usize,
    /// Odd shift size `s`.
    pub shift_size: usize,
    pub shift_mode: ShiftMode,
    pub fusion_mode: FusionMode,
    pub score_scale: ScoreScale,
    /// Weight each window by the cosine between the query and the window's
    /// anchor query. Disabling this is a diagnostic that sets every weight to 1.
    #[serde(default = "default_true")]
    pub cosine_weights: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TaaConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            window: 5,
            shift_size: 9,
            shift_mode: ShiftMode::Bidirectional,
            fusion_mode: FusionMode::AlphaComplement,
            score_scale: ScoreScale::SqrtT,
            cosine_weights: true,
        }
    }
}

impl TaaConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        if self.shift_size % 2 == 0 {
            return Err(Error::Config(format!("shift size {} must be odd", self.shift_size)));
        }
        Ok(())
    }

    fn scale(&self, t: usize) -> f64 {
        match self.score_scale {
            ScoreScale::SqrtT => (t as f64).sqrt(),
            ScoreScale::SqrtDh => (self.head_dim() as f64).sqrt(),
        }
    }
}

/// `[T, H*D] -> [H, T, D]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let (t, c) = (x.rows(), x.cols());
    let d = c / heads;
    let mut out = Vec::with_capacity(x.len());
    for h in 0..heads {
        for i in 0..t {
            out.extend_from_slice(&x.row(i)[h * d..(h + 1) * d]);
        }
    }
    Tensor::raw(vec![heads, t, d], out)
}

/// `[H, T, D] -> [T, H*D]`.
pub fn merge_heads(x: &Tensor) -> Tensor {
    let (h, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.len()];
    for hh in 0..h {
        for i in 0..t {
            for j in 0..d {
                out[i * h * d + hh * d + j] = x.data()[(hh * t + i) * d + j];
            }
        }
    }
    Tensor::raw(vec![t, h * d], out)
}

// ---------------------------------------------------------------------------
// Local convolutional shift
// ---------------------------------------------------------------------------

/// Offset assigned to index `i` (a channel for temporal shifts, a time step
/// for channel shifts).
pub fn shift_offset(i: usize, s: usize, mode: ShiftMode) -> isize {
    let r = (i % s) as isize;
    match mode {
        ShiftMode::General => r,
        ShiftMode::Bidirectional => r - ((s as isize - 1) / 2),
    }
}

fn shifted(i: usize, offset: isize, len: usize) -> Option<usize> {
    let src = i as isize - offset;
    (0..len as isize).contains(&src).then_some(src as usize)
}

/// Gather map moving channel `d` of every head forward in time by `offsets[d]`.
fn temporal_map(t: usize, model_dim: usize, offsets: &[isize]) -> Vec<Option<u32>> {
    let dh = offsets.len();
    let mut map = Vec::with_capacity(t * model_dim);
    for i in 0..t {
        for c in 0..model_dim {
            map.push(shifted(i, offsets[c % dh], t).map(|src| (src * model_dim + c) as u32));
        }
    }
    map
}

/// Gather map moving the features of time step `i` along each head's channels
/// by `offsets[i]`.
fn channel_map(model_dim: usize, head_dim: usize, offsets: &[isize]) -> Vec<Option<u32>> {
    let t = offsets.len();
    let mut map = Vec::with_capacity(t * model_dim);
    for (i, &o) in offsets.iter().enumerate() {
        for c in 0..model_dim {
            let (h, d) = (c / head_dim, c % head_dim);
            map.push(shifted(d, o, head_dim).map(|src| (i * model_dim + h * head_dim + src) as u32));
        }
    }
    map
}

fn apply_map(x: &Tensor, map: &[Option<u32>]) -> Tensor {
    Tensor::raw(
        x.shape().to_vec(),
        map.iter().map(|m| m.map_or(0.0, |i| x.data()[i as usize])).collect(),
    )
}

fn temporal_offsets(head_dim: usize, s: usize, mode: ShiftMode) -> Vec<isize> {
    (0..head_dim).map(|d| shift_offset(d, s, mode)).collect()
}

fn channel_offsets(t: usize, s: usize, mode: ShiftMode) -> Vec<isize> {
    (0..t).map(|i| shift_offset(i, s, mode)).collect()
}

/// Shifts channel `d` of each head along time by an arbitrary per-channel offset.
/// Vacated positions are zero.
pub fn temporal_shift_by(x: &Tensor, offsets: &[isize]) -> Tensor {
    apply_map(x, &temporal_map(x.rows(), x.cols(), offsets))
}

/// `x` is `[T, C_D]`; channel `d` of each head moves by [`shift_offset`]`(d)` steps in time.
pub fn temporal_shift(x: &Tensor, head_dim: usize, s: usize, mode: ShiftMode) -> Tensor {
    temporal_shift_by(x, &temporal_offsets(head_dim, s, mode))
}

/// `x` is `[T, C_D]`; time step `t` moves by [`shift_offset`]`(t)` channels within each head.
pub fn channel_shift(x: &Tensor, head_dim: usize, s: usize, mode: ShiftMode) -> Tensor {
    apply_map(x, &channel_map(x.cols(), head_dim, &channel_offsets(x.rows(), s, mode)))
}

/// `V + temporal_shift(V) + channel_shift(V)`.
pub fn lcs(v: &Tensor, head_dim: usize, s: usize, mode: ShiftMode) -> Tensor {
    let a = temporal_shift(v, head_dim, s, mode);
    let b = channel_shift(v, head_dim, s, mode);
    let mut out = v.clone();
    out.add_assign(&a);
    out.add_assign(&b);
    out
}

pub fn temporal_shift_var(g: &mut Graph, x: Var, head_dim: usize, s: usize, mode: ShiftMode) -> Result<Var> {
    let (t, c) = (g.value(x).rows(), g.value(x).cols());
    let map = temporal_map(t, c, &temporal_offsets(head_dim, s, mode));
    g.gather(x, vec![t, c], map)
}

pub fn channel_shift_var(g: &mut Graph, x: Var, head_dim: usize, s: usize, mode: ShiftMode) -> Result<Var> {
    let (t, c) = (g.value(x).rows(), g.value(x).cols());
    let map = channel_map(c, head_dim, &channel_offsets(t, s, mode));
    g.gather(x, vec![t, c], map)
}

pub fn lcs_var(g: &mut Graph, v: Var, head_dim: usize, s: usize, mode: ShiftMode) -> Result<Var> {
    let a = temporal_shift_var(g, v, head_dim, s, mode)?;
    let b = channel_shift_var(g, v, head_dim, s, mode)?;
    let sum = g.add(v, a)?;
    g.add(sum, b)
}

// ---------------------------------------------------------------------------
// Global perception attention
// ---------------------------------------------------------------------------

/// Key position for slot `slot` of query `i`, plus the window it belongs to.
/// Slots `0..w` form the window anchored at `i - w`, `w..2w` the one at `i`,
/// `2w..3w` the one at `i + w`; each window is centered on its anchor.
fn slot_position(i: usize, slot: usize, w: usize) -> (isize, isize, usize) {
    let window = slot / w;
    let anchor = i as isize + (window as isize - 1) * w as isize;
    let pos = anchor - (w as isize - 1) / 2 + (slot % w) as isize;
    (anchor, pos, window)
}

fn in_range(p: isize, t: usize) -> bool {
    p >= 0 && (p as usize) < t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Un-normalized window scores for every head and query.
#[derive(Debug, Clone)]
pub struct WindowScores {
    /// `[H, T, 3w]`: `delta_window * (q_i . k_p)`, zero where masked.
    pub scores: Tensor,
    /// Same layout as `scores`; `true` where the slot holds a valid key.
    pub mask: Vec<bool>,
    /// `[H, T, 3]`: the per-window weights.
    pub deltas: Tensor,
}

/// Per-head window geometry and weights for queries `[T, D]`.
struct HeadWindows {
    deltas: Vec<f64>,
    mask: Vec<bool>,
}

fn head_windows(q: &[f64], t: usize, d: usize, w: usize, cosine_weights: bool) -> HeadWindows {
    let span = 3 * w;
    let mut deltas = vec![0.0; t * 3];
    let mut mask = vec![false; t * span];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        for window in 0..3 {
            let anchor = i as isize + (window as isize - 1) * w as isize;
            if !in_range(anchor, t) {
                continue;
            }
            deltas[i * 3 + window] = if !cosine_weights {
                1.0
            } else if window == 1 {
                if norm(qi) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                let a = anchor as usize;
                cosine(qi, &q[a * d..(a + 1) * d])
            };
        }
        for slot in 0..span {
            let (anchor, pos, _) = slot_position(i, slot, w);
            mask[i * span + slot] = in_range(anchor, t) && in_range(pos, t);
        }
    }
    HeadWindows { deltas, mask }
}

/// Column block of head `h` from a `[T, C]` tensor as a contiguous `[T, D]` buffer.
fn head_block(x: &Tensor, h: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.rows() * d);
    for i in 0..x.rows() {
        out.extend_from_slice(&x.row(i)[h * d..(h + 1) * d]);
    }
    out
}

/// Window scores `delta * (q . k)` for `q`, `k` of shape `[T, C_D]`.
pub fn gpa_scores(q: &Tensor, k: &Tensor, cfg: &TaaConfig) -> Result<WindowScores> {
    cfg.validate()?;
    q.same_shape(k, "gpa_scores")?;
    let (t, d, w) = (q.rows(), cfg.head_dim(), cfg.window);
    let span = 3 * w;
    let mut scores = vec![0.0; cfg.heads * t * span];
    let mut mask = vec![false; cfg.heads * t * span];
    let mut deltas = vec![0.0; cfg.heads * t * 3];
    for h in 0..cfg.heads {
        let (qh, kh) = (head_block(q, h, d), head_block(k, h, d));
        let hw = head_windows(&qh, t, d, w, cfg.cosine_weights);
        for i in 0..t {
            for slot in 0..span {
                let idx = (h * t + i) * span + slot;
                if !hw.mask[i * span + slot] {
                    continue;
                }
                let (_, pos, window) = slot_position(i, slot, w);
                let p = pos as usize;
                mask[idx] = true;
                scores[idx] = hw.deltas[i * 3 + window] * dot(&qh[i * d..(i + 1) * d], &kh[p * d..(p + 1) * d]);
            }
        }
        deltas[h * t * 3..(h + 1) * t * 3].copy_from_slice(&hw.deltas);
    }
    Ok(WindowScores {
        scores: Tensor::raw(vec![cfg.heads, t, span], scores),
        mask,
        deltas: Tensor::raw(vec![cfg.heads, t, 3], deltas),
    })
}

/// Work counters gathered while evaluating attention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Query-key dot products evaluated, summed over heads.
    pub qk_products: usize,
}

struct HeadCache {
    probs: Vec<f64>,
    raw: Vec<f64>,
    deltas: Vec<f64>,
    mask: Vec<bool>,
}

struct WindowAttention {
    cfg: TaaConfig,
    scale: f64,
    caches: Vec<HeadCache>,
}

fn window_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &TaaConfig,
) -> Result<(Tensor, WindowAttention, AttentionStats)> {
    cfg.validate()?;
    let t = q.rows();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    q.same_shape(k, "gpa_forward")?;
    q.same_shape(v, "gpa_forward")?;
    if q.cols() != cfg.model_dim {
        return Err(Error::Shape {
            op: "gpa_forward",
            lhs: q.shape().to_vec(),
            rhs: vec![t, cfg.model_dim],
        });
    }
    let (d, w, c) = (cfg.head_dim(), cfg.window, cfg.model_dim);
    let span = 3 * w;
    let scale = cfg.scale(t);
    let mut out = vec![0.0; t * c];
    let mut stats = AttentionStats::default();
    let mut caches = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (head_block(q, h, d), head_block(k, h, d), head_block(v, h, d));
        let hw = head_windows(&qh, t, d, w, cfg.cosine_weights);
        let mut raw = vec![0.0; t * span];
        let mut probs = vec![0.0; t * span];
        let mut z = vec![0.0; span];
        for i in 0..t {
            let qi = &qh[i * d..(i + 1) * d];
            let m = &hw.mask[i * span..(i + 1) * span];
            for slot in 0..span {
                if !m[slot] {
                    continue;
                }
                let (_, pos, window) = slot_position(i, slot, w);
                let p = pos as usize;
                let r = dot(qi, &kh[p * d..(p + 1) * d]);
                stats.qk_products += 1;
                raw[i * span + slot] = r;
                z[slot] = hw.deltas[i * 3 + window] * r / scale;
            }
            softmax_row(&z, &mut probs[i * span..(i + 1) * span], |j| m[j])
                .ok_or(Error::DegenerateRow { row: i })?;
            let orow = &mut out[i * c + h * d..i * c + (h + 1) * d];
            for slot in 0..span {
                let pr = probs[i * span + slot];
                if pr == 0.0 {
                    continue;
                }
                let p = slot_position(i, slot, w).1 as usize;
                for (o, vv) in orow.iter_mut().zip(&vh[p * d..(p + 1) * d]) {
                    *o += pr * vv;
                }
            }
        }
        caches.push(HeadCache {
            probs,
            raw,
            deltas: hw.deltas,
            mask: hw.mask,
        });
    }
    Ok((
        Tensor::raw(vec![t, c], out),
        WindowAttention {
            cfg: *cfg,
            scale,
            caches,
        },
        stats,
    ))
}

/// Adds `scale * d cos(a, b) / d a` into `ga` and the `b` counterpart into `gb`.
fn cosine_backward(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let cos = dot(a, b) / (na * nb);
    for j in 0..a.len() {
        ga[j] += scale * (b[j] / (na * nb) - cos * a[j] / (na * na));
        gb[j] += scale * (a[j] / (na * nb) - cos * b[j] / (nb * nb));
    }
}

impl CustomOp for WindowAttention {
    fn name(&self) -> &'static str {
        "window_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (t, c) = (q.rows(), q.cols());
        let (d, w) = (self.cfg.head_dim(), self.cfg.window);
        let span = 3 * w;
        let mut dq = vec![0.0; t * c];
        let mut dk = vec![0.0; t * c];
        let mut dv = vec![0.0; t * c];
        let mut dprob = vec![0.0; span];
        for (h, cache) in self.caches.iter().enumerate() {
            let (qh, kh, vh) = (head_block(q, h, d), head_block(k, h, d), head_block(v, h, d));
            let mut gq = vec![0.0; t * d];
            let mut gk = vec![0.0; t * d];
            let mut gv = vec![0.0; t * d];
            for i in 0..t {
                let go = &grad.row(i)[h * d..(h + 1) * d];
                let probs = &cache.probs[i * span..(i + 1) * span];
                let mut inner = 0.0;
                for slot in 0..span {
                    dprob[slot] = 0.0;
                    if !cache.mask[i * span + slot] {
                        continue;
                    }
                    let p = slot_position(i, slot, w).1 as usize;
                    dprob[slot] = dot(go, &vh[p * d..(p + 1) * d]);
                    inner += probs[slot] * dprob[slot];
                    for j in 0..d {
                        gv[p * d + j] += probs[slot] * go[j];
                    }
                }
                let mut ddelta = [0.0; 3];
                for slot in 0..span {
                    if !cache.mask[i * span + slot] {
                        continue;
                    }
                    let (_, pos, window) = slot_position(i, slot, w);
                    let p = pos as usize;
                    let dz = probs[slot] * (dprob[slot] - inner) / self.scale;
                    ddelta[window] += dz * cache.raw[i * span + slot];
                    let dr = dz * cache.deltas[i * 3 + window];
                    for j in 0..d {
                        gq[i * d + j] += dr * kh[p * d + j];
                        gk[p * d + j] += dr * qh[i * d + j];
                    }
                }
                if self.cfg.cosine_weights {
                    for window in [0, 2] {
                        let anchor = i as isize + (window as isize - 1) * w as isize;
                        if !in_range(anchor, t) || ddelta[window] == 0.0 {
                            continue;
                        }
                        let a = anchor as usize;
                        let (qi, qa) = (&qh[i * d..(i + 1) * d], &qh[a * d..(a + 1) * d]);
                        let mut gi = vec![0.0; d];
                        let mut ga = vec![0.0; d];
                        cosine_backward(qi, qa, ddelta[window], &mut gi, &mut ga);
                        for j in 0..d {
                            gq[i * d + j] += gi[j];
                            gq[a * d + j] += ga[j];
                        }
                    }
                }
            }
            for i in 0..t {
                let cols = i * c + h * d..i * c + (h + 1) * d;
                dq[cols.clone()].copy_from_slice(&gq[i * d..(i + 1) * d]);
                dk[cols.clone()].copy_from_slice(&gk[i * d..(i + 1) * d]);
                dv[cols].copy_from_slice(&gv[i * d..(i + 1) * d]);
            }
        }
        vec![
            Tensor::raw(vec![t, c], dq),
            Tensor::raw(vec![t, c], dk),
            Tensor::raw(vec![t, c], dv),
        ]
    }
}

/// Windowed multi-head attention on plain tensors, returning the output and
/// the number of query-key products evaluated.
pub fn gpa_forward(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &TaaConfig) -> Result<(Tensor, AttentionStats)> {
    let (out, _, stats) = window_attention_forward(q, k, v, cfg)?;
    Ok((out, stats))
}

/// Differentiable [`gpa_forward`].
pub fn gpa_var(g: &mut Graph, q: Var, k: Var, v: Var, cfg: &TaaConfig) -> Result<Var> {
    let (out, op, _) = window_attention_forward(g.value(q), g.value(k), g.value(v), cfg)?;
    Ok(g.custom(vec![q, k, v], out, Box::new(op)))
}

/// Dense multi-head softmax attention with the same scale rule, for comparison
/// and benchmarking.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &TaaConfig) -> Result<(Tensor, AttentionStats)> {
    cfg.validate()?;
    q.same_shape(k, "dense_attention")?;
    q.same_shape(v, "dense_attention")?;
    let (t, c, d) = (q.rows(), q.cols(), cfg.head_dim());
    let scale = cfg.scale(t);
    let mut out = vec![0.0; t * c];
    let mut stats = AttentionStats::default();
    let mut z = vec![0.0; t];
    let mut p = vec![0.0; t];
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (head_block(q, h, d), head_block(k, h, d), head_block(v, h, d));
        for i in 0..t {
            for j in 0..t {
                z[j] = dot(&qh[i * d..(i + 1) * d], &kh[j * d..(j + 1) * d]) / scale;
                stats.qk_products += 1;
            }
            softmax_row(&z, &mut p, |_| true).expect("nonempty row");
            for j in 0..t {
                for e in 0..d {
                    out[i * c + h * d + e] += p[j] * vh[j * d + e];
                }
            }
        }
    }
    Ok((Tensor::raw(vec![t, c], out), stats))
}

/// Query-key products per head for a sequence of length `t`, counted from the
/// same window geometry the attention kernel uses.
pub fn window_products_per_head(t: usize, w: usize) -> usize {
    (0..t)
        .map(|i| {
            (0..3 * w)
                .filter(|&slot| {
                    let (anchor, pos, _) = slot_position(i, slot, w);
                    in_range(anchor, t) && in_range(pos, t)
                })
                .count()
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Fusion and the full block
// ---------------------------------------------------------------------------

/// Learnable branch weights for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct FusionWeights {
    pub alpha: ParamId,
    pub alpha2: Option<ParamId>,
}

impl FusionWeights {
    pub fn new(store: &mut ParamStore, name: &str, mode: FusionMode) -> Self {
        Self {
            alpha: store.add(format!("{name}.alpha"), Tensor::scalar(0.5)),
            alpha2: (mode == FusionMode::TwoAlphas).then(|| store.add(format!("{name}.alpha2"), Tensor::scalar(0.5))),
        }
    }

    /// Effective `(attn_weight, conv_weight)` for the current parameter values.
    pub fn effective(&self, store: &ParamStore, mode: FusionMode) -> (f64, f64) {
        let a = store.get(self.alpha).item();
        match mode {
            FusionMode::Fixed11 => (1.0, 1.0),
            FusionMode::AlphaRight => (1.0, a),
            FusionMode::AlphaLeft => (a, 1.0),
            FusionMode::AlphaComplement => (a, 1.0 - a),
            FusionMode::TwoAlphas => (a, store.get(self.alpha2.expect("two-alpha fusion")).item()),
        }
    }
}

/// Combines the attention and shift branches according to `mode`.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    attn: Var,
    conv: Var,
    mode: FusionMode,
    weights: &FusionWeights,
) -> Result<Var> {
    let alpha = || weights.alpha;
    match mode {
        FusionMode::Fixed11 => g.add(attn, conv),
        FusionMode::AlphaRight => {
            let a = g.param(store, alpha());
            let c = g.scale_by(conv, a)?;
            g.add(attn, c)
        }
        FusionMode::AlphaLeft => {
            let a = g.param(store, alpha());
            let x = g.scale_by(attn, a)?;
            g.add(x, conv)
        }
        FusionMode::AlphaComplement => {
            let a = g.param(store, alpha());
            let one_minus = g.affine(a, -1.0, 1.0);
            let x = g.scale_by(attn, a)?;
            let c = g.scale_by(conv, one_minus)?;
            g.add(x, c)
        }
        FusionMode::TwoAlphas => {
            let a = g.param(store, alpha());
            let a2 = g.param(
                store,
                weights
                    .alpha2
                    .ok_or_else(|| Error::Config("two-alpha fusion needs a second weight".into()))?,
            );
            let x = g.scale_by(attn, a)?;
            let c = g.scale_by(conv, a2)?;
            g.add(x, c)
        }
    }
}

/// Parameters of one temporal-aware attention block.
#[derive(Debug, Clone, Copy)]
pub struct TaaParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub fusion: FusionWeights,
}

impl TaaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &TaaConfig, rng: &mut R) -> Self {
        let c = cfg.model_dim;
        Self {
            query: Linear::new(store, &format!("{name}.query"), c, c, rng),
            key: Linear::new(store, &format!("{name}.key"), c, c, rng),
            value: Linear::new(store, &format!("{name}.value"), c, c, rng),
            output: Linear::new(store, &format!("{name}.output"), c, c, rng),
            fusion: FusionWeights::new(store, &format!("{name}.fusion"), cfg.fusion_mode),
        }
    }
}

/// Shared 1x1 projections of `x: [T, C_D]` into queries, keys and values.
pub fn project_qkv(g: &mut Graph, store: &ParamStore, x: Var, p: &TaaParams, cfg: &TaaConfig) -> Result<(Var, Var, Var)> {
    cfg.validate()?;
    let q = p.query.forward(g, store, x)?;
    let k = p.key.forward(g, store, x)?;
    let v = p.value.forward(g, store, x)?;
    Ok((q, k, v))
}

/// Full block: shared projection, both branches, fusion and output projection.
pub fn taa_forward(g: &mut Graph, store: &ParamStore, x: Var, p: &TaaParams, cfg: &TaaConfig) -> Result<Var> {
    let (q, k, v) = project_qkv(g, store, x, p, cfg)?;
    let attn = gpa_var(g, q, k, v, cfg)?;
    let conv = lcs_var(g, v, cfg.head_dim(), cfg.shift_size, cfg.shift_mode)?;
    let fused = fuse(g, store, attn, conv, cfg.fusion_mode, &p.fusion)?;
    p.output.forward(g, store, fused)
}
