//! Label assignment between predicted and ground-truth segments, and the
//! set-prediction training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::{sigmoid, Tensor};

/// A temporal interval, normalized to `[0, 1]` of the video unless noted otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn shifted(&self, by: f64) -> Self {
        Self::new(self.start + by, self.end + by)
    }
}

/// Temporal intersection over union.
pub fn tiou_1d(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// IoU minus the squared center distance over the squared enclosing length.
pub fn diou_1d(a: Segment, b: Segment) -> f64 {
    let enclosing = a.end.max(b.end) - a.start.min(b.start);
    if enclosing <= 0.0 {
        return 1.0;
    }
    let rho = a.center() - b.center();
    tiou_1d(a, b) - rho * rho / (enclosing * enclosing)
}

/// Partial derivatives of [`diou_1d`] as `([d start_a, d end_a], [d start_b, d end_b])`.
fn diou_grad(a: Segment, b: Segment) -> ([f64; 2], [f64; 2]) {
    let enclosing = a.end.max(b.end) - a.start.min(b.start);
    if enclosing <= 0.0 {
        return ([0.0; 2], [0.0; 2]);
    }
    let raw_inter = a.end.min(b.end) - a.start.max(b.start);
    let inter = raw_inter.max(0.0);
    let union = a.len() + b.len() - inter;
    let rho = a.center() - b.center();

    // d(inter), d(enclosing) w.r.t. [s_a, e_a, s_b, e_b]
    let mut d_inter = [0.0; 4];
    if raw_inter > 0.0 {
        if a.start >= b.start {
            d_inter[0] = -1.0;
        } else {
            d_inter[2] = -1.0;
        }
        if a.end <= b.end {
            d_inter[1] = 1.0;
        } else {
            d_inter[3] = 1.0;
        }
    }
    let mut d_enc = [0.0; 4];
    if a.start <= b.start {
        d_enc[0] = -1.0;
    } else {
        d_enc[2] = -1.0;
    }
    if a.end >= b.end {
        d_enc[1] = 1.0;
    } else {
        d_enc[3] = 1.0;
    }
    let d_len = [-1.0, 1.0, -1.0, 1.0];
    let d_rho = [0.5, 0.5, -0.5, -0.5];

    let mut out = [0.0; 4];
    for i in 0..4 {
        let d_iou = if union > 0.0 {
            let d_union = d_len[i] - d_inter[i];
            (d_inter[i] * union - inter * d_union) / (union * union)
        } else {
            0.0
        };
        let c2 = enclosing * enclosing;
        let d_pen = 2.0 * rho * d_rho[i] / c2 - 2.0 * rho * rho * d_enc[i] / (c2 * enclosing);
        out[i] = d_iou - d_pen;
    }
    ([out[0], out[1]], [out[2], out[3]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss and d loss / d logit for one class logit.
fn focal_term(x: f64, positive: bool, fp: FocalParams) -> (f64, f64) {
    let p = sigmoid(x);
    let (g, a) = (fp.gamma, fp.alpha);
    if positive {
        let log_p = -softplus(-x);
        let m = (1.0 - p).powf(g);
        (-a * m * log_p, a * m * (g * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(x);
        let m = p.powf(g);
        (-(1.0 - a) * m * log_q, (1.0 - a) * m * (p - g * (1.0 - p) * log_q))
    }
}

/// Sigmoid focal loss summed over classes; `target = None` is background.
pub fn focal_loss(logits: &[f64], target: Option<usize>, fp: FocalParams) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(k, &x)| focal_term(x, target == Some(k), fp).0)
        .sum()
}

struct FocalOp {
    targets: Vec<Option<usize>>,
    params: FocalParams,
}

impl CustomOp for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let logits = inputs[0];
        let k = logits.cols();
        let scale = grad.item();
        let mut d = vec![0.0; logits.len()];
        for (n, t) in self.targets.iter().enumerate() {
            for c in 0..k {
                d[n * k + c] = scale * focal_term(logits.at(n, c), *t == Some(c), self.params).1;
            }
        }
        vec![Tensor::raw(logits.shape().to_vec(), d)]
    }
}

/// Focal loss of every row of `logits: [N, K]`, summed into a scalar node.
pub fn focal_loss_var(g: &mut Graph, logits: Var, targets: &[Option<usize>], fp: FocalParams) -> Result<Var> {
    let lv = g.value(logits);
    if lv.rank() != 2 || lv.rows() != targets.len() || targets.iter().flatten().any(|&t| t >= lv.cols()) {
        return Err(Error::Shape {
            op: "focal_loss",
            lhs: lv.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(n, &t)| focal_loss(lv.row(n), t, fp))
        .sum();
    Ok(g.custom(
        vec![logits],
        Tensor::scalar(total),
        Box::new(FocalOp {
            targets: targets.to_vec(),
            params: fp,
        }),
    ))
}

struct DiouOp;

impl CustomOp for DiouOp {
    fn name(&self) -> &'static str {
        "diou"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; b.len()];
        for n in 0..a.rows() {
            let sa = Segment::new(a.at(n, 0), a.at(n, 1));
            let sb = Segment::new(b.at(n, 0), b.at(n, 1));
            let (ga, gb) = diou_grad(sa, sb);
            let g = grad.data()[n];
            da[2 * n] = g * ga[0];
            da[2 * n + 1] = g * ga[1];
            db[2 * n] = g * gb[0];
            db[2 * n + 1] = g * gb[1];
        }
        vec![
            Tensor::raw(a.shape().to_vec(), da),
            Tensor::raw(b.shape().to_vec(), db),
        ]
    }
}

/// Row-wise DIoU of two `[N, 2]` nodes of `(start, end)` pairs, as an `[N]` node.
pub fn diou_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    av.same_shape(bv, "diou")?;
    if av.rank() != 2 || av.cols() != 2 {
        return Err(Error::Shape {
            op: "diou",
            lhs: av.shape().to_vec(),
            rhs: vec![av.rows(), 2],
        });
    }
    let out: Vec<f64> = (0..av.rows())
        .map(|n| {
            diou_1d(
                Segment::new(av.at(n, 0), av.at(n, 1)),
                Segment::new(bv.at(n, 0), bv.at(n, 1)),
            )
        })
        .collect();
    let n = out.len();
    Ok(g.custom(vec![a, b], Tensor::raw(vec![n], out), Box::new(DiouOp)))
}

/// A labeled ground-truth instance with normalized times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtSegment {
    pub segment: Segment,
    pub label: usize,
}

/// One query's decoded output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub segment: Segment,
    pub class_logits: Vec<f64>,
}

impl Prediction {
    pub fn probability(&self, class: usize) -> f64 {
        sigmoid(self.class_logits[class])
    }

    /// `(argmax class, its sigmoid probability)`.
    pub fn top_class(&self) -> (usize, f64) {
        let (k, &x) = self
            .class_logits
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        (k, sigmoid(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 1.0,
            iou: 1.0,
        }
    }
}

/// `[N_q, N_gt]` assignment costs; empty ground truth gives `None`.
pub fn cost_matrix(preds: &[Prediction], gts: &[GtSegment], w: CostWeights) -> Option<Tensor> {
    if gts.is_empty() || preds.is_empty() {
        return None;
    }
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        for gt in gts {
            let l1 = (p.segment.start - gt.segment.start).abs() + (p.segment.end - gt.segment.end).abs();
            data.push(
                -w.class * p.probability(gt.label) + w.l1 * l1 + w.iou * (1.0 - diou_1d(p.segment, gt.segment)),
            );
        }
    }
    Some(Tensor::raw(vec![preds.len(), gts.len()], data))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs, ordered by prediction index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions assigned to background.
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    pub fn unmatched_all(n: usize) -> Self {
        Self {
            pairs: vec![],
            unmatched: (0..n).collect(),
        }
    }

    /// Per-prediction class target given the ground-truth labels.
    pub fn targets(&self, n: usize, gts: &[GtSegment]) -> Vec<Option<usize>> {
        let mut t = vec![None; n];
        for &(p, g) in &self.pairs {
            t[p] = Some(gts[g].label);
        }
        t
    }

    /// Summed cost of the assignment, accumulated in ground-truth order.
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        let mut by_gt = self.pairs.clone();
        by_gt.sort_by_key(|&(_, g)| g);
        by_gt.iter().map(|&(p, g)| cost.at(p, g)).sum()
    }
}

/// Minimum-cost assignment of every ground truth (column) to a distinct
/// prediction (row), by the shortest-augmenting-path form of Kuhn-Munkres.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    let (n_pred, n_gt) = (cost.rows(), cost.cols());
    if n_pred < n_gt {
        return Err(Error::TooFewQueries {
            queries: n_pred,
            targets: n_gt,
        });
    }
    // Rows of the reduced problem are ground truths (1-based), columns predictions.
    let (n, m) = (n_gt, n_pred);
    let c = |i: usize, j: usize| cost.at(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    let mut unmatched = Vec::new();
    for j in 1..=m {
        if owner[j] != 0 {
            pairs.push((j - 1, owner[j] - 1));
        } else {
            unmatched.push(j - 1);
        }
    }
    Ok(MatchResult { pairs, unmatched })
}

/// Values of the loss terms; `total = cls + lambda * (reg + l1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Focal loss averaged over predictions.
    pub cls: f64,
    /// `1 - DIoU` summed over matched pairs, divided by the number of pairs.
    pub reg: f64,
    /// Boundary L1 distance summed over matched pairs, divided by the number of pairs.
    pub l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub focal: FocalParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            focal: FocalParams::default(),
        }
    }
}

/// Builds the set-prediction loss on the graph from `logits: [N_q, K]` and
/// `boundaries: [N_q, 2]` under a fixed assignment.
pub fn total_loss_var(
    g: &mut Graph,
    logits: Var,
    boundaries: Var,
    gts: &[GtSegment],
    assignment: &MatchResult,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let n_q = g.value(logits).rows();
    let targets = assignment.targets(n_q, gts);
    let focal = focal_loss_var(g, logits, &targets, cfg.focal)?;
    let cls = g.scale(focal, 1.0 / n_q as f64);
    let cls_value = g.value(cls).item();

    if assignment.pairs.is_empty() {
        return Ok((
            cls,
            LossBreakdown {
                total: cls_value,
                cls: cls_value,
                reg: 0.0,
                l1: 0.0,
            },
        ));
    }

    let n_pos = assignment.pairs.len() as f64;
    let rows: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
    let matched = g.select_rows(boundaries, &rows)?;
    let target_data: Vec<f64> = assignment
        .pairs
        .iter()
        .flat_map(|&(_, m)| [gts[m].segment.start, gts[m].segment.end])
        .collect();
    let target = g.constant(Tensor::raw(vec![rows.len(), 2], target_data));

    let diou = diou_var(g, matched, target)?;
    let diou_sum = g.sum(diou);
    let reg = g.affine(diou_sum, -1.0 / n_pos, 1.0);
    let diff = g.sub(matched, target)?;
    let abs = g.abs(diff);
    let l1_sum = g.sum(abs);
    let l1 = g.scale(l1_sum, 1.0 / n_pos);

    let boxes = g.add(reg, l1)?;
    let boxes = g.scale(boxes, cfg.lambda);
    let total = g.add(cls, boxes)?;
    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        cls: cls_value,
        reg: g.value(reg).item(),
        l1: g.value(l1).item(),
    };
    Ok((total, breakdown))
}

/// Plain-value form of [`total_loss_var`].
pub fn total_loss(
    preds: &[Prediction],
    gts: &[GtSegment],
    assignment: &MatchResult,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let k = preds.first().map_or(1, |p| p.class_logits.len());
    let logits = Tensor::new(
        vec![preds.len(), k],
        preds.iter().flat_map(|p| p.class_logits.iter().copied()).collect(),
    )?;
    let bounds = Tensor::new(
        vec![preds.len(), 2],
        preds.iter().flat_map(|p| [p.segment.start, p.segment.end]).collect(),
    )?;
    let mut g = Graph::new();
    let (l, b) = (g.constant(logits), g.constant(bounds));
    Ok(total_loss_var(&mut g, l, b, gts, assignment, cfg)?.1)
}

/// Cost matrix followed by Hungarian matching; empty ground truth leaves
/// every prediction unmatched.
pub fn assign(preds: &[Prediction], gts: &[GtSegment], weights: CostWeights) -> Result<MatchResult> {
    match cost_matrix(preds, gts, weights) {
        None => Ok(MatchResult::unmatched_all(preds.len())),
        Some(cost) => hungarian_match(&cost),
    }
}
