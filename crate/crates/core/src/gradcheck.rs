//! Central finite differences as an independent gradient oracle, and the
//! gradient-check suites run by the command line and the acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Gradients, Graph, ParamStore, Var};
use crate::matching::{self, CostWeights, FocalParams, GtSegment, LossConfig, Segment};
use crate::model::{Model, ModelConfig};
use crate::nn::Activation;
use crate::taa::{self, FusionMode, ScoreScale, ShiftMode, TaaConfig, TaaParams};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate of `p`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, p: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = p.clone();
    let mut out = vec![0.0; p.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * h);
    }
    Tensor::raw(p.shape().to_vec(), out)
}

/// Largest coordinate-wise `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

/// Bound on the worst coordinate-wise relative error for a check to pass.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    /// Negate one analytic gradient so the harness can prove it notices.
    pub inject_sign_flip: bool,
    pub seed: u64,
}

/// Fixed random weights that turn any output into a scalar `sum(w * y)`.
fn probe_weights(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn scalarize(g: &mut Graph, y: Var) -> Result<Var> {
    if g.value(y).len() == 1 {
        return Ok(y);
    }
    let w = g.constant(probe_weights(g.value(y).shape()));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

/// Compares graph gradients against finite differences for each input tensor.
pub fn check_inputs(
    suite: &'static str,
    name: impl Into<String>,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    flip: bool,
) -> Result<CheckResult> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        let l = scalarize(&mut g, y)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let l = scalarize(&mut g, y)?;
    let grads = g.backward(l)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (i, v) in vars.iter().enumerate() {
        let mut analytic = grads.get(&g, *v);
        if flip && i == 0 {
            analytic = analytic.scale(-1.0);
        }
        let mut probe = inputs.to_vec();
        let numeric = finite_diff_grad(
            |t| {
                probe[i] = t.clone();
                eval(&probe).expect("perturbed forward")
            },
            &inputs[i],
            DEFAULT_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
        coords += inputs[i].len();
    }
    Ok(CheckResult {
        suite,
        name: name.into(),
        max_rel_error: worst,
        coordinates: coords,
    })
}

/// Compares parameter gradients of a scalar loss against finite differences
/// over every parameter in `store`.
pub fn check_params(
    suite: &'static str,
    name: impl Into<String>,
    store: &ParamStore,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    flip: bool,
) -> Result<CheckResult> {
    let mut g = Graph::new();
    let l = build(&mut g, store)?;
    let l = scalarize(&mut g, l)?;
    let mut grads = Gradients::zeros_like(store);
    g.backward_params(l, &mut grads)?;

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (n, id) in store.ids().enumerate() {
        let mut analytic = grads.get(id).clone();
        if flip && n == 0 {
            analytic = analytic.scale(-1.0);
        }
        let numeric = finite_diff_grad(
            |t| {
                *probe.get_mut(id) = t.clone();
                let mut g = Graph::new();
                let l = build(&mut g, &probe).expect("perturbed forward");
                let l = scalarize(&mut g, l).expect("scalar loss");
                g.value(l).item()
            },
            store.get(id),
            DEFAULT_STEP,
        );
        *probe.get_mut(id) = store.get(id).clone();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(CheckResult {
        suite,
        name: name.into(),
        max_rel_error: worst,
        coordinates: store.num_scalars(),
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Every differentiable primitive on the tape.
pub fn tensor_core_suite(opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    const S: &str = "tensor-core";
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    let flip = opts.inject_sign_flip;
    let (a, b) = (rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2]));
    out.push(check_inputs(S, "matmul", &[a.clone(), b], |g, v| g.matmul(v[0], v[1]), flip)?);
    let c = rand_t(&mut rng, &[3, 4]);
    out.push(check_inputs(S, "add", &[a.clone(), c.clone()], |g, v| g.add(v[0], v[1]), false)?);
    out.push(check_inputs(S, "sub", &[a.clone(), c.clone()], |g, v| g.sub(v[0], v[1]), false)?);
    out.push(check_inputs(S, "mul", &[a.clone(), c.clone()], |g, v| g.mul(v[0], v[1]), false)?);
    let row = rand_t(&mut rng, &[4]);
    out.push(check_inputs(S, "add_row", &[a.clone(), row], |g, v| g.add_row(v[0], v[1]), false)?);
    out.push(check_inputs(S, "affine", &[a.clone()], |g, v| Ok(g.affine(v[0], -1.5, 0.3)), false)?);
    let s = rand_t(&mut rng, &[1]);
    out.push(check_inputs(S, "scale_by", &[a.clone(), s], |g, v| g.scale_by(v[0], v[1]), false)?);
    out.push(check_inputs(S, "slice_cols", &[a.clone()], |g, v| g.slice_cols(v[0], 1, 2), false)?);
    out.push(check_inputs(S, "select_rows", &[a.clone()], |g, v| g.select_rows(v[0], &[2, 0, 2]), false)?);
    out.push(check_inputs(S, "transpose", &[a.clone()], |g, v| g.transpose(v[0]), false)?);
    out.push(check_inputs(
        S,
        "concat_cols",
        &[a.clone(), c.clone()],
        |g, v| g.concat_cols(&[v[0], v[1]]),
        false,
    )?);
    out.push(check_inputs(S, "gelu", &[a.clone()], |g, v| Ok(g.gelu(v[0])), false)?);
    out.push(check_inputs(S, "sigmoid", &[a.clone()], |g, v| Ok(g.sigmoid(v[0])), false)?);
    // keep away from the kinks at 0 and at the clamp bounds
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    out.push(check_inputs(S, "relu", &[away.clone()], |g, v| Ok(g.relu(v[0])), false)?);
    out.push(check_inputs(S, "abs", &[away.clone()], |g, v| Ok(g.abs(v[0])), false)?);
    let inside = away.map(|x| if (x - 1.0).abs() < 0.05 { x + 0.1 } else { x });
    out.push(check_inputs(S, "clamp", &[inside], |g, v| Ok(g.clamp(v[0], -1.0, 1.0)), false)?);
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    out.push(check_inputs(
        S,
        "softmax_lastdim",
        &[a.clone()],
        move |g, v| g.softmax(v[0], Some(mask.clone())),
        false,
    )?);
    let (gamma, beta) = (rand_t(&mut rng, &[4]), rand_t(&mut rng, &[4]));
    out.push(check_inputs(
        S,
        "layer_norm",
        &[a.clone(), gamma, beta],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        false,
    )?);
    out.push(check_inputs(S, "sum", &[a], |g, v| Ok(g.sum(v[0])), false)?);
    Ok(out)
}

fn small_taa(window: usize, shift: usize, shift_mode: ShiftMode, fusion_mode: FusionMode, scale: ScoreScale) -> TaaConfig {
    TaaConfig {
        model_dim: 8,
        heads: 2,
        window,
        shift_size: shift,
        shift_mode,
        fusion_mode,
        score_scale: scale,
        cosine_weights: true,
    }
}

/// The attention block: windowed attention, both shifts, and every fusion mode.
pub fn taa_suite(opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    const S: &str = "taa";
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut out = Vec::new();
    for scale in [ScoreScale::SqrtT, ScoreScale::SqrtDh] {
        let cfg = small_taa(3, 3, ShiftMode::Bidirectional, FusionMode::AlphaComplement, scale);
        let qkv: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, &[12, 8])).collect();
        out.push(check_inputs(
            S,
            format!("gpa_forward/{scale:?}"),
            &qkv,
            |g, v| taa::gpa_var(g, v[0], v[1], v[2], &cfg),
            opts.inject_sign_flip,
        )?);
    }
    for mode in [ShiftMode::General, ShiftMode::Bidirectional] {
        let x = rand_t(&mut rng, &[8, 8]);
        out.push(check_inputs(
            S,
            format!("temporal_shift/{mode:?}"),
            &[x.clone()],
            |g, v| taa::temporal_shift_var(g, v[0], 4, 3, mode),
            false,
        )?);
        out.push(check_inputs(
            S,
            format!("channel_shift/{mode:?}"),
            &[x.clone()],
            |g, v| taa::channel_shift_var(g, v[0], 4, 3, mode),
            false,
        )?);
        out.push(check_inputs(
            S,
            format!("lcs_forward/{mode:?}"),
            &[x],
            |g, v| taa::lcs_var(g, v[0], 4, 3, mode),
            false,
        )?);
    }
    for t in [8, 16] {
        for mode in [ShiftMode::General, ShiftMode::Bidirectional] {
            for fusion in FusionMode::ALL {
                let cfg = small_taa(3, 3, mode, fusion, ScoreScale::SqrtT);
                let mut store = ParamStore::new();
                let params = TaaParams::new(&mut store, "taa", &cfg, &mut rng);
                if let Some(a2) = params.fusion.alpha2 {
                    store.get_mut(a2).data_mut()[0] = 0.8;
                }
                store.get_mut(params.fusion.alpha).data_mut()[0] = 0.3;
                let x = store.add("input", rand_t(&mut rng, &[t, 8]));
                out.push(check_params(
                    S,
                    format!("taa_forward/T{t}/{mode:?}/{fusion:?}"),
                    &store,
                    |g, s| {
                        let xv = g.param(s, x);
                        taa::taa_forward(g, s, xv, &params, &cfg)
                    },
                    false,
                )?);
            }
        }
    }
    Ok(out)
}

/// A fixed ground truth and assignment for loss-level checks.
fn loss_fixture(model: &Model, features: &Tensor) -> Result<(Vec<GtSegment>, matching::MatchResult)> {
    let gts = vec![
        GtSegment {
            segment: Segment::new(0.15, 0.45),
            label: 1,
        },
        GtSegment {
            segment: Segment::new(0.55, 0.9),
            label: 0,
        },
    ];
    let preds = model.predict(features)?;
    let m = matching::assign(&preds, &gts, CostWeights::default())?;
    Ok((gts, m))
}

/// Encoder layer, decoder layer, and the full network under the training loss.
pub fn model_suite(opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    const S: &str = "model";
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut out = Vec::new();
    let cfg = ModelConfig::tiny(4, 3);

    // encoder layer, T = 8
    let model = Model::new(cfg, opts.seed)?;
    let layer = model.encoder_layers()[0];
    let mut store = model.params().clone();
    let x = store.add("input", rand_t(&mut rng, &[8, 8]));
    let m = model.clone();
    out.push(check_params(
        S,
        "encoder_layer",
        &store,
        |g, s| {
            let mut mm = m.clone();
            *mm.params_mut() = s.clone();
            let xv = g.param(s, x);
            mm.encoder_layer(g, &layer, xv)
        },
        opts.inject_sign_flip,
    )?);

    // decoder layer, N_q = 4, T = 8
    let layer = model.decoder_layers()[0];
    let mut store = model.params().clone();
    let q = store.add("queries_in", rand_t(&mut rng, &[4, 8]));
    let mem = store.add("memory", rand_t(&mut rng, &[8, 8]));
    out.push(check_params(
        S,
        "decoder_layer",
        &store,
        |g, s| {
            let mut mm = m.clone();
            *mm.params_mut() = s.clone();
            let (qv, mv) = (g.param(s, q), g.param(s, mem));
            mm.decoder_layer(g, &layer, qv, mv)
        },
        false,
    )?);

    // full model under the set-prediction loss, match held fixed
    let features = rand_t(&mut rng, &[8, 4]);
    let (gts, assignment) = loss_fixture(&model, &features)?;
    let loss_cfg = LossConfig::default();
    out.push(check_params(
        S,
        "model_forward+total_loss",
        model.params(),
        |g, s| {
            let mut mm = m.clone();
            *mm.params_mut() = s.clone();
            let o = mm.forward(g, &features)?;
            Ok(matching::total_loss_var(g, o.logits, o.boundaries, &gts, &assignment, &loss_cfg)?.0)
        },
        false,
    )?);

    // ReLU in the transformer MLPs
    let relu_cfg = ModelConfig {
        activation: Activation::Relu,
        ..cfg
    };
    let rm = Model::new(relu_cfg, opts.seed.wrapping_add(7))?;
    let layer = rm.encoder_layers()[1];
    let mut store = rm.params().clone();
    let x = store.add("input", rand_t(&mut rng, &[8, 8]));
    out.push(check_params(
        S,
        "encoder_layer/relu",
        &store,
        |g, s| {
            let mut mm = rm.clone();
            *mm.params_mut() = s.clone();
            let xv = g.param(s, x);
            mm.encoder_layer(g, &layer, xv)
        },
        false,
    )?);

    // anchored queries, positional cross keys and the locality prior
    let local_cfg = ModelConfig {
        position_span: Some(16.0),
        cross_positions: true,
        anchored_queries: true,
        query_locality: true,
        ..cfg
    };
    let lm = Model::new(local_cfg, opts.seed.wrapping_add(11))?;
    let features = rand_t(&mut rng, &[8, 4]);
    let (gts, assignment) = loss_fixture(&lm, &features)?;
    out.push(check_params(
        S,
        "model_forward+total_loss/local",
        lm.params(),
        |g, s| {
            let mut mm = lm.clone();
            *mm.params_mut() = s.clone();
            let o = mm.forward(g, &features)?;
            Ok(matching::total_loss_var(g, o.logits, o.boundaries, &gts, &assignment, &loss_cfg)?.0)
        },
        false,
    )?);
    Ok(out)
}

/// The loss and its components with the assignment held fixed.
pub fn matching_suite(opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    const S: &str = "matching";
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let mut out = Vec::new();
    let logits = rand_t(&mut rng, &[4, 3]);
    let targets = [Some(1), None, Some(0), None];
    out.push(check_inputs(
        S,
        "focal_loss",
        &[logits.clone()],
        |g, v| matching::focal_loss_var(g, v[0], &targets, FocalParams::default()),
        opts.inject_sign_flip,
    )?);
    let a = Tensor::new(vec![3, 2], vec![0.1, 0.5, 0.3, 0.6, 0.05, 0.2])?;
    let b = Tensor::new(vec![3, 2], vec![0.2, 0.4, 0.7, 0.95, 0.3, 0.9])?;
    out.push(check_inputs(S, "diou", &[a, b], |g, v| matching::diou_var(g, v[0], v[1]), false)?);

    let bounds = Tensor::new(vec![4, 2], vec![0.12, 0.4, 0.5, 0.8, 0.3, 0.55, 0.62, 0.91])?;
    let gts = [
        GtSegment {
            segment: Segment::new(0.1, 0.35),
            label: 2,
        },
        GtSegment {
            segment: Segment::new(0.6, 0.85),
            label: 0,
        },
    ];
    let assignment = matching::MatchResult {
        pairs: vec![(0, 0), (3, 1)],
        unmatched: vec![1, 2],
    };
    for lambda in [1.0, 2.5] {
        let cfg = LossConfig {
            lambda,
            ..LossConfig::default()
        };
        out.push(check_inputs(
            S,
            format!("total_loss/lambda{lambda}"),
            &[logits.clone(), bounds.clone()],
            |g, v| Ok(matching::total_loss_var(g, v[0], v[1], &gts, &assignment, &cfg)?.0),
            false,
        )?);
    }
    Ok(out)
}

/// All suites in a fixed order.
pub fn run_all(opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut all = tensor_core_suite(opts)?;
    all.extend(taa_suite(opts)?);
    all.extend(model_suite(opts)?);
    all.extend(matching_suite(opts)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let p = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let g = finite_diff_grad(|t| t.sum(), &p, DEFAULT_STEP);
        assert!(g.max_abs_diff(&Tensor::ones(&[2, 2])) < 1e-9);
    }

    #[test]
    fn squared_norm_gives_twice_input() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.dot(t).unwrap(), &p, DEFAULT_STEP);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_cross_entropy_matches_analytic() {
        // d/dz [-log softmax(z)_y] = softmax(z) - onehot(y)
        let z = Tensor::new(vec![4], vec![0.2, -1.3, 0.7, 2.1]).unwrap();
        let y = 2;
        let loss = |t: &Tensor| -t.softmax_lastdim(None).unwrap().data()[y].ln();
        let numeric = finite_diff_grad(loss, &z, DEFAULT_STEP);
        let mut analytic = z.softmax_lastdim(None).unwrap();
        analytic.data_mut()[y] -= 1.0;
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn all_suites_pass() {
        let results = run_all(SuiteOptions::default()).unwrap();
        for r in &results {
            assert!(r.passed(), "{} {} {:e}", r.suite, r.name, r.max_rel_error);
        }
        for suite in ["tensor-core", "taa", "model", "matching"] {
            assert!(results.iter().any(|r| r.suite == suite));
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        let opts = SuiteOptions {
            inject_sign_flip: true,
            ..SuiteOptions::default()
        };
        let results = run_all(opts).unwrap();
        assert!(results.iter().any(|r| !r.passed()));
    }
}
