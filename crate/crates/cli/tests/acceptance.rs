//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Run with `cargo test -p taloc-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taloc_cli::run;
use taloc_core::eval::{average_precision, map_suite, Detection, DetectionSet, GroundTruthSet};
use taloc_core::gradcheck::{self, SuiteOptions};
use taloc_core::matching::{self, hungarian_match, CostWeights, FocalParams, GtSegment, LossConfig, Prediction, Segment};
use taloc_core::taa::{self, ShiftMode, TaaConfig};
use taloc_core::Tensor;

// Tolerances and sizes fixed by the acceptance criteria.
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 60.0;
const DENSE_TOL: f64 = 1e-9;
const DENSE_SEEDS: u64 = 50;
const DENSE_MAX_T: usize = 16;
const SHIFT_TENSORS: usize = 100;
const MATCH_TRIALS: usize = 1000;
const MATCH_MAX: usize = 6;
const LOSS_TOL: f64 = 1e-12;
const EVAL_SETS: u64 = 100;
const LOSS_RATIO: f64 = 0.5;
const MIN_VAL_MAP: f64 = 0.5;
const TRAIN_BUDGET_S: f64 = 15.0 * 60.0;
const ABLATION_EPOCHS: &str = "3";

/// Optimizer settings of the desk-scale run. The architecture is the default one.
const DESK_TRAIN_FLAGS: &[&str] = &["--lr", "3e-3", "--lambda", "0.2", "--batch-size", "1"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn taloc(args: &[&str]) -> i32 {
    let mut v = vec!["taloc"];
    v.extend_from_slice(args);
    run(v)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = match gradcheck::run_all(SuiteOptions::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| r.max_rel_error >= GRAD_TOL)
        .map(|r| r.name.as_str())
        .collect();
    let has_model = results.iter().any(|r| r.suite == "model" && r.name.contains("loss"));
    outcome(
        failing.is_empty() && has_model && secs < GRAD_BUDGET_S,
        format!("{} checks, worst rel err {worst:.2e}, {secs:.1}s, failing {failing:?}", results.len()),
    )
}

fn dense_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..DENSE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.gen_range(1..=DENSE_MAX_T);
        let heads = rng.gen_range(1..=4);
        let cfg = TaaConfig {
            model_dim: heads * rng.gen_range(1..=4),
            heads,
            window: 2 * t - 1,
            cosine_weights: false,
            ..TaaConfig::default()
        };
        let [q, k, v] = [(); 3].map(|_| Tensor::uniform(&[t, cfg.model_dim], -2.0, 2.0, &mut rng));
        let (a, _) = taa::gpa_forward(&q, &k, &v, &cfg).expect("windowed");
        let (b, _) = taa::dense_attention(&q, &k, &v, &cfg).expect("dense");
        worst = worst.max(a.max_abs_diff(&b));
    }
    outcome(worst <= DENSE_TOL, format!("{DENSE_SEEDS} seeds, max |diff| {worst:.2e}"))
}

/// Keys attended per head, counted straight from the window definition.
fn brute_force_count(t: usize, w: usize) -> usize {
    let h = (w as isize - 1) / 2;
    let mut n = 0;
    for i in 0..t as isize {
        for anchor in [i - w as isize, i, i + w as isize] {
            if (0..t as isize).contains(&anchor) {
                n += (anchor - h..=anchor + h).filter(|p| (0..t as isize).contains(p)).count();
            }
        }
    }
    n
}

fn complexity() -> Outcome {
    let (w, heads) = (5usize, 4usize);
    let half = (w - 1) / 2;
    let deficit = 2 * (w * w + half * (half + 1));
    let mut ok = true;
    let mut counts = Vec::new();
    for t in [128usize, 256, 512] {
        let cfg = TaaConfig {
            model_dim: 4 * heads,
            heads,
            window: w,
            ..TaaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let [q, k, v] = [(); 3].map(|_| Tensor::uniform(&[t, cfg.model_dim], -1.0, 1.0, &mut rng));
        let (_, ws) = taa::gpa_forward(&q, &k, &v, &cfg).expect("windowed");
        let (_, ds) = taa::dense_attention(&q, &k, &v, &cfg).expect("dense");
        let per_head = ws.qk_products / heads;
        ok &= ws.qk_products % heads == 0;
        ok &= per_head == t * 3 * w - deficit;
        ok &= per_head == brute_force_count(t, w);
        ok &= per_head == taa::window_products_per_head(t, w);
        ok &= ds.qk_products / heads == t * t;
        counts.push((t, per_head));
    }
    let interior = 512 * 3 * w;
    ok &= interior == 7_680 && 512 * 512 == 262_144;
    // linear: equal increments per added step
    let slope = |a: (usize, usize), b: (usize, usize)| (b.1 - a.1) as f64 / (b.0 - a.0) as f64;
    ok &= slope(counts[0], counts[1]) == (3 * w) as f64 && slope(counts[1], counts[2]) == (3 * w) as f64;
    ok &= (512 * 512) as f64 / interior as f64 == 512.0 / (3 * w) as f64;
    outcome(
        ok,
        format!("per head {counts:?}, deficit {deficit}, interior 512*15 = {interior} vs dense 262144"),
    )
}

fn offset(i: usize, s: usize, mode: ShiftMode) -> isize {
    let r = (i % s) as isize;
    match mode {
        ShiftMode::General => r,
        ShiftMode::Bidirectional => r - (s as isize - 1) / 2,
    }
}

fn shift_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    for n in 0..SHIFT_TENSORS {
        let t = rng.gen_range(1..=32);
        let heads = rng.gen_range(1..=4);
        let dh = rng.gen_range(1..=16);
        let x = Tensor::uniform(&[t, heads * dh], -1.0, 1.0, &mut rng);
        for s in [3usize, 7, 9] {
            for mode in [ShiftMode::General, ShiftMode::Bidirectional] {
                cases += 1;
                let ts = taa::temporal_shift(&x, dh, s, mode);
                let cs = taa::channel_shift(&x, dh, s, mode);
                let mut want_t = vec![0.0; t * heads * dh];
                let mut want_c = vec![0.0; t * heads * dh];
                for i in 0..t {
                    for h in 0..heads {
                        for d in 0..dh {
                            let c = h * dh + d;
                            let src_t = i as isize - offset(d, s, mode);
                            if (0..t as isize).contains(&src_t) {
                                want_t[i * heads * dh + c] = x.at(src_t as usize, c);
                            }
                            let src_d = d as isize - offset(i, s, mode);
                            if (0..dh as isize).contains(&src_d) {
                                want_c[i * heads * dh + c] = x.at(i, h * dh + src_d as usize);
                            }
                        }
                    }
                }
                mismatches += (ts.data() != want_t.as_slice()) as usize;
                mismatches += (cs.data() != want_c.as_slice()) as usize;
            }
        }
        let _ = n;
    }
    outcome(mismatches == 0, format!("{cases} tensor/mode/size cases, {mismatches} mismatches"))
}

fn brute_force_min(cost: &Tensor) -> f64 {
    fn rec(g: usize, cost: &Tensor, used: &mut [bool], acc: f64, best: &mut f64) {
        if g == cost.cols() {
            *best = best.min(acc);
            return;
        }
        for p in 0..cost.rows() {
            if !used[p] {
                used[p] = true;
                rec(g + 1, cost, used, acc + cost.at(p, g), best);
                used[p] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, cost, &mut vec![false; cost.rows()], 0.0, &mut best);
    best
}

fn matching_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for _ in 0..MATCH_TRIALS {
        let gts = rng.gen_range(1..=MATCH_MAX);
        let preds = rng.gen_range(gts..=MATCH_MAX);
        // integer costs keep every sum exact
        let data = (0..preds * gts).map(|_| rng.gen_range(-50..50) as f64).collect();
        let cost = Tensor::new(vec![preds, gts], data).expect("shape");
        let m = hungarian_match(&cost).expect("feasible");
        bad += (m.total_cost(&cost) != brute_force_min(&cost)) as usize;
    }
    outcome(bad == 0, format!("{MATCH_TRIALS} matrices up to {MATCH_MAX}x{MATCH_MAX}, {bad} suboptimal"))
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn loss_fixture() -> Outcome {
    let gts = [GtSegment {
        segment: Segment::new(0.2, 0.6),
        label: 0,
    }];
    let preds = [
        Prediction {
            segment: Segment::new(0.3, 0.6),
            class_logits: vec![0.0, -2.0],
        },
        Prediction {
            segment: Segment::new(0.0, 1.0),
            class_logits: vec![1.0, 0.5],
        },
    ];
    let m = matching::assign(&preds, &gts, CostWeights::default()).expect("assign");
    let cfg = LossConfig::default();
    let got = matching::total_loss(&preds, &gts, &m, &cfg).expect("loss");

    // Query 0: IoU 0.3 / 0.4, centers 0.45 and 0.40, enclosing 0.4.
    let diou0 = 0.75 - 0.05f64.powi(2) / 0.4f64.powi(2);
    // Its class-0 logit is 0, the closed-form focal case.
    let pos = 0.25 * 0.25 * 2f64.ln();
    let neg = |x: f64| 0.75 * sig(x).powi(2) * (1.0 + x.exp()).ln();
    let cls = (pos + neg(-2.0) + neg(1.0) + neg(0.5)) / 2.0;
    let reg = 1.0 - diou0;
    let l1 = 0.1;
    let total = cls + reg + l1;
    let focal_closed = (matching::focal_loss(&[0.0], Some(0), FocalParams::default()) - pos).abs();

    let errs = [
        (got.cls - cls).abs(),
        (got.reg - reg).abs(),
        (got.l1 - l1).abs(),
        (got.total - total).abs(),
        focal_closed,
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(
        m.pairs == vec![(0, 0)] && worst <= LOSS_TOL,
        format!(
            "cls {:.15} reg {:.15} l1 {:.15} total {:.15}, worst |err| {worst:.1e}",
            got.cls, got.reg, got.l1, got.total
        ),
    )
}

fn random_eval_case(seed: u64) -> (DetectionSet, GroundTruthSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (mut dets, mut gts) = (DetectionSet::new(), GroundTruthSet::new());
    for v in 0..rng.gen_range(1..=4) {
        let g: Vec<GtSegment> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let a = rng.gen_range(0.0..90.0);
                GtSegment {
                    segment: Segment::new(a, a + rng.gen_range(1.0..15.0)),
                    label: rng.gen_range(0..3),
                }
            })
            .collect();
        let mut d: Vec<Detection> = (0..rng.gen_range(0..10))
            .map(|_| {
                let a = rng.gen_range(0.0..90.0);
                Detection {
                    segment: Segment::new(a, a + rng.gen_range(1.0..15.0)),
                    label: rng.gen_range(0..3),
                    score: rng.gen_range(0..128) as f64 / 128.0,
                }
            })
            .collect();
        for gt in &g {
            if rng.gen_bool(0.7) {
                let jitter = rng.gen_range(-2.0..2.0);
                d.push(Detection {
                    segment: gt.segment.shifted(jitter),
                    label: gt.label,
                    score: rng.gen_range(0..128) as f64 / 128.0,
                });
            }
        }
        dets.insert(format!("v{v}"), d);
        gts.insert(format!("v{v}"), g);
    }
    (dets, gts)
}

fn evaluator_fixtures() -> Outcome {
    let grid = [0.3, 0.4, 0.5, 0.6, 0.7];
    let ap = average_precision(&[true, false, true], 2);
    let mut ok = ap == Some(5.0 / 6.0);

    let mut gts = GroundTruthSet::new();
    let mut dets = DetectionSet::new();
    for v in 0..3 {
        let g: Vec<GtSegment> = (0..3)
            .map(|i| GtSegment {
                segment: Segment::new(10.0 * i as f64 + v as f64, 10.0 * i as f64 + v as f64 + 5.0),
                label: (i + v) % 3,
            })
            .collect();
        dets.insert(
            format!("v{v}"),
            g.iter()
                .map(|g| Detection {
                    segment: g.segment,
                    label: g.label,
                    score: 0.9,
                })
                .collect(),
        );
        gts.insert(format!("v{v}"), g);
    }
    let perfect = map_suite(&dets, &gts, &grid).expect("report");
    ok &= perfect.thresholds.iter().all(|t| t.map == 1.0) && perfect.average_map == 1.0;

    let (mut monotone, mut invariant) = (0, 0);
    for seed in 0..EVAL_SETS {
        let (d, g) = random_eval_case(seed);
        let r = map_suite(&d, &g, &grid).expect("report");
        monotone += r.thresholds.windows(2).all(|w| w[1].map <= w[0].map) as u64;
        let shifted: DetectionSet = d
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| Detection { score: x.score + 3.0, ..*x }).collect()))
            .collect();
        invariant += (map_suite(&shifted, &g, &grid).expect("report") == r) as u64;
    }
    ok &= monotone == EVAL_SETS && invariant == EVAL_SETS;
    outcome(
        ok,
        format!(
            "AP fixture {ap:?}, perfect mAP {:.1}, monotone {monotone}/{EVAL_SETS}, shift-invariant {invariant}/{EVAL_SETS}",
            perfect.average_map
        ),
    )
}

fn read_log(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .expect("training log")
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn desk_training(root: &Path) -> Outcome {
    let data = root.join("data");
    // 62 videos; the trainer holds out 20%, giving 50 / 12.
    if taloc(&["synth", "--out", s(&data), "--videos", "62", "--classes", "5", "--seed", "7"]) != 0 {
        return outcome(false, "synth failed");
    }
    let start = Instant::now();
    let run1 = root.join("run1");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run1), "--epochs", "30", "--seed", "0"];
    args.extend_from_slice(DESK_TRAIN_FLAGS);
    if taloc(&args) != 0 {
        return outcome(false, "training failed");
    }
    let secs = start.elapsed().as_secs_f64();
    let log = read_log(&run1.join("train_log.ndjson"));
    let first = log[0]["loss"].as_f64().unwrap();
    let last = log[log.len() - 1]["loss"].as_f64().unwrap();
    let final_val = log[log.len() - 1]["val_map"].as_f64().unwrap();

    let ev = root.join("eval");
    let code = taloc(&[
        "eval", "--checkpoint", s(&run1.join("checkpoint.apf")), "--data", s(&data), "--out", s(&ev), "--split",
        "val", "--seed", "0", "--thresholds", "0.3:0.1:0.7",
    ]);
    if code != 0 {
        return outcome(false, "eval failed");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let val_map = report["average_map"].as_f64().unwrap();

    let run2 = root.join("run2");
    let replay_ok = taloc(&["train", "--config", s(&run1.join("manifest.json")), "--out", s(&run2)]) == 0
        && ["checkpoint.apf", "train_log.ndjson"]
            .iter()
            .all(|f| fs::read(run1.join(f)).ok() == fs::read(run2.join(f)).ok());

    let (a, b, c) = (last < LOSS_RATIO * first, val_map >= MIN_VAL_MAP, replay_ok);
    outcome(
        a && b && c && secs < TRAIN_BUDGET_S,
        format!(
            "(a) loss {first:.4} -> {last:.4} [{}] (b) val mAP {val_map:.4} (final epoch {final_val:.4}) [{}] (c) replay [{}], {secs:.0}s",
            if a { "ok" } else { "fail" },
            if b { "ok" } else { "fail" },
            if c { "ok" } else { "fail" },
        ),
    )
}

fn ablations(root: &Path) -> Outcome {
    let data = root.join("data");
    let families: [(&str, &[&str]); 3] = [
        ("--fusion", &["fixed11", "alpha-right", "alpha-left", "alpha-complement", "two-alphas"]),
        ("--shift-mode", &["gs", "bs"]),
        ("--window", &["3", "5", "7"]),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (flag, values) in families {
        let mut ckpts: Vec<Vec<u8>> = Vec::new();
        for v in values {
            let out = root.join(format!("abl{flag}{v}"));
            let mut args = vec![
                "train", "--data", s(&data), "--out", s(&out), "--epochs", ABLATION_EPOCHS, "--warmup", "1", "--seed",
                "0", flag, v,
            ];
            args.extend_from_slice(DESK_TRAIN_FLAGS);
            let code = taloc(&args);
            if code != 0 {
                ok = false;
                notes.push(format!("{flag} {v}: exit {code}"));
                continue;
            }
            let finite = read_log(&out.join("train_log.ndjson"))
                .iter()
                .all(|r| r["loss"].as_f64().is_some_and(f64::is_finite));
            ok &= finite;
            ckpts.push(fs::read(out.join("checkpoint.apf")).unwrap());
        }
        let distinct = (0..ckpts.len()).all(|i| (i + 1..ckpts.len()).all(|j| ckpts[i] != ckpts[j]));
        ok &= distinct && ckpts.len() == values.len();
        notes.push(format!("{flag}: {} runs, distinct {distinct}", ckpts.len()));
    }
    outcome(ok, notes.join("; "))
}

fn main() -> ExitCode {
    let root = tempfile::TempDir::new().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("attention equivalence", Box::new(dense_equivalence)),
        ("complexity counts", Box::new(complexity)),
        ("shift oracles", Box::new(shift_oracles)),
        ("matching optimality", Box::new(matching_optimality)),
        ("loss fixture", Box::new(loss_fixture)),
        ("evaluator fixtures", Box::new(evaluator_fixtures)),
        ("desk-scale training", Box::new(|| desk_training(root.path()))),
        ("ablation knobs", Box::new(|| ablations(root.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += !o.pass as usize;
        println!("criterion {} {:<22} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
