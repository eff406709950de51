use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use taloc_core::data::{self, Dataset, SignatureMode, SynthSpec};
use taloc_core::eval::{self, DetectionSet};
use taloc_core::gradcheck::{self, CheckResult, SuiteOptions};
use taloc_core::model::{Model, ModelConfig};
use taloc_core::taa::{self, TaaConfig};
use taloc_core::trainer::{self, TrainConfig, TrainOutputs};
use taloc_core::Tensor;

use crate::manifest::{layered, read_config, ConfigFile, RunManifest, MANIFEST_FILE};
use crate::{BenchArgs, CheckFailed, Cli, Command, EvalArgs, GradcheckArgs, ModelArgs, SignatureArg, Split, SynthArgs, TrainArgs, UsageError};

pub const CHECKPOINT_FILE: &str = "checkpoint.apf";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const REPORT_FILE: &str = "report.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

pub fn dispatch(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    if cli.jobs == Some(0) {
        bail!(UsageError("--jobs must be at least 1".into()));
    }
    let name = command_name(&cli.command);
    let file = cli.config.as_deref().map(|p| read_config(p, name)).transpose()?;
    let seed = cli.seed.or(file.as_ref().and_then(|f| f.seed));
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(a, seed, file.as_ref()),
        Command::Train(a) => train(a, seed, file.as_ref()),
        Command::Eval(a) => evaluate(a, seed, file.as_ref()),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Bench(a) => bench(a, seed),
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Gradcheck(_) => "gradcheck",
        Command::Bench(_) => "bench",
    }
}

fn usage(e: taloc_core::Error) -> anyhow::Error {
    match e {
        taloc_core::Error::Config(m) => UsageError(m).into(),
        other => other.into(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| UsageError(format!("cannot create {}: {e}", dir.display())).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn synth(a: SynthArgs, seed: Option<u64>, file: Option<&ConfigFile>) -> Result<()> {
    let mut spec: SynthSpec = layered(SynthSpec::default(), file)?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { spec.$field = v; })*};
    }
    set!(videos => num_videos, classes => num_classes, min_steps => min_steps, max_steps => max_steps,
        min_segments => min_segments, max_segments => max_segments,
        min_segment_steps => min_segment_steps, max_segment_steps => max_segment_steps,
        feature_dim => feature_dim, noise => noise_std);
    if let Some(s) = a.signature {
        spec.signature = match s {
            SignatureArg::Basis => SignatureMode::Basis,
            SignatureArg::Rotated => SignatureMode::Rotated,
        };
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(usage)?;
    let ds = data::synth_generate(&spec).map_err(usage)?;
    create_dir(&a.out)?;
    let artifacts = ds.write_dir(&a.out)?;
    RunManifest::new("synth", spec.seed, &spec, artifacts)?.write(&a.out.join(MANIFEST_FILE))?;
    let segments: usize = ds.annotations.videos.values().map(|v| v.annotations.len()).sum();
    println!(
        "videos {}  segments {}  classes {}  feature_dim {}",
        ds.len(),
        segments,
        spec.num_classes,
        spec.feature_dim
    );
    Ok(())
}

/// Class count of a dataset directory: from its `synth` manifest when present,
/// else one more than the largest label.
pub fn dataset_classes(dir: &Path) -> Result<usize> {
    let m = dir.join(MANIFEST_FILE);
    if m.exists() {
        if let Ok(man) = RunManifest::read(&m) {
            if let Some(k) = man.config.get("num_classes").and_then(|v| v.as_u64()) {
                return Ok(k as usize);
            }
        }
    }
    let set = data::read_annotations(dir.join(ANNOTATIONS_FILE), None)?;
    let max = set.videos.values().flat_map(|v| v.annotations.iter().map(|a| a.label)).max();
    max.map(|m| m + 1)
        .ok_or_else(|| UsageError(format!("{}: no annotated segments", dir.display())).into())
}

fn load_dataset(dir: &Path, classes: usize) -> Result<Dataset> {
    if !dir.is_dir() {
        bail!(UsageError(format!("dataset directory {} does not exist", dir.display())));
    }
    Dataset::read_dir(dir, Some(classes)).map_err(usage)
}

fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        bail!(UsageError(format!("val_fraction must lie in [0, 1), got {fraction}")));
    }
    let (tr, va) = data::split_indices(ds.len(), fraction, seed);
    Ok((ds.subset(&tr), ds.subset(&va)))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Resolved settings of a `train` run, stored in its manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub data: Option<PathBuf>,
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            data: None,
            val_fraction: DEFAULT_VAL_FRACTION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub fn apply_model_args(cfg: &mut ModelConfig, a: &ModelArgs) {
    if let Some(w) = a.window {
        *cfg = cfg.with_window(w);
    }
    if let Some(s) = a.shift_enc {
        cfg.encoder_taa.shift_size = s;
    }
    if let Some(s) = a.shift_dec {
        cfg.decoder_taa.shift_size = s;
    }
    if let Some(m) = a.shift_mode {
        *cfg = cfg.with_shift_mode(m.into());
    }
    if let Some(f) = a.fusion {
        *cfg = cfg.with_fusion(f.into());
    }
    if let Some(s) = a.score_scale {
        *cfg = cfg.with_score_scale(s.into());
    }
    if let Some(d) = a.model_dim {
        cfg.model_dim = d;
        cfg.encoder_taa.model_dim = d;
        cfg.decoder_taa.model_dim = d;
    }
    if let Some(h) = a.heads {
        cfg.encoder_taa.heads = h;
        cfg.decoder_taa.heads = h;
    }
    if let Some(n) = a.encoder_layers {
        cfg.encoder_layers = n;
    }
    if let Some(n) = a.decoder_layers {
        cfg.decoder_layers = n;
    }
    if let Some(q) = a.queries {
        cfg.queries = q;
    }
}

pub fn train(a: TrainArgs, seed: Option<u64>, file: Option<&ConfigFile>) -> Result<()> {
    let mut s: TrainSettings = layered(TrainSettings::default(), file)?;
    if a.data.is_some() {
        s.data = a.data.clone();
    }
    let t = &mut s.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.warmup {
        t.warmup_epochs = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.wd {
        t.weight_decay = v;
    }
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.clip {
        t.grad_clip = (v > 0.0).then_some(v);
    }
    if let Some(v) = seed {
        t.seed = v;
    }
    if let Some(v) = a.val_fraction {
        s.val_fraction = v;
    }
    apply_model_args(&mut s.model, &a.model);
    s.train.validate().map_err(usage)?;

    let Some(dir) = s.data.clone() else {
        bail!(UsageError("--data is required".into()));
    };
    let classes = dataset_classes(&dir)?;
    let ds = load_dataset(&dir, classes)?;
    s.model.input_dim = ds.feature_dim();
    s.model.classes = classes;
    s.model.validate().map_err(usage)?;
    let (tr, va) = split(&ds, s.val_fraction, s.train.seed)?;
    info!("training on {} videos, validating on {}", tr.len(), va.len());

    create_dir(&a.out)?;
    let outputs = TrainOutputs {
        log: Some(a.out.join(LOG_FILE)),
        checkpoint: Some(a.out.join(CHECKPOINT_FILE)),
    };
    let mut model = Model::new(s.model, s.train.seed).map_err(usage)?;
    let val = (!va.is_empty()).then_some(&va);
    let summary = trainer::train_loop(&mut model, &tr, val, &s.train, &outputs)?;

    let artifacts = vec![a.out.join(CHECKPOINT_FILE), a.out.join(LOG_FILE)];
    RunManifest::new("train", s.train.seed, &s, artifacts)?.write(&a.out.join(MANIFEST_FILE))?;
    let (first, last) = (&summary.records[0], summary.records.last().expect("epochs >= 1"));
    println!("epochs {}  loss {:.4} -> {:.4}", summary.records.len(), first.loss, last.loss);
    match summary.best_val_map {
        Some(m) => println!("best epoch {}  val mAP {:.4}", summary.best_epoch, m),
        None => println!("no validation split; kept epoch {}", summary.best_epoch),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub thresholds: Vec<f64>,
    pub nms: Option<f64>,
    pub split: Split,
    pub val_fraction: f64,
    /// Seed of the train/validation partition.
    pub split_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            thresholds: TrainConfig::default().thresholds,
            nms: None,
            split: Split::All,
            val_fraction: DEFAULT_VAL_FRACTION,
            split_seed: 0,
        }
    }
}

/// Model config from a JSON file holding either a bare config or a `train` manifest.
fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = v.get("config").and_then(|c| c.get("model")).cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| UsageError(format!("{}: not a model config: {e}", path.display())).into())
}

pub fn evaluate(a: EvalArgs, seed: Option<u64>, file: Option<&ConfigFile>) -> Result<()> {
    let mut s: EvalSettings = layered(EvalSettings::default(), file)?;
    if a.checkpoint.is_some() {
        s.checkpoint = a.checkpoint.clone();
    }
    if a.data.is_some() {
        s.data = a.data.clone();
    }
    if let Some(t) = &a.thresholds {
        s.thresholds = eval::parse_thresholds(t).map_err(usage)?;
    }
    if a.nms.is_some() {
        s.nms = a.nms;
    }
    if let Some(sp) = a.split {
        s.split = sp;
    }
    if let Some(f) = a.val_fraction {
        s.val_fraction = f;
    }
    if let Some(v) = seed {
        s.split_seed = v;
    }
    let Some(ckpt) = s.checkpoint.clone() else {
        bail!(UsageError("--checkpoint is required".into()));
    };
    let Some(dir) = s.data.clone() else {
        bail!(UsageError("--data is required".into()));
    };
    if !ckpt.is_file() {
        bail!(UsageError(format!("checkpoint {} does not exist", ckpt.display())));
    }

    let mut model = Model::load(&ckpt)?;
    if a.model_config.is_some() || !a.model.is_empty() {
        let mut expected = match &a.model_config {
            Some(p) => read_model_config(p)?,
            None => *model.config(),
        };
        apply_model_args(&mut expected, &a.model);
        model = Model::load_with_config(&ckpt, &expected)?;
    }
    let cfg = *model.config();
    let ds = load_dataset(&dir, cfg.classes)?;
    if ds.feature_dim() != cfg.input_dim {
        bail!(UsageError(format!(
            "checkpoint does not match configuration: field `input_dim` differs (checkpoint {}, dataset {})",
            cfg.input_dim,
            ds.feature_dim()
        )));
    }
    let ds = match s.split {
        Split::All => ds,
        Split::Train => split(&ds, s.val_fraction, s.split_seed)?.0,
        Split::Val => split(&ds, s.val_fraction, s.split_seed)?.1,
    };
    if ds.is_empty() {
        bail!(UsageError("the selected split is empty".into()));
    }

    let mut dets: DetectionSet = trainer::detect(&model, &ds)?;
    if let Some(thr) = s.nms {
        if !(0.0..=1.0).contains(&thr) {
            bail!(UsageError(format!("--nms must lie in [0, 1], got {thr}")));
        }
        for v in dets.values_mut() {
            *v = eval::nms(v, thr);
        }
    }
    let report = eval::map_suite(&dets, &ds.annotations.ground_truth(), &s.thresholds).map_err(usage)?;

    create_dir(&a.out)?;
    eval::write_detections(a.out.join(DETECTIONS_FILE), &dets)?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    let artifacts = vec![a.out.join(DETECTIONS_FILE), a.out.join(REPORT_FILE)];
    RunManifest::new("eval", s.split_seed, &s, artifacts)?.write(&a.out.join(MANIFEST_FILE))?;
    print!("{}", report.table());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GradcheckReport<'a> {
    tolerance: f64,
    passed: bool,
    checks: &'a [CheckResult],
}

pub fn gradcheck(a: GradcheckArgs, seed: Option<u64>) -> Result<()> {
    let opts = SuiteOptions {
        inject_sign_flip: a.inject_sign_flip,
        seed: seed.unwrap_or(0),
    };
    let results = gradcheck::run_all(opts)?;
    let mut suites: Vec<(&str, f64, bool)> = Vec::new();
    for r in &results {
        println!(
            "{:<5} {:<10} {:<44} {:>10.3e} ({} coords)",
            if r.passed() { "ok" } else { "FAIL" },
            r.suite,
            r.name,
            r.max_rel_error,
            r.coordinates
        );
        match suites.iter_mut().find(|s| s.0 == r.suite) {
            Some(s) => {
                s.1 = s.1.max(r.max_rel_error);
                s.2 &= r.passed();
            }
            None => suites.push((r.suite, r.max_rel_error, r.passed())),
        }
    }
    println!();
    for (name, worst, ok) in &suites {
        println!("{name:<12} worst {worst:.3e}  {}", if *ok { "pass" } else { "FAIL" });
    }
    let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.passed()).collect();
    if let Some(out) = &a.out {
        write_json(
            out,
            &GradcheckReport {
                tolerance: gradcheck::TOLERANCE,
                passed: failed.is_empty(),
                checks: &results,
            },
        )?;
    }
    if !failed.is_empty() {
        bail!(CheckFailed(format!(
            "{} of {} gradient checks exceed {:.0e}",
            failed.len(),
            results.len(),
            gradcheck::TOLERANCE
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub t: usize,
    pub window: usize,
    pub heads: usize,
    pub windowed_products: usize,
    pub dense_products: usize,
    pub windowed_median_s: f64,
    pub dense_median_s: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn bench(a: BenchArgs, seed: Option<u64>) -> Result<()> {
    if a.runs < 10 {
        bail!(UsageError("--runs must be at least 10".into()));
    }
    if a.t.is_empty() || a.t.contains(&0) {
        bail!(UsageError("--t needs positive sequence lengths".into()));
    }
    let cfg = TaaConfig {
        model_dim: a.model_dim,
        heads: a.heads,
        window: a.window,
        ..TaaConfig::default()
    };
    cfg.validate().map_err(usage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let mut rows = Vec::new();
    for &t in &a.t {
        let [q, k, v] = [(); 3].map(|_| Tensor::uniform(&[t, a.model_dim], -1.0, 1.0, &mut rng));
        let mut tw = Vec::with_capacity(a.runs);
        let mut td = Vec::with_capacity(a.runs);
        let (mut wp, mut dp) = (0, 0);
        for _ in 0..a.runs {
            let start = Instant::now();
            let (_, ws) = taa::gpa_forward(&q, &k, &v, &cfg)?;
            tw.push(start.elapsed().as_secs_f64());
            let start = Instant::now();
            let (_, ds) = taa::dense_attention(&q, &k, &v, &cfg)?;
            td.push(start.elapsed().as_secs_f64());
            wp = ws.qk_products / a.heads;
            dp = ds.qk_products / a.heads;
        }
        rows.push(BenchRow {
            t,
            window: a.window,
            heads: a.heads,
            windowed_products: wp,
            dense_products: dp,
            windowed_median_s: median(tw),
            dense_median_s: median(td),
        });
    }

    println!(
        "{:>6} {:>4} {:>14} {:>14} {:>8} {:>12} {:>12}",
        "T", "w", "windowed/head", "dense/head", "ratio", "windowed ms", "dense ms"
    );
    for r in &rows {
        println!(
            "{:>6} {:>4} {:>14} {:>14} {:>8.2} {:>12.3} {:>12.3}",
            r.t,
            r.window,
            r.windowed_products,
            r.dense_products,
            r.dense_products as f64 / r.windowed_products as f64,
            r.windowed_median_s * 1e3,
            r.dense_median_s * 1e3
        );
    }
    if let Some(out) = &a.out {
        let mut csv = String::from("t,window,heads,windowed_products,dense_products,windowed_median_s,dense_median_s\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{:e},{:e}\n",
                r.t, r.window, r.heads, r.windowed_products, r.dense_products, r.windowed_median_s, r.dense_median_s
            ));
        }
        fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
        #[derive(Serialize)]
        struct BenchSettings<'a> {
            t: &'a [usize],
            window: usize,
            heads: usize,
            model_dim: usize,
            runs: usize,
        }
        let settings = BenchSettings {
            t: &a.t,
            window: a.window,
            heads: a.heads,
            model_dim: a.model_dim,
            runs: a.runs,
        };
        RunManifest::new("bench", seed.unwrap_or(0), &settings, vec![out.clone()])?
            .write(&out.with_extension("manifest.json"))?;
    }
    Ok(())
}
