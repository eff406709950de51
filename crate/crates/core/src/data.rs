//! Feature and annotation files, the synthetic dataset generator, and batching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{GtSegment, Segment};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"APFF";
pub const ANNOTATION_VERSION: u32 = 1;
pub const MIN_SEGMENT_STEPS: usize = 4;

/// Per-video feature matrix, `[T, C]` time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub duration: f64,
    pub features: Tensor,
}

impl FeatureSequence {
    pub fn steps(&self) -> usize {
        self.features.rows()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    video_id: String,
    #[serde(rename = "C")]
    channels: usize,
    #[serde(rename = "T")]
    steps: usize,
    duration: f64,
}

pub fn write_features(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    let header = FeatureHeader {
        video_id: seq.video_id.clone(),
        channels: seq.channels(),
        steps: seq.steps(),
        duration: seq.duration,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut buf = Vec::with_capacity(8 + json.len() + 8 * seq.features.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in seq.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "APFF",
        });
    }
    if bytes.len() < 8 {
        return Err(truncated("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(truncated(format!("header needs {hlen} bytes, {} present", body.len())));
    }
    let header: FeatureHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::json(path, e))?;
    let payload = &body[hlen..];
    let want = header.steps * header.channels * 8;
    if payload.len() % 8 != 0 {
        return Err(truncated(format!("payload of {} bytes is not a whole number of f64", payload.len())));
    }
    if payload.len() != want {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            detail: format!(
                "header declares T={} C={} ({want} bytes), payload has {} bytes",
                header.steps,
                header.channels,
                payload.len()
            ),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let features = Tensor::from_parts(vec![header.steps, header.channels], data).map_err(|_| Error::SizeMismatch {
        path: path.to_path_buf(),
        detail: "empty feature matrix".into(),
    })?;
    Ok(FeatureSequence {
        video_id: header.video_id,
        duration: header.duration,
        features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// `[start, end]` in seconds.
    pub segment: [f64; 2],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotations {
    pub duration: f64,
    pub annotations: Vec<Annotation>,
}

impl VideoAnnotations {
    /// Ground truth with times normalized to `[0, 1]`.
    pub fn normalized(&self) -> Vec<GtSegment> {
        self.annotations
            .iter()
            .map(|a| GtSegment {
                segment: Segment::new(a.segment[0] / self.duration, a.segment[1] / self.duration),
                label: a.label,
            })
            .collect()
    }

    /// Ground truth in seconds.
    pub fn in_seconds(&self) -> Vec<GtSegment> {
        self.annotations
            .iter()
            .map(|a| GtSegment {
                segment: Segment::new(a.segment[0], a.segment[1]),
                label: a.label,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub version: u32,
    pub videos: BTreeMap<String, VideoAnnotations>,
}

impl Default for AnnotationSet {
    fn default() -> Self {
        Self {
            version: ANNOTATION_VERSION,
            videos: BTreeMap::new(),
        }
    }
}

impl AnnotationSet {
    /// Checks `0 <= start < end <= duration` and, when given, the label range.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.version != ANNOTATION_VERSION {
            return Err(Error::validation(
                "version",
                format!("unsupported version {}, expected {ANNOTATION_VERSION}", self.version),
            ));
        }
        for (id, video) in &self.videos {
            if !(video.duration.is_finite() && video.duration > 0.0) {
                return Err(Error::validation(
                    format!("videos.{id}.duration"),
                    format!("duration must be positive, got {}", video.duration),
                ));
            }
            for (i, a) in video.annotations.iter().enumerate() {
                let loc = || format!("videos.{id}.annotations[{i}]");
                let [s, e] = a.segment;
                if !(s.is_finite() && e.is_finite()) || s < 0.0 || s >= e || e > video.duration {
                    return Err(Error::validation(
                        loc(),
                        format!("segment [{s}, {e}] violates 0 <= start < end <= {}", video.duration),
                    ));
                }
                if let Some(k) = num_classes {
                    if a.label >= k {
                        return Err(Error::validation(loc(), format!("label {} >= num_classes {k}", a.label)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Ground truth in seconds for the evaluator.
    pub fn ground_truth(&self) -> BTreeMap<String, Vec<GtSegment>> {
        self.videos.iter().map(|(k, v)| (k.clone(), v.in_seconds())).collect()
    }
}

pub fn write_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(set).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: AnnotationSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    set.validate(num_classes)?;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignatureMode {
    /// Class `c` lights up channel `c`.
    #[default]
    Basis,
    /// A seeded random orthonormal set.
    Rotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub num_classes: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_steps: usize,
    pub max_segment_steps: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seconds_per_step: f64,
    pub signature: SignatureMode,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 62,
            min_steps: 96,
            max_steps: 160,
            num_classes: 5,
            min_segments: 1,
            max_segments: 3,
            min_segment_steps: 8,
            max_segment_steps: 40,
            feature_dim: 16,
            noise_std: 0.25,
            seconds_per_step: 0.5,
            signature: SignatureMode::Basis,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_videos == 0 {
            return bad("num_videos must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.feature_dim < self.num_classes {
            return bad(format!(
                "feature_dim {} < num_classes {}: orthogonal signatures need C >= classes",
                self.feature_dim, self.num_classes
            ));
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return bad(format!("invalid step range [{}, {}]", self.min_steps, self.max_steps));
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad(format!("invalid segment count range [{}, {}]", self.min_segments, self.max_segments));
        }
        if self.min_segment_steps < MIN_SEGMENT_STEPS || self.min_segment_steps > self.max_segment_steps {
            return bad(format!(
                "segment length range [{}, {}] must start at {MIN_SEGMENT_STEPS} or more",
                self.min_segment_steps, self.max_segment_steps
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if !(self.seconds_per_step > 0.0 && self.seconds_per_step.is_finite()) {
            return bad("seconds_per_step must be positive".into());
        }
        Ok(())
    }
}

/// A feature set with its annotations, in a fixed video order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<FeatureSequence>,
    pub annotations: AnnotationSet,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.videos.first().map_or(0, |v| v.channels())
    }

    /// Normalized ground truth for video `i`.
    pub fn targets(&self, i: usize) -> Vec<GtSegment> {
        self.annotations
            .videos
            .get(&self.videos[i].video_id)
            .map(|v| v.normalized())
            .unwrap_or_default()
    }

    /// The videos at `idx`, in that order, with their annotations.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let videos: Vec<FeatureSequence> = idx.iter().map(|&i| self.videos[i].clone()).collect();
        let annotations = AnnotationSet {
            version: self.annotations.version,
            videos: videos
                .iter()
                .filter_map(|v| {
                    self.annotations
                        .videos
                        .get(&v.video_id)
                        .map(|a| (v.video_id.clone(), a.clone()))
                })
                .collect(),
        };
        Dataset { videos, annotations }
    }

    /// Writes `features/<id>.apff` and `annotations.json` under `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut written = Vec::with_capacity(self.len() + 1);
        for v in &self.videos {
            let p = feat_dir.join(format!("{}.apff", v.video_id));
            write_features(&p, v)?;
            written.push(p);
        }
        let p = dir.join("annotations.json");
        write_annotations(&p, &self.annotations)?;
        written.push(p);
        Ok(written)
    }

    /// Reads a directory written by [`Dataset::write_dir`]. Videos are
    /// ordered by id; every video must have annotations.
    pub fn read_dir(dir: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let annotations = read_annotations(dir.join("annotations.json"), num_classes)?;
        let mut videos = Vec::with_capacity(annotations.videos.len());
        for (id, ann) in &annotations.videos {
            let p = dir.join("features").join(format!("{id}.apff"));
            let seq = read_features(&p)?;
            if &seq.video_id != id {
                return Err(Error::validation(
                    p.display().to_string(),
                    format!("feature file holds video `{}`, expected `{id}`", seq.video_id),
                ));
            }
            if (seq.duration - ann.duration).abs() > 1e-9 * ann.duration.max(1.0) {
                return Err(Error::validation(
                    format!("videos.{id}.duration"),
                    format!("annotation says {}, features say {}", ann.duration, seq.duration),
                ));
            }
            if videos.first().is_some_and(|v: &FeatureSequence| v.channels() != seq.channels()) {
                return Err(Error::validation(p.display().to_string(), "feature dimension differs across videos"));
            }
            videos.push(seq);
        }
        if videos.is_empty() {
            return Err(Error::validation(dir.display().to_string(), "dataset has no videos"));
        }
        Ok(Dataset { videos, annotations })
    }
}

fn signatures(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let c = spec.feature_dim;
    match spec.signature {
        SignatureMode::Basis => (0..spec.num_classes)
            .map(|k| (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect(),
        SignatureMode::Rotated => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
            while basis.len() < spec.num_classes {
                let mut v: Vec<f64> = (0..c).map(|_| normal.sample(rng)).collect();
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    basis.push(v.into_iter().map(|x| x / n).collect());
                }
            }
            basis
        }
    }
}

/// `k + 1` non-negative gaps summing to `free`, uniformly over compositions.
fn random_gaps(free: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut gaps = Vec::with_capacity(k + 1);
    let mut prev = 0;
    for c in cuts {
        gaps.push(c - prev);
        prev = c;
    }
    gaps.push(free - prev);
    gaps
}

/// Plants non-overlapping class segments into Gaussian noise.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.max_segments * spec.min_segment_steps > spec.min_steps {
        return Err(Error::Generation(format!(
            "{} segments of at least {} steps do not fit in {} steps",
            spec.max_segments, spec.min_segment_steps, spec.min_steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigs = signatures(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let width = (spec.num_videos.max(1) - 1).to_string().len().max(4);
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut annotations = AnnotationSet::default();
    for n in 0..spec.num_videos {
        let t = rng.gen_range(spec.min_steps..=spec.max_steps);
        let k = rng.gen_range(spec.min_segments..=spec.max_segments);
        let max_len = spec.max_segment_steps.min(t / k);
        let mut lens: Vec<usize> = (0..k).map(|_| rng.gen_range(spec.min_segment_steps..=max_len)).collect();
        // lengths are capped at t / k, so they always fit
        let free = t - lens.iter().sum::<usize>();
        let gaps = random_gaps(free, k, &mut rng);
        let labels: Vec<usize> = (0..k).map(|_| rng.gen_range(0..spec.num_classes)).collect();

        let mut data = vec![0.0; t * spec.feature_dim];
        if spec.noise_std > 0.0 {
            data.iter_mut().for_each(|x| *x = noise.sample(&mut rng));
        }
        let mut anns = Vec::with_capacity(k);
        let mut cursor = 0;
        for (i, len) in lens.iter_mut().enumerate() {
            cursor += gaps[i];
            let (s, e) = (cursor, cursor + *len);
            for row in data[s * spec.feature_dim..e * spec.feature_dim].chunks_exact_mut(spec.feature_dim) {
                row.iter_mut().zip(&sigs[labels[i]]).for_each(|(x, v)| *x += v);
            }
            anns.push(Annotation {
                segment: [s as f64 * spec.seconds_per_step, e as f64 * spec.seconds_per_step],
                label: labels[i],
            });
            cursor = e;
        }
        let video_id = format!("video_{n:0width$}");
        let duration = t as f64 * spec.seconds_per_step;
        videos.push(FeatureSequence {
            video_id: video_id.clone(),
            duration,
            features: Tensor::new(vec![t, spec.feature_dim], data)?,
        });
        annotations.videos.insert(
            video_id,
            VideoAnnotations {
                duration,
                annotations: anns,
            },
        );
    }
    Ok(Dataset { videos, annotations })
}

/// Seeded partition into `(train, validation)` index lists, each sorted.
/// The validation side gets `floor(n * fraction)` videos.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * fraction).floor() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Groups whole videos into batches; sequences are never cut or padded.
#[derive(Debug, Clone)]
pub struct Batcher {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self { len, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    /// Index groups for `epoch`, from a permutation seeded by `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng);
        let bs = self.batch_size;
        (0..self.batches_per_epoch()).map(move |b| idx[b * bs..((b + 1) * bs).min(idx.len())].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        FeatureSequence {
            video_id: "clip".into(),
            duration: 12.5,
            features: Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng),
        }
    }

    #[test]
    fn feature_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.apff");
        let seq = sample();
        write_features(&p, &seq).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back, seq);
        let bits = |s: &FeatureSequence| s.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&seq));
    }

    #[test]
    fn feature_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.apff");
        write_features(&p, &sample()).unwrap();
        let bytes = fs::read(&p).unwrap();

        let q = dir.path().join("bad.apff");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&q, &bad).unwrap();
        assert!(matches!(read_features(&q), Err(Error::BadMagic { .. })));

        fs::write(&q, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_features(&q), Err(Error::Truncated { .. })));

        fs::write(&q, &bytes[..6]).unwrap();
        assert!(matches!(read_features(&q), Err(Error::Truncated { .. })));

        fs::write(&q, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_features(&q), Err(Error::SizeMismatch { .. })));
    }

    fn one_video(segment: [f64; 2], label: usize) -> AnnotationSet {
        let mut set = AnnotationSet::default();
        set.videos.insert(
            "v7".into(),
            VideoAnnotations {
                duration: 10.0,
                annotations: vec![Annotation { segment, label }],
            },
        );
        set
    }

    #[test]
    fn annotation_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        let set = one_video([1.25, 3.5], 2);
        write_annotations(&p, &set).unwrap();
        assert_eq!(read_annotations(&p, Some(3)).unwrap(), set);

        let err = read_annotations(&p, Some(2)).unwrap_err();
        assert!(err.to_string().contains("videos.v7.annotations[0]"), "{err}");

        write_annotations(&p, &one_video([4.0, 4.0], 0)).unwrap();
        let err = read_annotations(&p, None).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }) && err.to_string().contains("v7"), "{err}");
    }

    #[test]
    fn noiseless_synthesis_is_exact_signature() {
        let spec = SynthSpec {
            num_videos: 6,
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        for v in &ds.videos {
            let ann = &ds.annotations.videos[&v.video_id];
            let mut label_at = vec![None; v.steps()];
            for a in &ann.annotations {
                let s = (a.segment[0] / spec.seconds_per_step).round() as usize;
                let e = (a.segment[1] / spec.seconds_per_step).round() as usize;
                (s..e).for_each(|t| label_at[t] = Some(a.label));
            }
            for (t, l) in label_at.iter().enumerate() {
                for (c, &x) in v.features.row(t).iter().enumerate() {
                    let want = if *l == Some(c) { 1.0 } else { 0.0 };
                    assert_eq!(x, want);
                }
            }
        }
    }

    #[test]
    fn rotated_signatures_are_orthonormal() {
        let spec = SynthSpec {
            signature: SignatureMode::Rotated,
            ..SynthSpec::default()
        };
        let s = signatures(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        for i in 0..s.len() {
            for j in 0..s.len() {
                let d: f64 = s[i].iter().zip(&s[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SynthSpec {
            num_videos: 4,
            ..SynthSpec::default()
        };
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
    }

    #[test]
    fn infeasible_packing_is_rejected() {
        let spec = SynthSpec {
            min_steps: 20,
            max_steps: 20,
            min_segments: 5,
            max_segments: 6,
            min_segment_steps: 4,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_generate(&spec), Err(Error::Generation(_))));
        let spec = SynthSpec {
            feature_dim: 3,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_sizes() {
        let (train, val) = split_indices(62, 0.2, 7);
        assert_eq!((train.len(), val.len()), (50, 12));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..62).collect::<Vec<_>>());
    }

    #[test]
    fn batcher_covers_dataset_once() {
        let b = Batcher::new(11, 4, 9).unwrap();
        let e0: Vec<Vec<usize>> = b.epoch(0).collect();
        assert_eq!(e0.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 3]);
        let mut flat: Vec<usize> = e0.concat();
        flat.sort_unstable();
        assert_eq!(flat, (0..11).collect::<Vec<_>>());
        assert_eq!(e0, b.epoch(0).collect::<Vec<_>>());
        assert_ne!(e0, b.epoch(1).collect::<Vec<_>>());
        let singles: Vec<Vec<usize>> = Batcher::new(5, 1, 9).unwrap().epoch(0).collect();
        assert!(singles.iter().all(|g| g.len() == 1));
        assert!(Batcher::new(5, 0, 1).is_err());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&SynthSpec {
            num_videos: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let files = ds.write_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        assert_eq!(Dataset::read_dir(dir.path(), Some(5)).unwrap(), ds);
    }
}
