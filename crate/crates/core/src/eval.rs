//! Top-k evaluation, ε-sweeps and per-image pruning comparisons.
//!
//! A manifest is a text file of `path<TAB>class_index` lines; paths are
//! relative to the manifest's directory. Images ending in `.ppm` are decoded
//! and resized; anything else is read as a raw tensor fixture.
//!
//! Images are evaluated in parallel, but results are merged in manifest
//! order so every aggregate is independent of the worker count.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_ppm, to_input_tensor};
use crate::inference::{forward, softmax_forward, PruneConfig};
use crate::model::{LayerSpec, NetworkModel};
use crate::pruning::{savings_ratio, LoadRecorder, SavingsReport};
use crate::tensor::{Shape, Tensor};

/// A labelled set of images the evaluator can load one at a time.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn label(&self, index: usize) -> usize;
    fn id(&self, index: usize) -> String;
    fn load(&self, index: usize, shape: Shape) -> Result<Tensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>, class_names: Vec<String>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::Manifest(format!("line {}: expected path<TAB>class", n + 1)))?;
            let class: usize = class
                .trim()
                .parse()
                .map_err(|_| Error::Manifest(format!("line {}: bad class index '{class}'", n + 1)))?;
            if !class_names.is_empty() && class >= class_names.len() {
                return Err(Error::Manifest(format!(
                    "line {}: class {class} out of range for {} classes",
                    n + 1,
                    class_names.len()
                )));
            }
            if !seen.insert(path.to_string()) {
                return Err(Error::Manifest(format!("line {}: duplicate path '{path}'", n + 1)));
            }
            entries.push(ManifestEntry { path: PathBuf::from(path), class });
        }
        Ok(Self { root: root.into(), entries, class_names })
    }

    /// Reads a manifest file and an optional class-names file (one per line).
    pub fn load(manifest: &Path, class_names: Option<&Path>) -> Result<Self> {
        let names = match class_names {
            Some(p) => read_class_names(p)?,
            None => Vec::new(),
        };
        let text = std::fs::read_to_string(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, names)
    }

    /// Classes must fit the model's output width.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.class >= classes) {
            return Err(Error::Manifest(format!(
                "{}: class {} but the model has {classes} outputs",
                e.path.display(),
                e.class
            )));
        }
        Ok(())
    }
}

pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().map(|l| l.trim().to_string()).collect())
}

/// Loads an image file as a network input of `shape`.
pub fn load_image_file(path: &Path, shape: Shape) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let t = if is_ppm { to_input_tensor(&load_ppm(&bytes)?, shape)? } else { Tensor::read_raw(bytes.as_slice())? };
    if t.shape() != shape {
        return Err(Error::ShapeMismatch { expected: shape, found: t.shape() });
    }
    Ok(t)
}

impl ImageSource for DatasetManifest {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn label(&self, index: usize) -> usize {
        self.entries[index].class
    }

    fn id(&self, index: usize) -> String {
        self.entries[index].path.display().to_string()
    }

    fn load(&self, index: usize, shape: Shape) -> Result<Tensor> {
        load_image_file(&self.root.join(&self.entries[index].path), shape)
    }
}

/// An in-memory labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub label: usize,
    pub tensor: Tensor,
}

impl ImageSource for [LabeledImage] {
    fn len(&self) -> usize {
        <[LabeledImage]>::len(self)
    }

    fn label(&self, index: usize) -> usize {
        self[index].label
    }

    fn id(&self, index: usize) -> String {
        self[index].id.clone()
    }

    fn load(&self, index: usize, shape: Shape) -> Result<Tensor> {
        let t = &self[index].tensor;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch { expected: shape, found: t.shape() });
        }
        Ok(t.clone())
    }
}

impl ImageSource for Vec<LabeledImage> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn label(&self, index: usize) -> usize {
        self.as_slice().label(index)
    }

    fn id(&self, index: usize) -> String {
        self.as_slice().id(index)
    }

    fn load(&self, index: usize, shape: Shape) -> Result<Tensor> {
        self.as_slice().load(index, shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub class: usize,
    pub score: f32,
}

/// Sorts scores descending; ties go to the lower class index.
pub fn rank(scores: &[f32]) -> Vec<Ranked> {
    let mut out: Vec<Ranked> = scores.iter().enumerate().map(|(class, &score)| Ranked { class, score }).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
    out
}

fn class_scores(
    model: &NetworkModel,
    image: &Tensor,
    cfg: &PruneConfig,
    recorder: Option<&mut LoadRecorder>,
) -> Result<Tensor> {
    let out = forward(model, image, cfg, recorder)?;
    if matches!(model.layers.last(), Some(l) if l.spec == LayerSpec::Softmax) {
        Ok(out)
    } else {
        softmax_forward(&out)
    }
}

/// Softmax class scores of `image`, best first.
pub fn classify(model: &NetworkModel, image: &Tensor, cfg: &PruneConfig) -> Result<Vec<Ranked>> {
    Ok(rank(class_scores(model, image, cfg, None)?.data()))
}

/// [`classify`] with load accounting.
pub fn classify_recorded(
    model: &NetworkModel,
    image: &Tensor,
    cfg: &PruneConfig,
    recorder: &mut LoadRecorder,
) -> Result<Vec<Ranked>> {
    Ok(rank(class_scores(model, image, cfg, Some(recorder))?.data()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub evaluated: usize,
    pub top_k: Vec<TopK>,
    pub skipped: Vec<SkippedImage>,
    #[serde(skip)]
    pub loads: LoadRecorder,
}

impl EvalReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.top_k.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for t in &self.top_k {
            wtr.serialize(t)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

struct ImageOutcome {
    rank_of_truth: usize,
    loads: LoadRecorder,
}

fn run_one<S: ImageSource + ?Sized>(
    model: &NetworkModel,
    source: &S,
    index: usize,
    cfg: &PruneConfig,
) -> Result<ImageOutcome> {
    let image = source.load(index, model.input)?;
    let mut loads = LoadRecorder::new();
    let ranking = classify_recorded(model, &image, cfg, &mut loads)?;
    let label = source.label(index);
    let rank_of_truth = ranking
        .iter()
        .position(|r| r.class == label)
        .ok_or_else(|| Error::Manifest(format!("class {label} outside model output ({} classes)", ranking.len())))?;
    Ok(ImageOutcome { rank_of_truth, loads })
}

/// Top-k accuracy for each `k` in `ks`. Images that fail to load are
/// listed in the report's `skipped` and excluded from the denominator.
pub fn evaluate<S: ImageSource + ?Sized>(
    model: &NetworkModel,
    source: &S,
    cfg: &PruneConfig,
    ks: &[usize],
) -> Result<EvalReport> {
    if source.is_empty() {
        return Err(Error::Manifest("no images to evaluate".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("k values must be >= 1".into()));
    }
    cfg.validate()?;
    let outcomes: Vec<Result<ImageOutcome>> =
        (0..source.len()).into_par_iter().map(|i| run_one(model, source, i, cfg)).collect();

    let mut correct = vec![0usize; ks.len()];
    let mut evaluated = 0;
    let mut skipped = Vec::new();
    let mut loads = LoadRecorder::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                evaluated += 1;
                for (slot, k) in ks.iter().enumerate() {
                    if o.rank_of_truth < *k {
                        correct[slot] += 1;
                    }
                }
                loads.merge(&o.loads);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", source.id(i));
                skipped.push(SkippedImage { id: source.id(i), error: e.to_string() });
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::Manifest(format!("none of {} images could be evaluated", source.len())));
    }
    let top_k =
        ks.iter().zip(correct).map(|(&k, c)| TopK { k, correct: c, accuracy: c as f64 / evaluated as f64 }).collect();
    Ok(EvalReport { evaluated, top_k, skipped, loads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f32,
    pub top1: f64,
    pub top5: f64,
    /// Accuracy lost against the unpruned baseline; negative is a gain.
    pub top1_loss: f64,
    pub top5_loss: f64,
    pub load_reduction: f64,
    pub savings: SavingsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub evaluated: usize,
    pub baseline_top1: f64,
    pub baseline_top5: f64,
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SkippedImage>,
}

impl SweepResult {
    /// One row per ε.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "epsilon",
            "top1",
            "top5",
            "top1_loss",
            "top5_loss",
            "load_reduction",
            "channels_total",
            "channels_skipped",
        ])?;
        for r in &self.rows {
            wtr.write_record([
                r.epsilon.to_string(),
                format!("{:.6}", r.top1),
                format!("{:.6}", r.top5),
                format!("{:.6}", r.top1_loss),
                format!("{:.6}", r.top5_loss),
                format!("{:.6}", r.load_reduction),
                r.savings.channels_total.to_string(),
                r.savings.channels_skipped.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Evaluates the unpruned baseline, then `base` at each ε.
pub fn epsilon_sweep<S: ImageSource + ?Sized>(
    model: &NetworkModel,
    source: &S,
    epsilons: &[f32],
    base: &PruneConfig,
) -> Result<SweepResult> {
    if epsilons.is_empty() {
        return Err(Error::InvalidArgument("epsilon list is empty".into()));
    }
    if epsilons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(format!("epsilons must be sorted ascending: {epsilons:?}")));
    }
    if !base.is_pruning() {
        return Err(Error::InvalidArgument("sweep needs a pruning mode".into()));
    }
    let ks = [1, 5];
    let baseline = evaluate(model, source, &PruneConfig { mode: crate::inference::PruneMode::Off, ..*base }, &ks)?;
    let b1 = baseline.accuracy(1).unwrap();
    let b5 = baseline.accuracy(5).unwrap();
    let mut rows = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let cfg = PruneConfig { epsilon, ..*base };
        let report = evaluate(model, source, &cfg, &ks)?;
        let savings = savings_ratio(&report.loads)?;
        let top1 = report.accuracy(1).unwrap();
        let top5 = report.accuracy(5).unwrap();
        rows.push(SweepRow {
            epsilon,
            top1,
            top5,
            top1_loss: b1 - top1,
            top5_loss: b5 - top5,
            load_reduction: savings.total_saved_fraction,
            savings,
        });
    }
    Ok(SweepResult {
        evaluated: baseline.evaluated,
        baseline_top1: b1,
        baseline_top5: b5,
        rows,
        skipped: baseline.skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageComparison {
    pub id: String,
    pub label: usize,
    pub prob_unpruned: f32,
    pub prob_pruned: f32,
    pub channels_total: usize,
    pub channels_skipped: usize,
}

/// Ground-truth probability of each image with and without pruning, plus
/// the channel loads pruning saved.
pub fn compare_per_image<S: ImageSource + ?Sized>(
    model: &NetworkModel,
    source: &S,
    cfg: &PruneConfig,
) -> Result<Vec<ImageComparison>> {
    cfg.validate()?;
    let off = PruneConfig { mode: crate::inference::PruneMode::Off, ..*cfg };
    (0..source.len())
        .into_par_iter()
        .map(|i| {
            let image = source.load(i, model.input)?;
            let label = source.label(i);
            let unpruned = class_scores(model, &image, &off, None)?;
            let mut loads = LoadRecorder::new();
            let pruned = class_scores(model, &image, cfg, Some(&mut loads))?;
            let prob = |t: &Tensor| {
                t.data()
                    .get(label)
                    .copied()
                    .ok_or_else(|| Error::Manifest(format!("class {label} outside model output")))
            };
            let totals = loads.totals();
            Ok(ImageComparison {
                id: source.id(i),
                label,
                prob_unpruned: prob(&unpruned)?,
                prob_pruned: prob(&pruned)?,
                channels_total: totals.channels_total,
                channels_skipped: totals.channels_skipped,
            })
        })
        .collect()
}
