//! Zero-channel marking, channel-skipping convolution and load accounting.
//!
//! A compute unit processes at most `h×w` elements of a plane at once, so
//! each channel plane is split into `⌈H·W / (h·w)⌉` consecutive parts (scan
//! order, last part possibly short). A part is flagged when every element
//! has `|v| <= ε`; a channel is marked, and later skipped, when all of its
//! parts are flagged.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{conv_fast_raw, DEFAULT_LEAK};
use crate::model::ConvSpec;
use crate::tensor::{Tensor, WeightBlock};

/// Bits per feature-map element.
pub const ELEMENT_BITS: u64 = 32;

/// Largest plane tile `(h, w)` the compute unit processes at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessorCapability {
    pub h: usize,
    pub w: usize,
}

impl ProcessorCapability {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("capability must be positive, got {h}x{w}")));
        }
        Ok(Self { h, w })
    }

    pub fn tile_len(&self) -> usize {
        self.h * self.w
    }

    /// Number of parts a plane of `plane_len` elements splits into.
    pub fn parts(&self, plane_len: usize) -> usize {
        plane_len.div_ceil(self.tile_len()).max(1)
    }
}

impl Default for ProcessorCapability {
    fn default() -> Self {
        Self { h: 16, w: 16 }
    }
}

impl FromStr for ProcessorCapability {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("capability must look like HxW, got '{s}'"));
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        Self::new(h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)
    }
}

impl fmt::Display for ProcessorCapability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// Per-channel, per-part zero marks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMarkTable {
    channel_part: usize,
    parts: Vec<bool>,
    marked: Vec<bool>,
}

impl ChannelMarkTable {
    pub fn channels(&self) -> usize {
        self.marked.len()
    }

    pub fn channel_part(&self) -> usize {
        self.channel_part
    }

    /// Part flag `j` of channel `i`.
    pub fn part(&self, i: usize, j: usize) -> bool {
        assert!(j < self.channel_part, "part {j} out of range");
        self.parts[i * self.channel_part + j]
    }

    pub fn parts_of(&self, i: usize) -> &[bool] {
        &self.parts[i * self.channel_part..(i + 1) * self.channel_part]
    }

    /// Aggregate mark: every part of channel `i` is flagged.
    pub fn is_marked(&self, i: usize) -> bool {
        self.marked[i]
    }

    pub fn marks(&self) -> &[bool] {
        &self.marked
    }

    pub fn marked_count(&self) -> usize {
        self.marked.iter().filter(|m| **m).count()
    }

    pub fn marked_channels(&self) -> impl Iterator<Item = usize> + '_ {
        self.marked.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i)
    }
}

/// Marks the channels of `fmap` lying entirely within `epsilon` of zero.
pub fn mark_zero_channels(fmap: &Tensor, epsilon: f32, cap: ProcessorCapability) -> ChannelMarkTable {
    let shape = fmap.shape();
    let plane_len = shape.plane_len();
    let tile = cap.tile_len();
    let channel_part = cap.parts(plane_len);
    let mut parts = Vec::with_capacity(shape.channels * channel_part);
    let mut marked = Vec::with_capacity(shape.channels);
    for c in 0..shape.channels {
        let plane = fmap.channel_plane(c).expect("channel in range");
        let mut flagged = 0;
        for chunk in plane.chunks(tile) {
            let zero = chunk.iter().all(|v| v.abs() <= epsilon);
            flagged += usize::from(zero);
            parts.push(zero);
        }
        marked.push(flagged == channel_part);
    }
    ChannelMarkTable { channel_part, parts, marked }
}

/// Load counts of one convolution on one input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLoad {
    pub channels_total: usize,
    pub channels_skipped: usize,
    pub elements_loaded: u64,
    pub elements_skipped: u64,
    pub kernel_coeffs_skipped: u64,
}

impl ConvLoad {
    pub fn bits_loaded(&self) -> u64 {
        self.elements_loaded * ELEMENT_BITS
    }

    pub fn bits_unpruned(&self) -> u64 {
        (self.elements_loaded + self.elements_skipped) * ELEMENT_BITS
    }

    fn add(&mut self, other: &ConvLoad) {
        self.channels_total += other.channels_total;
        self.channels_skipped += other.channels_skipped;
        self.elements_loaded += other.elements_loaded;
        self.elements_skipped += other.elements_skipped;
        self.kernel_coeffs_skipped += other.kernel_coeffs_skipped;
    }
}

/// Pre-activation convolution skipping marked channels.
pub(crate) fn pruned_conv_raw(
    input: &Tensor,
    marks: Option<&ChannelMarkTable>,
    spec: &ConvSpec,
    weights: &WeightBlock,
) -> Result<(Tensor, ConvLoad)> {
    let shape = input.shape();
    if let Some(m) = marks {
        if m.channels() != shape.channels {
            return Err(Error::InvalidArgument(format!(
                "mark table covers {} channels, input has {}",
                m.channels(),
                shape.channels
            )));
        }
    }
    let out = conv_fast_raw(input, spec, weights, marks.map(|m| m.marks()))?;
    let skipped = marks.map_or(0, |m| m.marked_count());
    let plane = shape.plane_len() as u64;
    let per_channel_coeffs = (spec.filters / spec.groups * spec.size * spec.size) as u64;
    let load = ConvLoad {
        channels_total: shape.channels,
        channels_skipped: skipped,
        elements_loaded: (shape.channels - skipped) as u64 * plane,
        elements_skipped: skipped as u64 * plane,
        kernel_coeffs_skipped: skipped as u64 * per_channel_coeffs,
    };
    Ok((out, load))
}

/// Convolution that neither loads nor multiplies marked input channels.
///
/// The result equals the convolution of the input with every marked channel
/// replaced by zeros. For grouped convolution only filters of the marked
/// channel's group lose that input. Counts go to `recorder` under
/// `layer_index`.
pub fn pruned_conv_forward(
    input: &Tensor,
    marks: &ChannelMarkTable,
    spec: &ConvSpec,
    weights: &WeightBlock,
    layer_index: usize,
    recorder: &mut LoadRecorder,
) -> Result<Tensor> {
    let (mut out, load) = pruned_conv_raw(input, Some(marks), spec, weights)?;
    recorder.record(layer_index, "convolutional", load);
    for v in out.data_mut() {
        *v = spec.activation.apply(*v, DEFAULT_LEAK);
    }
    Ok(out)
}

/// One row of the load trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadEvent {
    pub image: usize,
    pub layer_index: usize,
    pub layer_kind: String,
    pub channels_total: usize,
    pub channels_skipped: usize,
    pub elements_loaded: u64,
    pub bits_loaded: u64,
    pub kernel_coeffs_skipped: u64,
    pub elements_skipped: u64,
}

impl LoadEvent {
    fn load(&self) -> ConvLoad {
        ConvLoad {
            channels_total: self.channels_total,
            channels_skipped: self.channels_skipped,
            elements_loaded: self.elements_loaded,
            elements_skipped: self.elements_skipped,
            kernel_coeffs_skipped: self.kernel_coeffs_skipped,
        }
    }
}

/// Feature-map loads per (image, layer). One forward pass is one image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadRecorder {
    passes: usize,
    events: Vec<LoadEvent>,
}

impl LoadRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_pass(&mut self) {
        self.passes += 1;
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn events(&self) -> &[LoadEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn record(&mut self, layer_index: usize, layer_kind: &str, load: ConvLoad) {
        if self.passes == 0 {
            self.passes = 1;
        }
        debug_assert!(load.channels_skipped <= load.channels_total);
        self.events.push(LoadEvent {
            image: self.passes - 1,
            layer_index,
            layer_kind: layer_kind.to_string(),
            channels_total: load.channels_total,
            channels_skipped: load.channels_skipped,
            elements_loaded: load.elements_loaded,
            bits_loaded: load.bits_loaded(),
            kernel_coeffs_skipped: load.kernel_coeffs_skipped,
            elements_skipped: load.elements_skipped,
        });
    }

    /// Appends `other`'s passes after this recorder's.
    pub fn merge(&mut self, other: &LoadRecorder) {
        let offset = self.passes;
        self.events.extend(other.events.iter().map(|e| LoadEvent { image: e.image + offset, ..e.clone() }));
        self.passes += other.passes;
    }

    /// Summed counts per layer, ordered by layer index.
    pub fn per_layer(&self) -> Vec<(usize, String, ConvLoad)> {
        let mut out: Vec<(usize, String, ConvLoad)> = Vec::new();
        for e in &self.events {
            match out.iter_mut().find(|(i, _, _)| *i == e.layer_index) {
                Some((_, _, acc)) => acc.add(&e.load()),
                None => out.push((e.layer_index, e.layer_kind.clone(), e.load())),
            }
        }
        out.sort_by_key(|(i, _, _)| *i);
        out
    }

    pub fn totals(&self) -> ConvLoad {
        let mut acc = ConvLoad::default();
        for e in &self.events {
            acc.add(&e.load());
        }
        acc
    }

    /// CSV trace, one row per (image, layer).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        if self.events.is_empty() {
            wtr.write_record([
                "image",
                "layer_index",
                "layer_kind",
                "channels_total",
                "channels_skipped",
                "elements_loaded",
                "bits_loaded",
                "kernel_coeffs_skipped",
                "elements_skipped",
            ])?;
        }
        for e in &self.events {
            wtr.serialize(e)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSavings {
    pub layer_index: usize,
    pub layer_kind: String,
    pub channels_total: usize,
    pub channels_skipped: usize,
    pub saved_fraction: f64,
    /// Mean feature-map megabits per image without / with pruning.
    pub megabits_unpruned: f64,
    pub megabits_pruned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub passes: usize,
    pub channels_total: usize,
    pub channels_skipped: usize,
    pub total_saved_fraction: f64,
    pub layers: Vec<LayerSavings>,
}

/// Fraction of channel loads saved, per layer and overall.
pub fn savings_ratio(recorder: &LoadRecorder) -> Result<SavingsReport> {
    let totals = recorder.totals();
    if totals.channels_total == 0 {
        return Err(Error::EmptyRecorder);
    }
    let passes = recorder.passes().max(1) as f64;
    let layers = recorder
        .per_layer()
        .into_iter()
        .map(|(layer_index, layer_kind, load)| LayerSavings {
            layer_index,
            layer_kind,
            channels_total: load.channels_total,
            channels_skipped: load.channels_skipped,
            saved_fraction: ratio(load.channels_skipped, load.channels_total),
            megabits_unpruned: load.bits_unpruned() as f64 / 1e6 / passes,
            megabits_pruned: load.bits_loaded() as f64 / 1e6 / passes,
        })
        .collect();
    Ok(SavingsReport {
        passes: recorder.passes(),
        channels_total: totals.channels_total,
        channels_skipped: totals.channels_skipped,
        total_saved_fraction: ratio(totals.channels_skipped, totals.channels_total),
        layers,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
