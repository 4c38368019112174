//! Command-line front end.
//!
//! Standard output is for people; `--out` files are for machines, in the
//! format chosen by `--format`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{self, DatasetManifest, ImageSource};
use crate::inference::{PruneConfig, PruneMode, DEFAULT_LEAK};
use crate::model::{fold_batch_norm, load_weights, parse_config, write_weights, NetworkModel};
use crate::pruning::{savings_ratio, LoadRecorder, ProcessorCapability};
use crate::stats::{self, DropClass, DEFAULT_THRESHOLDS};

#[derive(Debug, Parser)]
#[command(name = "fmprune", version, about = "Feature-map pruning analysis for Darknet-format CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Darknet network description (.cfg)
    #[arg(long)]
    pub model: PathBuf,
    /// Darknet weights file
    #[arg(long)]
    pub weights: PathBuf,
    /// Fold batch-norm statistics into the convolution weights after loading
    #[arg(long)]
    pub fold_batch_norm: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    /// off, literal or magnitude
    #[arg(long)]
    pub mode: Option<PruneMode>,
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f32,
    #[arg(long, default_value_t = DEFAULT_LEAK)]
    pub leak: f32,
    /// Tile size HxW used when marking channels
    #[arg(long, default_value = "16x16")]
    pub capability: ProcessorCapability,
}

impl PruneArgs {
    fn config(&self, default_mode: PruneMode) -> Result<PruneConfig> {
        PruneConfig::new(self.mode.unwrap_or(default_mode), self.epsilon)?
            .with_leak(self.leak)
            .map(|c| c.with_capability(self.capability))
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Machine-readable output file
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Text file of `path<TAB>class_index` lines
    #[arg(long)]
    pub manifest: PathBuf,
    /// Class names, one per line
    #[arg(long)]
    pub classes: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Weight sparsity at each threshold
    AnalyzeWeights {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f32>,
        /// Also classify the accuracy drop of static pruning at each threshold
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Classify one image and print the top five classes
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prune: PruneArgs,
        /// PPM image or raw tensor file
        image: PathBuf,
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Per-layer load trace CSV
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Top-1 and top-5 accuracy over a manifest
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prune: PruneArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Accuracy and load reduction for a list of epsilons
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prune: PruneArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        epsilons: Vec<f32>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Zero small weights and write a new weights file
    StaticPrune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multiply-accumulate and memory footprint per layer
    Cost {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Sparsity of convolution outputs over a manifest
    ActivationSparsity {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prune: PruneArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f32>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Ground-truth probability per image with and without pruning
    Compare {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prune: PruneArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

/// 2 for usage and I/O problems, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

pub fn load_model(args: &ModelArgs) -> Result<NetworkModel> {
    let text = std::fs::read_to_string(&args.model)?;
    let skeleton = parse_config(&text)?;
    let bytes = std::fs::read(&args.weights)?;
    let model = load_weights(&bytes, &skeleton)?;
    if args.fold_batch_norm {
        fold_batch_norm(&model)
    } else {
        Ok(model)
    }
}

fn load_data(args: &DataArgs, model: &NetworkModel) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(&args.manifest, args.classes.as_deref())?;
    manifest.check_classes(model.output_shape().len())?;
    Ok(manifest)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes `value` to `--out` if given: JSON via serde, CSV via `csv_fn`.
fn emit<T: Serialize>(output: &OutputArgs, value: &T, csv_fn: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let Some(path) = &output.out else { return Ok(()) };
    match output.format {
        Format::Json => write_json(value, path),
        Format::Csv => {
            let mut w = create(path)?;
            csv_fn(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn pct(f: f64) -> String {
    format!("{:.4}%", f * 100.0)
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::AnalyzeWeights { model, thresholds, manifest, output } => {
            cmd_analyze_weights(&model, &thresholds, manifest.as_deref(), &output, stdout)
        }
        Command::Infer { model, prune, image, classes, trace } => {
            cmd_infer(&model, &prune, &image, classes.as_deref(), trace.as_deref(), stdout)
        }
        Command::Eval { model, prune, data, output, trace } => {
            cmd_eval(&model, &prune, &data, &output, trace.as_deref(), stdout)
        }
        Command::Sweep { model, prune, data, epsilons, output } => {
            cmd_sweep(&model, &prune, &data, &epsilons, &output, stdout)
        }
        Command::StaticPrune { model, epsilon, out } => cmd_static_prune(&model, epsilon, &out, stdout),
        Command::Cost { model, output } => {
            let net = load_model(&model)?;
            let cost = stats::compute_cost(&net);
            writeln!(stdout, "layer\tkind\tmacs\tfmap_elements\tkernel_coeffs\tratio")?;
            for l in &cost.layers {
                writeln!(
                    stdout,
                    "{}\t{}\t{}\t{}\t{}\t{:.3}",
                    l.layer_index,
                    l.layer_kind,
                    l.macs,
                    l.feature_map_elements,
                    l.kernel_coefficients,
                    l.feature_map_to_kernel_ratio
                )?;
            }
            writeln!(
                stdout,
                "total\t\t{}\t{}\t{}",
                cost.total_macs, cost.total_feature_map_elements, cost.total_kernel_coefficients
            )?;
            emit(&output, &cost, |w| cost.write_csv(w))
        }
        Command::ActivationSparsity { model, prune, data, thresholds, output } => {
            let net = load_model(&model)?;
            let cfg = prune.config(PruneMode::Off)?;
            let manifest = load_data(&data, &net)?;
            let images = (0..manifest.len()).map(|i| manifest.load(i, net.input)).collect::<Result<Vec<_>>>()?;
            let report = stats::activation_sparsity(&net, &images, &thresholds, &cfg)?;
            writeln!(stdout, "{} activations over {} images", report.elements, images.len())?;
            for (t, f) in report.thresholds.iter().zip(&report.fractions) {
                writeln!(stdout, "<= {t}\t{}", pct(*f))?;
            }
            emit(&output, &report, |w| {
                let mut wtr = csv::Writer::from_writer(w);
                let mut header = vec!["scope".to_string()];
                header.extend(report.thresholds.iter().map(|t| t.to_string()));
                wtr.write_record(&header)?;
                let mut row = vec!["activations".to_string()];
                row.extend(report.fractions.iter().map(|f| format!("{f:.6}")));
                wtr.write_record(&row)?;
                wtr.flush()?;
                Ok(())
            })
        }
        Command::Compare { model, prune, data, output } => {
            let net = load_model(&model)?;
            let cfg = prune.config(PruneMode::Off)?;
            let manifest = load_data(&data, &net)?;
            let rows = eval::compare_per_image(&net, &manifest, &cfg)?;
            writeln!(stdout, "image\tlabel\tunpruned\tpruned\tskipped/total")?;
            for r in &rows {
                writeln!(
                    stdout,
                    "{}\t{}\t{:.6}\t{:.6}\t{}/{}",
                    r.id, r.label, r.prob_unpruned, r.prob_pruned, r.channels_skipped, r.channels_total
                )?;
            }
            emit(&output, &rows, |w| {
                let mut wtr = csv::Writer::from_writer(w);
                for r in &rows {
                    wtr.serialize(r)?;
                }
                wtr.flush()?;
                Ok(())
            })
        }
    }
}

pub fn cmd_analyze_weights(
    model: &ModelArgs,
    thresholds: &[f32],
    manifest: Option<&Path>,
    output: &OutputArgs,
    stdout: &mut dyn Write,
) -> Result<()> {
    let net = load_model(model)?;
    let mut report = stats::weight_sparsity(&net, thresholds)?;
    if let Some(path) = manifest {
        let data = DatasetManifest::load(path, None)?;
        data.check_classes(net.output_shape().len())?;
        let cfg = PruneConfig::off();
        let base = eval::evaluate(&net, &data, &cfg, &[1, 5])?;
        let mut classes = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let pruned = stats::static_prune(&net, t)?;
            let r = eval::evaluate(&pruned, &data, &cfg, &[1, 5])?;
            classes.push(DropClass::from_drops(
                base.accuracy(1).unwrap() - r.accuracy(1).unwrap(),
                base.accuracy(5).unwrap() - r.accuracy(5).unwrap(),
            ));
        }
        report.accuracy_class = Some(classes);
    }
    writeln!(stdout, "threshold\tall_parameters\tconv_kernels")?;
    for (i, t) in report.thresholds.iter().enumerate() {
        writeln!(
            stdout,
            "{t}\t{}\t{}",
            pct(report.all_parameters.fractions[i]),
            pct(report.conv_kernels.fractions[i])
        )?;
    }
    emit(output, &report, |w| report.write_csv(w))
}

pub fn cmd_infer(
    model: &ModelArgs,
    prune: &PruneArgs,
    image: &Path,
    classes: Option<&Path>,
    trace: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let net = load_model(model)?;
    let cfg = prune.config(PruneMode::Off)?;
    let names = classes.map(eval::read_class_names).transpose()?.unwrap_or_default();
    let input = eval::load_image_file(image, net.input)?;
    let mut recorder = LoadRecorder::new();
    let ranking = eval::classify_recorded(&net, &input, &cfg, &mut recorder)?;
    for r in ranking.iter().take(5) {
        let name = names.get(r.class).cloned().unwrap_or_else(|| format!("class{}", r.class));
        writeln!(stdout, "{name}\t{:.6}", r.score)?;
    }
    if let Some(path) = trace {
        let mut w = create(path)?;
        recorder.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn cmd_eval(
    model: &ModelArgs,
    prune: &PruneArgs,
    data: &DataArgs,
    output: &OutputArgs,
    trace: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let net = load_model(model)?;
    let cfg = prune.config(PruneMode::Off)?;
    let manifest = load_data(data, &net)?;
    let report = eval::evaluate(&net, &manifest, &cfg, &[1, 5])?;
    writeln!(stdout, "images\t{}", report.evaluated)?;
    for t in &report.top_k {
        writeln!(stdout, "top{}\t{}", t.k, pct(t.accuracy))?;
    }
    if !report.loads.is_empty() {
        if let Ok(s) = savings_ratio(&report.loads) {
            writeln!(stdout, "load reduction\t{}", pct(s.total_saved_fraction))?;
        }
    }
    for s in &report.skipped {
        writeln!(stdout, "skipped\t{}\t{}", s.id, s.error)?;
    }
    if let Some(path) = trace {
        let mut w = create(path)?;
        report.loads.write_csv(&mut w)?;
        w.flush()?;
    }
    emit(output, &report, |w| report.write_csv(w))
}

pub fn cmd_sweep(
    model: &ModelArgs,
    prune: &PruneArgs,
    data: &DataArgs,
    epsilons: &[f32],
    output: &OutputArgs,
    stdout: &mut dyn Write,
) -> Result<()> {
    let net = load_model(model)?;
    let base = prune.config(PruneMode::Literal)?;
    let manifest = load_data(data, &net)?;
    let result = eval::epsilon_sweep(&net, &manifest, epsilons, &base)?;
    writeln!(
        stdout,
        "baseline\ttop1 {}\ttop5 {}\t({} images)",
        pct(result.baseline_top1),
        pct(result.baseline_top5),
        result.evaluated
    )?;
    writeln!(stdout, "epsilon\ttop1_loss\ttop5_loss\tload_reduction")?;
    for r in &result.rows {
        writeln!(stdout, "{}\t{}\t{}\t{}", r.epsilon, pct(r.top1_loss), pct(r.top5_loss), pct(r.load_reduction))?;
    }
    emit(output, &result, |w| result.write_csv(w))
}

pub fn cmd_static_prune(model: &ModelArgs, epsilon: f32, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let net = load_model(model)?;
    let pruned = stats::static_prune(&net, epsilon)?;
    let mut w = create(out)?;
    write_weights(&pruned, &mut w)?;
    w.flush()?;
    let before = stats::weight_sparsity(&net, &[0.0])?.all_parameters;
    let after = stats::weight_sparsity(&pruned, &[0.0])?.all_parameters;
    writeln!(stdout, "zeroed {} of {} coefficients", after.within[0] - before.within[0], after.coefficients)?;
    Ok(())
}
