use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use geopool::gistats::{gi_star_map, Weighting};
use geopool::grid::{read_tensor, write_csv, write_tensor};
use geopool::harness::{report, run_experiment, ExperimentPlan, ReportFormat};
use geopool::metrics::ConfusionMatrix;
use geopool::micronet::{predict, train, Arm, ModelParams, ReferenceArchitecture, TrainConfig};
use geopool::pooling::{hotspot_stats, pool};
use geopool::synthdata::{
    generate_split, label_file_name, read_samples, read_spec, write_split, Distribution, SceneSpec,
};
use geopool::{Error, FeatureMap, LabelGrid, PoolConfig, PoolMode, Result};

// Stdout writes that ignore a closed pipe (`geopool default-plan | head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "geopool",
    version,
    about = "Gi* hotspot statistics, G-pooling and a micro segmentation network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Distance,
    Inverse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Gpool,
    Max,
    Avg,
    Stride,
}

impl Mode {
    fn pool_mode(self) -> PoolMode {
        match self {
            Mode::Gpool => PoolMode::GPool,
            Mode::Max => PoolMode::Max,
            Mode::Avg => PoolMode::Average,
            Mode::Stride => PoolMode::StrideSubsample,
        }
    }

    fn arm(self, threshold: f64) -> Arm {
        match self {
            Mode::Gpool => Arm::gpool(threshold),
            Mode::Max => Arm::Max,
            Mode::Avg => Arm::Average,
            Mode::Stride => Arm::Stride,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Gi* of every non-overlapping window.
    Gistar {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        #[arg(long)]
        output: PathBuf,
        /// Also write the values as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "distance")]
        weights: Weights,
    },
    /// Pool a tensor.
    Pool {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
        threshold: f64,
        #[arg(long)]
        output: PathBuf,
        /// Write hotspot flags as a 0/1 tensor.
        #[arg(long)]
        flags: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "distance")]
        weights: Weights,
    },
    /// Percentage of 4x4 windows taking the hotspot branch, per threshold.
    HotspotStats {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, num_args = 1.., default_values_t = [1.0, 1.5, 2.0], allow_hyphen_values = true)]
        threshold: Vec<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic train/val/test split.
    GenData {
        #[arg(long, value_enum)]
        dist: Dist,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        train: usize,
        #[arg(long, default_value_t = 8)]
        val: usize,
        #[arg(long, default_value_t = 16)]
        test: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the reference network on a gen-data directory.
    Train {
        #[arg(long, value_enum)]
        arch: Mode,
        #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 25)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the report path with a `.gipls` extension.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write predicted label maps for every image in a directory.
    Predict {
        #[arg(long, value_enum)]
        arch: Mode,
        #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
        threshold: f64,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A split directory holding img_/lbl_ pairs.
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score predicted label maps against truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (arm, seed) cell of a plan.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the default experiment plan as JSON.
    DefaultPlan,
}

fn weighting(w: Weights) -> Weighting {
    match w {
        Weights::Distance => Weighting::Distance,
        Weights::Inverse => Weighting::InverseDistance,
    }
}

/// `read_tensor` with the path in any I/O error.
fn load(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    read_tensor(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn hotspot_table(inputs: &[PathBuf], thresholds: &[f64]) -> Result<(String, String)> {
    let maps = inputs.iter().map(load).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &t in thresholds {
        let results = maps
            .iter()
            .map(|m| pool(m, &PoolConfig::gpool(t)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = results.iter().collect();
        let stats = hotspot_stats(&refs, t)?;
        // Mean over feature maps of the per-map rate.
        let mean = stats.per_layer_rate.iter().sum::<f64>() / stats.per_layer_rate.len() as f64;
        rows.push((t, mean, stats.per_layer_rate));
    }
    let mut text = format!("{:>9}  {:>10}\n", "threshold", "hotspot_%");
    let mut csv = String::from("threshold,hotspot_pct");
    for i in 0..inputs.len() {
        let _ = write!(csv, ",input{i}_pct");
    }
    csv.push('\n');
    for (t, mean, per) in &rows {
        let _ = writeln!(text, "{t:>9.2}  {mean:>10.2}");
        let per: Vec<String> = per.iter().map(f64::to_string).collect();
        let _ = writeln!(csv, "{t},{mean},{}", per.join(","));
    }
    Ok((text, csv))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gistar {
            input,
            window,
            stride,
            output,
            csv,
            weights,
        } => {
            let map = load(&input)?;
            let config = PoolConfig {
                window,
                stride,
                mode: PoolMode::GPool,
                threshold: 0.0,
                weighting: weighting(weights),
            };
            let g = gi_star_map(&map, &config)?;
            write_tensor(g.as_feature_map(), &output)?;
            if let Some(csv) = csv {
                write_csv(g.as_feature_map(), csv)?;
            }
        }
        Command::Pool {
            input,
            mode,
            window,
            threshold,
            output,
            flags,
            weights,
        } => {
            let map = load(&input)?;
            let config = PoolConfig::new(mode.pool_mode(), window, threshold)?.with_weighting(weighting(weights));
            let r = pool(&map, &config)?;
            write_tensor(r.output(), &output)?;
            if let Some(flags) = flags {
                write_tensor(&r.flags_map(), flags)?;
            }
            if mode.pool_mode() == PoolMode::GPool {
                outln!("hotspot windows: {:.2}%", r.hotspot_rate());
            }
        }
        Command::HotspotStats { inputs, threshold, csv } => {
            let (text, table) = hotspot_table(&inputs, &threshold)?;
            out!("{text}");
            if let Some(csv) = csv {
                fs::write(csv, table)?;
            }
        }
        Command::GenData {
            dist,
            seed,
            train,
            val,
            test,
            out_dir,
        } => {
            let dist = match dist {
                Dist::A => Distribution::A,
                Dist::B => Distribution::B,
            };
            let spec = SceneSpec::new(dist);
            let split = generate_split(&spec, seed, train, val, test)?;
            write_split(&out_dir, &spec, &split)?;
        }
        Command::Train {
            arch,
            threshold,
            seed,
            data_dir,
            epochs,
            out,
            checkpoint,
        } => {
            let spec = read_spec(&data_dir)?;
            let k = spec.num_classes();
            let train_set = read_samples(data_dir.join("train"), k)?;
            let val_set = read_samples(data_dir.join("val"), k)?;
            let arm = arch.arm(threshold);
            let net = ReferenceArchitecture::build(arm, train_set[0].image.shape(), k)?;
            let config = TrainConfig {
                seed,
                epochs_max: epochs,
                ..TrainConfig::default()
            };
            let mut outcome = train(&net, &train_set, &val_set, &config)?;
            outcome.report.arm = Some(arm.label());
            write_json(&out, &outcome.report)?;
            outcome
                .params
                .save(checkpoint.unwrap_or_else(|| out.with_extension("gipls")))?;
            outln!(
                "{}: {} epochs, stop {:?}, train accuracy {:.4}",
                arm,
                outcome.report.epochs.len(),
                outcome.report.stop_reason,
                outcome.report.train_pixel_accuracy.unwrap_or(f64::NAN)
            );
        }
        Command::Predict {
            arch,
            threshold,
            checkpoint,
            input_dir,
            classes,
            out_dir,
        } => {
            let samples = read_samples(&input_dir, classes)?;
            let net = ReferenceArchitecture::build(arch.arm(threshold), samples[0].image.shape(), classes)?;
            let params = ModelParams::load(&net, &checkpoint)?;
            fs::create_dir_all(&out_dir)?;
            for (i, s) in samples.iter().enumerate() {
                let pred = predict(&params, &net, &s.image)?;
                write_tensor(&pred.to_feature_map(), out_dir.join(label_file_name(i)))?;
            }
        }
        Command::Eval {
            pred_dir,
            truth_dir,
            classes,
            out,
        } => {
            let mut cm = ConfusionMatrix::new(classes)?;
            let mut i = 0;
            while truth_dir.join(label_file_name(i)).exists() {
                let truth = LabelGrid::from_feature_map(&load(truth_dir.join(label_file_name(i)))?, classes)?;
                let pred = LabelGrid::from_feature_map(&load(pred_dir.join(label_file_name(i)))?, classes)?;
                cm.accumulate(&pred, &truth)?;
                i += 1;
            }
            if i == 0 {
                return Err(Error::Malformed {
                    path: truth_dir.display().to_string(),
                    reason: format!("no {} found", label_file_name(0)),
                });
            }
            let r = cm.finalize()?;
            write_json(&out, &r)?;
            outln!(
                "mIoU {:.4}  pixel accuracy {:.4}  over {i} maps",
                r.miou,
                r.pixel_accuracy
            );
        }
        Command::Experiment { plan, out_dir } => {
            let plan: ExperimentPlan = serde_json::from_str(
                &fs::read_to_string(&plan).map_err(|e| Error::InvalidArgument(format!("{}: {e}", plan.display())))?,
            )?;
            let table = run_experiment(&plan, Some(&out_dir))?;
            let text = report(&table, ReportFormat::Text);
            fs::write(out_dir.join("table.txt"), &text)?;
            fs::write(out_dir.join("table.csv"), report(&table, ReportFormat::Csv))?;
            out!("{text}");
        }
        Command::DefaultPlan => {
            outln!("{}", serde_json::to_string_pretty(&ExperimentPlan::default())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
