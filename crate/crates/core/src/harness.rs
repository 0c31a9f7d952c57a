//! Multi-seed A/B experiment runner and its comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micronet::{
    evaluate, hotspot_sweep, train, Architecture, Arm, ReferenceArchitecture, SgdConfig, StopReason, TrainConfig,
};
use crate::synthdata::{generate_split, Distribution, SceneSpec, Split};

fn default_thresholds() -> Vec<f64> {
    vec![1.0, 1.5, 2.0]
}

fn default_batch_size() -> usize {
    4
}

fn default_true() -> bool {
    true
}

/// Every arm is trained once per seed on A and once on B. The seed drives
/// both dataset generation and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub spec_a: SceneSpec,
    pub spec_b: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs_max: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub augment_flips: bool,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Thresholds for the hotspot-rate sweep on G-pooling arms.
    #[serde(default = "default_thresholds")]
    pub hotspot_thresholds: Vec<f64>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            arms: vec![
                Arm::gpool(1.0),
                Arm::gpool(1.5),
                Arm::gpool(2.0),
                Arm::Max,
                Arm::Average,
                Arm::Stride,
            ],
            seeds: (0..5).collect(),
            spec_a: SceneSpec::new(Distribution::A),
            spec_b: SceneSpec::new(Distribution::B),
            n_train: 32,
            n_val: 8,
            n_test: 16,
            epochs_max: 25,
            batch_size: default_batch_size(),
            augment_flips: true,
            sgd: SgdConfig::default(),
            hotspot_thresholds: default_thresholds(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("plan needs at least one seed".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig("every split needs at least one sample".into()));
        }
        if self.epochs_max == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs_max and batch_size must be positive".into(),
            ));
        }
        if self.spec_a.num_classes() != self.spec_b.num_classes()
            || (self.spec_a.height, self.spec_a.width) != (self.spec_b.height, self.spec_b.width)
        {
            return Err(Error::InvalidConfig(
                "A and B specs must share geometry and classes".into(),
            ));
        }
        self.spec_a.validate()?;
        self.spec_b.validate()?;
        for arm in &self.arms {
            arm.stage()?;
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs_max: self.epochs_max,
            batch_size: self.batch_size,
            augment_flips: self.augment_flips,
            sgd: self.sgd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub miou: f64,
    pub pixel_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub hotspot_rate: f64,
}

/// One (arm, seed) run: two trainings, four evaluations on test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arm: String,
    pub seed: u64,
    pub within_a: Option<Score>,
    pub within_b: Option<Score>,
    pub a_to_b: Option<Score>,
    pub b_to_a: Option<Score>,
    /// Overall hotspot percentage of the A model on A test at the arm's
    /// own threshold.
    pub hotspot_rate: Option<f64>,
    pub sweep: Vec<SweepPoint>,
    /// Train report file names, relative to the output directory.
    pub report_a: String,
    pub report_b: String,
    pub failure: Option<String>,
}

impl Cell {
    /// Mean over both source distributions of within minus cross mIoU.
    pub fn gap(&self) -> Option<f64> {
        let (aa, ab, bb, ba) = (self.within_a?, self.a_to_b?, self.within_b?, self.b_to_a?);
        Some(((aa.miou - ab.miou) + (bb.miou - ba.miou)) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some(Self {
            median,
            min: v[0],
            max: v[n - 1],
            n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub threshold: Option<f64>,
    pub within_a_miou: Option<Aggregate>,
    pub within_a_acc: Option<Aggregate>,
    pub within_b_miou: Option<Aggregate>,
    pub within_b_acc: Option<Aggregate>,
    pub a_to_b_miou: Option<Aggregate>,
    pub a_to_b_acc: Option<Aggregate>,
    pub b_to_a_miou: Option<Aggregate>,
    pub b_to_a_acc: Option<Aggregate>,
    pub hotspot_rate: Option<Aggregate>,
    pub gap: Option<Aggregate>,
    pub sweep: Vec<(f64, Aggregate)>,
    pub failed_cells: usize,
}

/// Median generalization gap of the G-pooling 1.5 arm against max pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub gpool_arm: String,
    pub max_arm: String,
    pub gpool_median_gap: f64,
    pub max_median_gap: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub arms: Vec<ArmSummary>,
    pub cells: Vec<Cell>,
    pub directional: Option<DirectionalCheck>,
}

fn score(report: &crate::metrics::EvalReport) -> Score {
    Score {
        miou: report.miou,
        pixel_accuracy: report.pixel_accuracy,
    }
}

fn file_stem(arm: &Arm, seed: u64, dist: Distribution) -> String {
    format!("{}_seed{seed}_{dist}", arm.label())
}

fn run_cell(
    plan: &ExperimentPlan,
    arm: &Arm,
    seed: u64,
    arch: &Architecture,
    [data_a, data_b]: [&Split; 2],
    out_dir: Option<&Path>,
    cell: &mut Cell,
) -> Result<()> {
    let mut models = Vec::new();
    for (dist, data) in [(Distribution::A, &data_a), (Distribution::B, &data_b)] {
        let mut out = train(arch, &data.train, &data.val, &plan.train_config(seed))?;
        out.report.arm = Some(arm.label());
        if let Some(dir) = out_dir {
            let stem = file_stem(arm, seed, dist);
            fs::write(
                dir.join(format!("{stem}.json")),
                serde_json::to_string_pretty(&out.report)? + "\n",
            )?;
            out.params.save(dir.join(format!("{stem}.gipls")))?;
        }
        if out.report.stop_reason == StopReason::Diverged {
            return Err(Error::InvalidArgument(format!("training on {dist} diverged")));
        }
        models.push(out.params);
    }
    let (ma, mb) = (&models[0], &models[1]);
    cell.within_a = Some(score(&evaluate(ma, arch, &data_a.test)?.report));
    cell.a_to_b = Some(score(&evaluate(ma, arch, &data_b.test)?.report));
    cell.within_b = Some(score(&evaluate(mb, arch, &data_b.test)?.report));
    cell.b_to_a = Some(score(&evaluate(mb, arch, &data_a.test)?.report));
    if let Some(t) = arm.threshold() {
        cell.hotspot_rate = Some(hotspot_sweep(ma, arch, &data_a.test, &[t])?[0].overall_rate);
        cell.sweep = hotspot_sweep(ma, arch, &data_a.test, &plan.hotspot_thresholds)?
            .into_iter()
            .map(|s| SweepPoint {
                threshold: s.threshold,
                hotspot_rate: s.overall_rate,
            })
            .collect();
    }
    Ok(())
}

/// Trains and scores every (arm, seed) cell. With `out_dir`, each train
/// report and checkpoint is written there, plus `table.json`.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: Option<&Path>) -> Result<ComparisonTable> {
    plan.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let input = (3, plan.spec_a.height, plan.spec_a.width);
    let k = plan.spec_a.num_classes();
    let mut cells = Vec::new();
    for &seed in &plan.seeds {
        let data_a = generate_split(&plan.spec_a, seed, plan.n_train, plan.n_val, plan.n_test)?;
        let data_b = generate_split(&plan.spec_b, seed, plan.n_train, plan.n_val, plan.n_test)?;
        for arm in &plan.arms {
            let arch = ReferenceArchitecture::build(*arm, input, k)?;
            let mut cell = Cell {
                arm: arm.label(),
                seed,
                within_a: None,
                within_b: None,
                a_to_b: None,
                b_to_a: None,
                hotspot_rate: None,
                sweep: Vec::new(),
                report_a: format!("{}.json", file_stem(arm, seed, Distribution::A)),
                report_b: format!("{}.json", file_stem(arm, seed, Distribution::B)),
                failure: None,
            };
            if let Err(e) = run_cell(plan, arm, seed, &arch, [&data_a, &data_b], out_dir, &mut cell) {
                cell.failure = Some(e.to_string());
            }
            cells.push(cell);
        }
    }
    let table = summarize(&plan.arms, cells);
    if let Some(dir) = out_dir {
        fs::write(dir.join("table.json"), report(&table, ReportFormat::Json))?;
    }
    Ok(table)
}

/// Aggregates cells per arm, in `arms` order.
pub fn summarize(arms: &[Arm], cells: Vec<Cell>) -> ComparisonTable {
    let summaries: Vec<ArmSummary> = arms
        .iter()
        .map(|arm| {
            let label = arm.label();
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.arm == label).collect();
            let agg =
                |f: &dyn Fn(&Cell) -> Option<f64>| Aggregate::of(&mine.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
            let mut thresholds: Vec<f64> = mine.iter().flat_map(|c| c.sweep.iter().map(|p| p.threshold)).collect();
            thresholds.sort_by(f64::total_cmp);
            thresholds.dedup();
            let sweep = thresholds
                .into_iter()
                .filter_map(|t| {
                    let rates: Vec<f64> = mine
                        .iter()
                        .flat_map(|c| c.sweep.iter().filter(|p| p.threshold == t).map(|p| p.hotspot_rate))
                        .collect();
                    Aggregate::of(&rates).map(|a| (t, a))
                })
                .collect();
            ArmSummary {
                threshold: arm.threshold(),
                within_a_miou: agg(&|c| c.within_a.map(|s| s.miou)),
                within_a_acc: agg(&|c| c.within_a.map(|s| s.pixel_accuracy)),
                within_b_miou: agg(&|c| c.within_b.map(|s| s.miou)),
                within_b_acc: agg(&|c| c.within_b.map(|s| s.pixel_accuracy)),
                a_to_b_miou: agg(&|c| c.a_to_b.map(|s| s.miou)),
                a_to_b_acc: agg(&|c| c.a_to_b.map(|s| s.pixel_accuracy)),
                b_to_a_miou: agg(&|c| c.b_to_a.map(|s| s.miou)),
                b_to_a_acc: agg(&|c| c.b_to_a.map(|s| s.pixel_accuracy)),
                hotspot_rate: agg(&|c| c.hotspot_rate),
                gap: agg(&|c| c.gap()),
                sweep,
                failed_cells: mine.iter().filter(|c| c.failure.is_some()).count(),
                arm: label,
            }
        })
        .collect();
    let find = |label: &str| summaries.iter().find(|s| s.arm == label).and_then(|s| s.gap);
    let directional = match (find("gpool-1.5"), find("max")) {
        (Some(g), Some(m)) => Some(DirectionalCheck {
            gpool_arm: "gpool-1.5".into(),
            max_arm: "max".into(),
            gpool_median_gap: g.median,
            max_median_gap: m.median,
            holds: g.median <= m.median,
        }),
        _ => None,
    };
    ComparisonTable {
        arms: summaries,
        cells,
        directional,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

pub const COLUMNS: [&str; 11] = [
    "arm",
    "threshold",
    "within_a_miou",
    "within_a_acc",
    "within_b_miou",
    "within_b_acc",
    "a_to_b_miou",
    "a_to_b_acc",
    "b_to_a_miou",
    "b_to_a_acc",
    "hotspot_pct",
];

fn row_values(s: &ArmSummary) -> [Option<f64>; 10] {
    let m = |a: Option<Aggregate>| a.map(|a| a.median);
    [
        s.threshold,
        m(s.within_a_miou),
        m(s.within_a_acc),
        m(s.within_b_miou),
        m(s.within_b_acc),
        m(s.a_to_b_miou),
        m(s.a_to_b_acc),
        m(s.b_to_a_miou),
        m(s.b_to_a_acc),
        m(s.hotspot_rate),
    ]
}

/// Renders the per-arm medians. CSV carries full precision; text rounds to
/// four places and appends gap, sweep and directional lines.
pub fn report(table: &ComparisonTable, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(table).expect("table serializes") + "\n",
        ReportFormat::Csv => {
            let mut out = COLUMNS.join(",") + "\n";
            for s in &table.arms {
                let cells: Vec<String> = row_values(s)
                    .iter()
                    .map(|v| v.map(|v| v.to_string()).unwrap_or_default())
                    .collect();
                let _ = writeln!(out, "{},{}", s.arm, cells.join(","));
            }
            out
        }
        ReportFormat::Text => {
            let rows: Vec<Vec<String>> = table
                .arms
                .iter()
                .map(|s| {
                    let mut r = vec![s.arm.clone()];
                    r.extend(
                        row_values(s)
                            .iter()
                            .map(|v| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())),
                    );
                    r
                })
                .collect();
            let widths: Vec<usize> = (0..COLUMNS.len())
                .map(|i| {
                    rows.iter()
                        .map(|r| r[i].len())
                        .chain([COLUMNS[i].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: &[&str]| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                    .collect();
                padded.join("  ").trim_end().to_string() + "\n"
            };
            let mut out = line(&COLUMNS);
            for r in &rows {
                out += &line(&r.iter().map(String::as_str).collect::<Vec<_>>());
            }
            if table
                .arms
                .iter()
                .any(|s| s.gap.is_some() || !s.sweep.is_empty() || s.failed_cells > 0)
            {
                out += "\n";
            }
            for s in &table.arms {
                if let Some(g) = s.gap {
                    let _ = writeln!(
                        out,
                        "gap {}: median {:.4} min {:.4} max {:.4} over {} seeds",
                        s.arm, g.median, g.min, g.max, g.n
                    );
                }
                for (t, a) in &s.sweep {
                    let _ = writeln!(out, "sweep {} threshold {t}: hotspot {:.2}%", s.arm, a.median);
                }
                if s.failed_cells > 0 {
                    let _ = writeln!(out, "failed {}: {} cells", s.arm, s.failed_cells);
                }
            }
            if let Some(d) = &table.directional {
                let _ = writeln!(
                    out,
                    "directional {} gap {:.4} {} {} gap {:.4}: {}",
                    d.gpool_arm,
                    d.gpool_median_gap,
                    if d.holds { "<=" } else { ">" },
                    d.max_arm,
                    d.max_median_gap,
                    if d.holds { "PASS" } else { "REGRESSION" }
                );
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_median() {
        let a = Aggregate::of(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((a.median, a.min, a.max, a.n), (2.0, 1.0, 3.0, 3));
        assert_eq!(Aggregate::of(&[4.0, 1.0, 2.0, 3.0]).unwrap().median, 2.5);
        assert!(Aggregate::of(&[]).is_none());
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = summarize(&[], Vec::new());
        assert_eq!(report(&t, ReportFormat::Csv), COLUMNS.join(",") + "\n");
        assert_eq!(report(&t, ReportFormat::Text).lines().count(), 1);
    }

    #[test]
    fn plan_defaults_and_validation() {
        let plan = ExperimentPlan::default();
        plan.validate().unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentPlan>(&json).unwrap(), plan);
        let bad = ExperimentPlan { seeds: vec![], ..plan };
        assert!(bad.validate().is_err());
    }
}
