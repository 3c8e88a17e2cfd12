//! Registered experiment variants and the diagnostic grids built from them.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{DistillVariant, ExperimentConfig, FinalTask, NetworkConfig, Task};
use crate::error::{Error, Result};
use crate::metrics::{DepthMetrics, MetricsRow, ParsingMetrics, RelDenominator};
use crate::train::{evaluate, two_phase_train};

/// A named network configuration override.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExperimentVariant {
    pub name: &'static str,
    pub distill: DistillVariant,
    pub final_tasks: Vec<FinalTask>,
    pub active_inputs: Vec<Task>,
    pub deep_supervision: bool,
    /// Set when the variant's definition is an interpretation rather than a
    /// direct reading of its name.
    pub note: Option<&'static str>,
}

impl ExperimentVariant {
    /// `base` with this variant's distillation, tasks and supervision.
    pub fn apply(&self, base: &NetworkConfig) -> NetworkConfig {
        NetworkConfig {
            distill_variant: self.distill,
            final_tasks: self.final_tasks.clone(),
            active_inputs: self.active_inputs.clone(),
            deep_supervision: self.deep_supervision,
            ..base.clone()
        }
    }
}

const DE: &[FinalTask] = &[FinalTask::Depth];
const SP: &[FinalTask] = &[FinalTask::Parsing];
const BOTH: &[FinalTask] = &[FinalTask::Depth, FinalTask::Parsing];
const ALL_INPUTS: &[Task] = &[Task::Depth, Task::Parsing, Task::Normal, Task::Contour];

fn variant(
    name: &'static str,
    distill: DistillVariant,
    finals: &[FinalTask],
    inputs: &[Task],
    deep_supervision: bool,
    note: Option<&'static str>,
) -> ExperimentVariant {
    ExperimentVariant {
        name,
        distill,
        final_tasks: finals.to_vec(),
        active_inputs: inputs.to_vec(),
        deep_supervision,
        note,
    }
}

/// Every registered variant, each name exactly once.
pub fn registry() -> Vec<ExperimentVariant> {
    use DistillVariant as V;
    vec![
        variant("Front-end + DE", V::None, DE, ALL_INPUTS, false, None),
        variant("Front-end + SP", V::None, SP, ALL_INPUTS, false, None),
        variant("Front-end + DE + SP", V::None, BOTH, ALL_INPUTS, false, None),
        variant("PAD-Net (Distillation A + DE)", V::A, DE, ALL_INPUTS, true, None),
        variant("PAD-Net (Distillation B + DE)", V::B, DE, ALL_INPUTS, true, None),
        variant("PAD-Net (Distillation C + DE)", V::C, DE, ALL_INPUTS, true, None),
        variant("PAD-Net (Distillation A + SP)", V::A, SP, ALL_INPUTS, true, None),
        variant("PAD-Net (Distillation B + SP)", V::B, SP, ALL_INPUTS, true, None),
        variant("PAD-Net (Distillation C + SP)", V::C, SP, ALL_INPUTS, true, None),
        variant("PAD-Net (Distillation C + DE + SP)", V::C, BOTH, ALL_INPUTS, true, None),
        variant(
            "MTDN-mds",
            V::MatchedCapacity,
            BOTH,
            ALL_INPUTS,
            true,
            Some("interpretation: deep supervision with distillation capacity matched, cross-task messages disabled"),
        ),
        variant(
            "MTDN-inp0",
            V::None,
            BOTH,
            ALL_INPUTS,
            true,
            Some("deep supervision on all four heads, decoders read front-end features"),
        ),
        variant("MTDN-inp2", V::C, BOTH, &[Task::Depth, Task::Parsing], true, None),
        variant("MTDN-inp3", V::C, BOTH, &[Task::Depth, Task::Parsing, Task::Normal], true, None),
        variant("MTDN-full", V::C, BOTH, ALL_INPUTS, true, None),
    ]
}

pub fn find_variant(name: &str) -> Option<ExperimentVariant> {
    registry().into_iter().find(|v| v.name == name)
}

/// Named row sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Baselines,
    /// Depth-side comparison of the distillation modules.
    DistillModules,
    /// Parsing-side comparison of the distillation modules.
    DistillModulesSp,
    InputCount,
    /// Capacity control against the full model.
    Capacity,
    /// The rows gated by the trend check.
    Trend,
}

impl Grid {
    pub const ALL: [Grid; 6] = [
        Grid::Baselines,
        Grid::DistillModules,
        Grid::DistillModulesSp,
        Grid::InputCount,
        Grid::Capacity,
        Grid::Trend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Baselines => "baselines",
            Grid::DistillModules => "distill-modules",
            Grid::DistillModulesSp => "distill-modules-sp",
            Grid::InputCount => "input-count",
            Grid::Capacity => "capacity",
            Grid::Trend => "trend",
        }
    }

    pub fn rows(self) -> &'static [&'static str] {
        match self {
            Grid::Baselines => &["Front-end + DE", "Front-end + SP", "Front-end + DE + SP"],
            Grid::DistillModules => &[
                "Front-end + DE",
                "Front-end + DE + SP",
                "PAD-Net (Distillation A + DE)",
                "PAD-Net (Distillation B + DE)",
                "PAD-Net (Distillation C + DE)",
                "PAD-Net (Distillation C + DE + SP)",
            ],
            Grid::DistillModulesSp => &[
                "Front-end + SP",
                "Front-end + DE + SP",
                "PAD-Net (Distillation A + SP)",
                "PAD-Net (Distillation B + SP)",
                "PAD-Net (Distillation C + SP)",
                "PAD-Net (Distillation C + DE + SP)",
            ],
            Grid::InputCount => &["MTDN-inp0", "MTDN-inp2", "MTDN-inp3", "MTDN-full"],
            Grid::Capacity => &["MTDN-mds", "MTDN-full"],
            Grid::Trend => &["Front-end + DE", "Front-end + SP", "PAD-Net (Distillation C + DE + SP)"],
        }
    }

    pub fn variants(self) -> Vec<ExperimentVariant> {
        self.rows()
            .iter()
            .map(|n| find_variant(n).expect("grid rows are registered"))
            .collect()
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Grid::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| {
            let names: Vec<_> = Grid::ALL.iter().map(|g| g.name()).collect();
            Error::Usage(format!("unknown grid `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Result of one variant across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantOutcome {
    pub variant: ExperimentVariant,
    /// Per-seed metrics, or the error that stopped the run.
    pub runs: Vec<(u64, std::result::Result<MetricsRow, String>)>,
    /// Median over the successful runs; `None` when every run failed.
    pub median: Option<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub grid: Grid,
    pub outcomes: Vec<VariantOutcome>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&MetricsRow> {
        self.outcomes
            .iter()
            .find(|o| o.variant.name == name)
            .and_then(|o| o.median.as_ref())
    }

    /// Median table; failed variants are listed with undefined cells.
    pub fn table(&self) -> String {
        let rows: Vec<MetricsRow> = self
            .outcomes
            .iter()
            .map(|o| {
                o.median.clone().unwrap_or_else(|| MetricsRow {
                    method: o.variant.name.to_string(),
                    depth: None,
                    parsing: None,
                })
            })
            .collect();
        crate::metrics::format_table(&rows)
    }

    /// Failures and interpretation notes, one per line.
    pub fn notes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for o in &self.outcomes {
            if let Some(n) = o.variant.note {
                out.push(format!("{}: {n}", o.variant.name));
            }
            for (seed, r) in &o.runs {
                if let Err(e) = r {
                    out.push(format!("{} (seed {seed}) failed: {e}", o.variant.name));
                }
            }
        }
        out
    }
}

/// Median of `values`; the mean of the middle pair for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

/// Field-wise median of metric rows.
pub fn median_row(method: &str, rows: &[MetricsRow]) -> MetricsRow {
    let depths: Vec<&DepthMetrics> = rows.iter().filter_map(|r| r.depth.as_ref()).collect();
    let parsings: Vec<&ParsingMetrics> = rows.iter().filter_map(|r| r.parsing.as_ref()).collect();
    let med = |f: &dyn Fn(usize) -> f64, n: usize| median(&mut (0..n).map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    let depth = (!depths.is_empty()).then(|| {
        let n = depths.len();
        DepthMetrics {
            rel: med(&|i| depths[i].rel, n),
            rms: med(&|i| depths[i].rms, n),
            log10: med(&|i| depths[i].log10, n),
            delta1: med(&|i| depths[i].delta1, n),
            delta2: med(&|i| depths[i].delta2, n),
            delta3: med(&|i| depths[i].delta3, n),
            pixels: depths[0].pixels,
        }
    });
    let parsing = (!parsings.is_empty()).then(|| {
        let n = parsings.len();
        let classes = parsings[0].per_class_iou.len();
        ParsingMetrics {
            mean_iou: med(&|i| parsings[i].mean_iou, n),
            mean_accuracy: med(&|i| parsings[i].mean_accuracy, n),
            pixel_accuracy: med(&|i| parsings[i].pixel_accuracy, n),
            per_class_iou: (0..classes)
                .map(|c| median(&mut parsings.iter().filter_map(|p| p.per_class_iou.get(c).copied().flatten()).collect::<Vec<_>>()))
                .collect(),
            pixels: parsings[0].pixels,
        }
    });
    MetricsRow {
        method: method.to_string(),
        depth,
        parsing,
    }
}

/// Trains `variant` on `base` with `seed` and evaluates on the validation split.
pub fn run_variant(variant: &ExperimentVariant, base: &ExperimentConfig, seed: u64) -> Result<MetricsRow> {
    let net = variant.apply(&base.network);
    net.validate()?;
    let (train, val) = base.data.load_splits()?;
    let state = two_phase_train(&net, &base.training, &train, seed, |_, _| Ok(())).map_err(|f| f.error)?;
    let eval = evaluate(&state.params, &net, &val, RelDenominator::Gt, false)?;
    Ok(MetricsRow {
        method: variant.name.to_string(),
        depth: eval.depth,
        parsing: eval.parsing,
    })
}

/// Runs every variant of `grid` for each seed. A failing run is recorded and
/// the grid continues. `progress` is called after each run.
pub fn run_grid(
    grid: Grid,
    base: &ExperimentConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&ExperimentVariant, u64, &std::result::Result<MetricsRow, String>),
) -> AblationReport {
    let outcomes = grid
        .variants()
        .into_iter()
        .map(|variant| {
            let runs: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let r = run_variant(&variant, base, seed).map_err(|e| e.to_string());
                    progress(&variant, seed, &r);
                    (seed, r)
                })
                .collect();
            let ok: Vec<MetricsRow> = runs.iter().filter_map(|(_, r)| r.as_ref().ok().cloned()).collect();
            let median = (!ok.is_empty()).then(|| median_row(variant.name, &ok));
            VariantOutcome { variant, runs, median }
        })
        .collect();
    AblationReport { grid, outcomes }
}
