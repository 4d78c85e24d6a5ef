//! Sweep runner: one seeded training run per grid cell, results collected
//! into a single CSV. A failing cell is recorded and the sweep continues.
//!
//! Cells share the base config's seeds unless a cell overrides them, so any
//! two cells differ only through their listed overrides. Disabled components
//! draw no randomness, which makes the all-off cell byte-identical to a
//! standalone run of the baseline config.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{apply_overrides, TrainConfig};
use crate::data::{Corpus, Sample, Split};
use crate::scalar::Scalar;
use crate::tensor::TensorError;
use crate::trainer::{run_train, TrainError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    pub name: String,
    pub cells: Vec<GridCell>,
}

fn cell(name: &str, kv: &[(&str, Value)]) -> GridCell {
    GridCell {
        name: name.into(),
        overrides: kv.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}

/// Three toggles in the reference layout: baseline, each addition, full.
fn components_grid() -> Grid {
    let row = |name: &str, pi: bool, fea: bool, se: bool| {
        cell(
            name,
            &[
                ("enable_mimpi", json!(pi)),
                ("enable_mimfea", json!(fea)),
                ("enable_mimse", json!(se)),
            ],
        )
    };
    Grid {
        name: "components".into(),
        cells: vec![
            row("baseline", false, false, false),
            row("pi", true, false, false),
            row("pi_fea", true, true, false),
            row("se", false, false, true),
            row("pi_se", true, false, true),
            row("pi_fea_se", true, true, true),
        ],
    }
}

/// Plain reconstruction against the class-wise variant, pixel loss only.
fn classwise_grid() -> Grid {
    let base = [
        ("enable_mimfea", json!(false)),
        ("enable_mimse", json!(false)),
    ];
    let row = |name: &str, pi: bool, classwise: bool| {
        let mut kv = base.to_vec();
        kv.push(("enable_mimpi", json!(pi)));
        kv.push(("classwise_mim", json!(classwise)));
        cell(name, &kv)
    };
    Grid {
        name: "classwise".into(),
        cells: vec![
            row("no_mim", false, true),
            row("basic_mim", true, false),
            row("classwise_mim", true, true),
        ],
    }
}

/// Feature-aggregation variants: drop the running dictionary, the confidence
/// weighting, or both, on top of the full objective.
fn aggregation_grid() -> Grid {
    let row = |name: &str, dic: bool, conf: bool| {
        cell(name, &[("use_dictionary", json!(dic)), ("use_confidence", json!(conf))])
    };
    Grid {
        name: "aggregation".into(),
        cells: vec![
            row("no_dic_no_conf", false, false),
            row("no_dic", false, true),
            row("no_conf", true, false),
            row("dic_conf", true, true),
        ],
    }
}

/// Semantic consistency alone on top of the baseline, squared error against
/// cross entropy.
fn semantic_grid() -> Grid {
    let base = [
        ("enable_mimpi", json!(false)),
        ("enable_mimfea", json!(false)),
    ];
    let row = |name: &str, se: bool, loss: &str| {
        let mut kv = base.to_vec();
        kv.push(("enable_mimse", json!(se)));
        kv.push(("semantic_loss", json!(loss)));
        cell(name, &kv)
    };
    Grid {
        name: "semantic".into(),
        cells: vec![
            row("baseline", false, "cross_entropy"),
            row("mse", true, "mse"),
            row("ce", true, "cross_entropy"),
        ],
    }
}

/// Mask geometry sweep, full objective.
fn masking_grid() -> Grid {
    let mut cells = Vec::new();
    for &ratio in &[0.3, 0.4, 0.5] {
        for &patch in &[4usize, 6, 8] {
            cells.push(cell(
                &format!("r{:02}_p{patch}", (ratio * 100.0) as u32),
                &[("ratio", json!(ratio)), ("patch", json!(patch))],
            ));
        }
    }
    Grid { name: "masking".into(), cells }
}

pub const BUILTIN_GRIDS: &[&str] = &["components", "classwise", "aggregation", "semantic", "masking"];

pub fn builtin_grid(name: &str) -> Option<Grid> {
    match name {
        "components" => Some(components_grid()),
        "classwise" => Some(classwise_grid()),
        "aggregation" => Some(aggregation_grid()),
        "semantic" => Some(semantic_grid()),
        "masking" => Some(masking_grid()),
        _ => None,
    }
}

fn validate_grid(grid: &Grid) -> Result<(), TensorError> {
    if grid.cells.is_empty() {
        return Err(TensorError::InvalidArgument("grid has no cells".into()));
    }
    let mut seen = BTreeSet::new();
    for c in &grid.cells {
        let ok_name = !c.name.is_empty()
            && c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-');
        if !ok_name {
            return Err(TensorError::InvalidArgument(format!(
                "cell name {:?} must be nonempty [A-Za-z0-9_-]",
                c.name
            )));
        }
        if !seen.insert(&c.name) {
            return Err(TensorError::InvalidArgument(format!("duplicate cell name {:?}", c.name)));
        }
    }
    Ok(())
}

pub fn parse_grid(text: &str) -> Result<Grid, TensorError> {
    let grid: Grid = serde_json::from_str(text)
        .map_err(|e| TensorError::InvalidArgument(format!("grid parse: {e}")))?;
    validate_grid(&grid)?;
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub name: String,
    pub miou: Option<f64>,
    pub error: Option<String>,
    pub out_dir: PathBuf,
}

/// Runs every cell into `out_dir/<cell name>/` and writes
/// `out_dir/results.csv` with one row per cell, in grid order.
pub fn run_ablation<S: Scalar>(
    base: &TrainConfig,
    grid: &Grid,
    corpus: &Corpus,
    split: &Split,
    val: Option<&[&Sample]>,
    out_dir: &Path,
) -> Result<Vec<CellOutcome>, TrainError> {
    validate_grid(grid)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path: path.clone(), source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let mut outcomes = Vec::with_capacity(grid.cells.len());
    for c in &grid.cells {
        let dir = out_dir.join(&c.name);
        let run = apply_overrides(base, &c.overrides)
            .map_err(TrainError::from)
            .and_then(|cfg| run_train::<S>(&cfg, corpus, split, val, &dir, None));
        let (miou, error) = match run {
            Ok(summary) => (summary.final_eval.map(|e| e.miou), None),
            Err(e) => (None, Some(e.to_string())),
        };
        outcomes.push(CellOutcome { name: c.name.clone(), miou, error, out_dir: dir });
    }

    let csv_path = out_dir.join("results.csv");
    let mut f = File::create(&csv_path).map_err(io(&csv_path))?;
    writeln!(f, "cell,miou,error").map_err(io(&csv_path))?;
    for o in &outcomes {
        let miou = o.miou.map(|m| m.to_string()).unwrap_or_default();
        let error = o
            .error
            .as_deref()
            .unwrap_or("")
            .replace(['\n', '\r'], " ")
            .replace(',', ";");
        writeln!(f, "{},{},{}", o.name, miou, error).map_err(io(&csv_path))?;
    }
    Ok(outcomes)
}
