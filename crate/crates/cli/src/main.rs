//! Batch-run front end. Every command prints its resolved configuration as
//! JSON on the first stdout line, writes files only under --out, and exits
//! nonzero with a one-line reason on failure.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use maskseg::ablation::{builtin_grid, parse_grid, run_ablation, Grid, BUILTIN_GRIDS};
use maskseg::config::{load_config, TrainConfig};
use maskseg::data::{load_corpus, make_split, read_split, synth_generate, write_split, Corpus, Sample, SynthConfig};
use maskseg::eval::evaluate;
use maskseg::masking::{sample_mask, MaskSpec};
use maskseg::oracle::{run_suite, TOLERANCE};
use maskseg::rng::rng_named;
use maskseg::trainer::{run_train, TrainState};

#[derive(Parser)]
#[command(name = "maskseg", version, about = "Semi-supervised segmentation training tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shape corpus with dense labels
    Synth(SynthArgs),
    /// Cut a corpus into labeled and unlabeled id lists
    Split(SplitArgs),
    /// Train on a corpus split, writing metrics and checkpoints
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus
    Eval(EvalArgs),
    /// Run the finite-difference oracle suite
    Gradcheck(GradcheckArgs),
    /// Sample patch masks and report per-seed cell statistics
    Maskstats(MaskstatsArgs),
    /// Train every cell of an ablation grid and collect results
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples
    #[arg(long, default_value_t = 264)]
    n: usize,
    /// Image extents
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    hw: Vec<usize>,
    /// Class count including background
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing corpus at --out
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct SplitArgs {
    /// Corpus directory (as written by synth)
    #[arg(long)]
    corpus: PathBuf,
    /// Labeled subset size; the rest becomes the unlabeled pool
    #[arg(long)]
    n_labeled: usize,
    #[arg(long, default_value_t = 2)]
    seed: u64,
    /// Directory for split.json (defaults to the corpus directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config JSON; omitted keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory containing split.json (see `split --out`)
    #[arg(long)]
    split: PathBuf,
    /// Held-out corpus directory for evaluation
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run directory: metrics.csv and checkpoints land here
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint manifest (ckpt_*.json) to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    /// key=value config overrides, applied after --config
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint manifest (ckpt_*.json)
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only run cases whose name contains this substring
    #[arg(long)]
    module: Option<String>,
}

#[derive(Args)]
struct MaskstatsArgs {
    #[arg(long, default_value_t = 0.4)]
    ratio: f64,
    #[arg(long, default_value_t = 6)]
    patch: usize,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    /// Mask extents
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [36, 36])]
    hw: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Builtin grid name (components, classwise, aggregation, semantic,
    /// masking) or a path to a grid JSON file
    #[arg(long)]
    grid: String,
    /// Base config JSON shared by all cells
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory containing split.json
    #[arg(long)]
    split: PathBuf,
    /// Held-out corpus directory for evaluation
    #[arg(long)]
    val: Option<PathBuf>,
    /// Sweep directory: one subdirectory per cell plus results.csv
    #[arg(long)]
    out: PathBuf,
    /// key=value overrides on the base config
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Maskstats(a) => maskstats(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn parse_set(list: &[String]) -> Result<Vec<(String, String)>> {
    list.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .with_context(|| format!("override {kv:?} is not KEY=VALUE"))
        })
        .collect()
}

fn resolve_config(path: &Option<PathBuf>, set: &[String]) -> Result<TrainConfig> {
    let text = path
        .as_ref()
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let cfg = load_config(text.as_deref(), &parse_set(set)?)?;
    Ok(cfg)
}

fn corpus_at(dir: &Path) -> Result<Corpus> {
    load_corpus(dir).with_context(|| format!("loading corpus at {}", dir.display()))
}

fn val_corpus(dir: &Option<PathBuf>, train: &Corpus) -> Result<Option<Corpus>> {
    let Some(dir) = dir else { return Ok(None) };
    let c = corpus_at(dir)?;
    if (c.h, c.w, c.classes) != (train.h, train.w, train.classes) {
        bail!(
            "validation corpus is {}x{} with {} classes, training corpus {}x{} with {}",
            c.h, c.w, c.classes, train.h, train.w, train.classes
        );
    }
    Ok(Some(c))
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n: a.n,
        h: a.hw[0],
        w: a.hw[1],
        classes: a.classes,
        seed: a.seed,
        ..SynthConfig::default()
    };
    println!("{}", json!({ "command": "synth", "config": cfg, "out": a.out }));
    let manifest = synth_generate(&a.out, &cfg, a.overwrite)?;
    println!(
        "wrote {} samples ({}x{}, {} classes) under {}",
        manifest.ids.len(),
        manifest.h,
        manifest.w,
        manifest.classes,
        a.out.display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.corpus.clone());
    println!(
        "{}",
        json!({ "command": "split", "corpus": a.corpus, "n_labeled": a.n_labeled, "seed": a.seed, "out": out })
    );
    let corpus = corpus_at(&a.corpus)?;
    let ids: Vec<String> = corpus.samples.iter().map(|s| s.id.clone()).collect();
    let split = make_split(&ids, a.n_labeled, a.seed)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_split(&out, &split)?;
    println!(
        "wrote {}: {} labeled / {} unlabeled",
        out.join("split.json").display(),
        split.labeled.len(),
        split.unlabeled.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.config, &a.set)?;
    println!("{}", serde_json::to_string(&cfg)?);
    let corpus = corpus_at(&a.corpus)?;
    let split = read_split(&a.split)?;
    let val = val_corpus(&a.val, &corpus)?;
    let val_refs: Option<Vec<&Sample>> = val.as_ref().map(|c| c.samples.iter().collect());
    let summary = run_train::<f32>(
        &cfg,
        &corpus,
        &split,
        val_refs.as_deref(),
        &a.out,
        a.resume.as_deref(),
    )?;
    println!("metrics: {}", summary.metrics_path.display());
    println!("checkpoint: {}", summary.checkpoint_path.display());
    if let Some(e) = summary.final_eval {
        println!("final miou {}", e.miou);
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (state, _) = TrainState::<f32>::load(&a.ckpt, None)?;
    println!("{}", serde_json::to_string(&state.cfg)?);
    let corpus = corpus_at(&a.corpus)?;
    if corpus.classes != state.cfg.classes {
        bail!("corpus has {} classes, checkpoint {}", corpus.classes, state.cfg.classes);
    }
    let refs: Vec<&Sample> = corpus.samples.iter().collect();
    let result = evaluate(&state.net, &refs, corpus.h, corpus.w)?;
    for (c, iou) in result.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("iou_{c} {v}"),
            None => println!("iou_{c} nan"),
        }
    }
    println!("miou {}", result.miou);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    println!(
        "{}",
        json!({ "command": "gradcheck", "module": a.module, "tolerance": TOLERANCE })
    );
    let cases = run_suite(a.module.as_deref())?;
    let mut failed = 0usize;
    for c in &cases {
        let verdict = if c.passed(TOLERANCE) { "ok" } else { "FAIL" };
        println!(
            "{}: checked {}, max rel err {:.3e}, {:.2}s, {}",
            c.name, c.report.checked, c.report.max_rel_err, c.seconds, verdict
        );
        failed += usize::from(!c.passed(TOLERANCE));
    }
    if failed > 0 {
        bail!("{failed} of {} gradcheck cases at or above {TOLERANCE:e}", cases.len());
    }
    println!("all {} cases below {TOLERANCE:e}", cases.len());
    Ok(())
}

fn maskstats(a: MaskstatsArgs) -> Result<()> {
    let spec = MaskSpec::new(a.patch, a.ratio)?;
    println!(
        "{}",
        json!({ "command": "maskstats", "ratio": a.ratio, "patch": a.patch, "trials": a.trials, "h": a.hw[0], "w": a.hw[1], "seed": a.seed })
    );
    println!("seed,cells,masked_cells,fraction");
    let mut sum = 0.0;
    for t in 0..a.trials {
        let mut rng = rng_named(a.seed, "maskstats", &[t]);
        let mask = sample_mask(a.hw[0], a.hw[1], spec, &mut rng)?;
        let frac = mask.masked_cell_count() as f64 / mask.cell_count() as f64;
        sum += frac;
        println!("{t},{},{},{frac}", mask.cell_count(), mask.masked_cell_count());
    }
    println!("# mean_fraction {}", sum / a.trials as f64);
    Ok(())
}

fn load_grid(name_or_path: &str) -> Result<Grid> {
    if let Some(g) = builtin_grid(name_or_path) {
        return Ok(g);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        bail!(
            "{name_or_path:?} is neither a builtin grid ({}) nor a file",
            BUILTIN_GRIDS.join(", ")
        );
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {name_or_path}"))?;
    Ok(parse_grid(&text)?)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = resolve_config(&a.config, &a.set)?;
    println!("{}", serde_json::to_string(&base)?);
    let grid = load_grid(&a.grid)?;
    println!("# grid {} ({} cells)", grid.name, grid.cells.len());
    let corpus = corpus_at(&a.corpus)?;
    let split = read_split(&a.split)?;
    let val = val_corpus(&a.val, &corpus)?;
    let val_refs: Option<Vec<&Sample>> = val.as_ref().map(|c| c.samples.iter().collect());
    let outcomes = run_ablation::<f32>(&base, &grid, &corpus, &split, val_refs.as_deref(), &a.out)?;
    for o in &outcomes {
        match (&o.miou, &o.error) {
            (Some(m), _) => println!("{}: miou {m}", o.name),
            (None, Some(e)) => println!("{}: failed: {e}", o.name),
            (None, None) => println!("{}: done (no eval set)", o.name),
        }
    }
    println!("results: {}", a.out.join("results.csv").display());
    Ok(())
}
