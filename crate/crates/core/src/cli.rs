//! The `ear` command line.
//!
//! Every subcommand loads and checks all of its inputs before it creates the
//! output directory or writes a file.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::ecgvf::{load_dataset, save_dataset, ModelImages, FilterSampling};
use crate::erasure::{run_erasure, EraseConfig, PromptPair, UpdatePolicy, WindowOrdering};
use crate::eval::{ablation_sweep, sweep_csv, Evaluator, SweepAxis};
use crate::image::decode_image;
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{ModelParams, PretrainConfig, Vocab};
use crate::pipeline::{self, stage_seed, Stage, DEFAULT_ROOT_SEED, DEFAULT_SURROGATE, DEFAULT_TARGET};
use crate::world::SyntheticWorld;

pub const OUT_DIR_ENV: &str = "EAR_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ear", version, about = "Concept erasure for a toy autoregressive image model")]
pub struct Cli {
    /// Root seed; each stage derives its own seed from it.
    #[arg(long, global = true, default_value_t = DEFAULT_ROOT_SEED)]
    pub seed: u64,

    /// Directory for default input and output paths.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the synthetic concept world.
    MakeWorld {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the image model on the world's prompts.
    Pretrain {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = PretrainConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = PretrainConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = PretrainConfig::default().batch)]
        batch: usize,
    },
    /// Propose target/surrogate prompt pairs.
    GenDataset {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_TARGET)]
        concept: String,
        #[arg(long, default_value = DEFAULT_SURROGATE)]
        surrogate: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep only pairs whose images behave as labelled.
    FilterDataset {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fine-tune the model so the dataset's concept disappears.
    Erase {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        erase: EraseArgs,
    },
    /// Render one prompt to a PPM image.
    Generate {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// Sample at this temperature instead of decoding greedily.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an erased model against the original.
    Eval {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long)]
        erased: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_TARGET)]
        concept: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Erase and evaluate once per value of one setting.
    Ablate {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        erase: EraseArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    WindowLength,
    MuOnOff,
    LayerDepth,
    Ordering,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::WindowLength => SweepAxis::WindowLength,
            AxisArg::MuOnOff => SweepAxis::MuOnOff,
            AxisArg::LayerDepth => SweepAxis::LayerDepth,
            AxisArg::Ordering => SweepAxis::Ordering,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OrderingArg {
    Sequential,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PolicyArg {
    PerWindow,
    AccumulateAll,
}

#[derive(Debug, Args)]
pub struct EraseArgs {
    #[arg(long, default_value_t = EraseConfig::default().eta)]
    pub eta: f64,
    /// Loss threshold; `inf` discards every window.
    #[arg(long, default_value_t = EraseConfig::default().mu)]
    pub mu: f64,
    #[arg(long, default_value_t = EraseConfig::default().window)]
    pub window: usize,
    /// `n` for the first n layers, or `a..b`.
    #[arg(long, default_value = "5")]
    pub layers: String,
    #[arg(long, value_delimiter = ',', default_value = "q,k,v")]
    pub projections: Vec<String>,
    #[arg(long, default_value_t = EraseConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = EraseConfig::default().lr)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OrderingArg::Sequential)]
    pub ordering: OrderingArg,
    #[arg(long, value_enum, default_value_t = PolicyArg::PerWindow)]
    pub policy: PolicyArg,
    /// Leave optimizer moments untouched on discarded windows.
    #[arg(long)]
    pub freeze_moments: bool,
}

impl EraseArgs {
    fn config(&self, root: u64) -> Result<EraseConfig, Failure> {
        let cfg = SweepAxis::LayerDepth.apply(&EraseConfig::default(), &self.layers)?;
        Ok(EraseConfig {
            eta: self.eta,
            mu: self.mu,
            window: self.window,
            layers: cfg.layers,
            projections: self.projections.clone(),
            steps: self.steps,
            lr: self.lr,
            ordering: match self.ordering {
                OrderingArg::Sequential => WindowOrdering::Sequential,
                OrderingArg::Random => WindowOrdering::Random,
            },
            policy: match self.policy {
                PolicyArg::PerWindow => UpdatePolicy::PerWindow,
                PolicyArg::AccumulateAll => UpdatePolicy::AccumulateAll,
            },
            freeze_moments: self.freeze_moments,
            seed: stage_seed(root, Stage::Erase),
        })
    }
}

/// A one-line diagnostic.
#[derive(Debug)]
pub struct Failure(pub String);

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure(e.to_string())
    }
}

fn at(path: &Path) -> impl FnOnce(crate::Error) -> Failure + '_ {
    move |e| match e {
        crate::Error::Io { .. } => Failure(e.to_string()),
        other => Failure(format!("{}: {other}", path.display())),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = e.0.replace('\n', " ");
            eprintln!("ear: error: {line}");
            1
        }
    }
}

struct Paths<'a> {
    dir: &'a Path,
}

impl Paths<'_> {
    fn or(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.dir.join(name))
    }
}

fn load_world(path: &Path) -> Result<SyntheticWorld, Failure> {
    SyntheticWorld::load(path).map_err(at(path))
}

fn load_model(path: &Path, world: &SyntheticWorld) -> Result<(ModelParams, CheckpointMeta), Failure> {
    let (params, meta) = checkpoint::load(path).map_err(at(path))?;
    if meta.world_hash != world.hash() {
        return Err(Failure(format!(
            "{}: trained on world {}, but the world file is {}",
            path.display(),
            meta.world_hash,
            world.hash()
        )));
    }
    Ok((params, meta))
}

fn load_pairs(path: &Path, world: &SyntheticWorld) -> Result<(Vec<PromptPair>, String), Failure> {
    let pairs = load_dataset(path).map_err(at(path))?;
    let concept = match pairs.first() {
        Some(p) => p.concept.clone(),
        None => return Err(Failure(format!("{}: dataset is empty", path.display()))),
    };
    if let Some(i) = pairs.iter().position(|p| p.concept != concept) {
        return Err(Failure(format!(
            "{}: record {i} targets `{}`, expected `{concept}`",
            path.display(),
            pairs[i].concept
        )));
    }
    world.concept(&concept).map_err(at(path))?;
    Ok((pairs, concept))
}

fn prepare_dir(dir: &Path, outputs: &[&Path]) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure(format!("{}: {e}", dir.display())))?;
    for out in outputs {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .map_err(|e| Failure(format!("{}: {e}", parent.display())))?;
        }
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure(e.to_string()))?;
    write_bytes(path, (text + "\n").as_bytes())
}

fn log(msg: impl Display) {
    let _ = writeln!(std::io::stderr(), "{msg}");
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let root = cli.seed;
    let paths = Paths { dir: &cli.out_dir };
    match &cli.command {
        Command::MakeWorld { out } => {
            let out = paths.or(out, "world.json");
            let world = pipeline::default_world(root);
            prepare_dir(paths.dir, &[&out])?;
            world.save(&out).map_err(at(&out))?;
            log(format_args!("world {} -> {}", world.hash(), out.display()));
        }
        Command::Pretrain { world, out, steps, lr, batch } => {
            let world_path = paths.or(world, "world.json");
            let out = paths.or(out, "model.ckpt");
            let world = load_world(&world_path)?;
            let cfg = PretrainConfig {
                steps: *steps,
                lr: *lr,
                batch: *batch,
                ..pipeline::pretrain_config(root)
            };
            let outcome = pipeline::pretrain_world(&world, root, &cfg)?;
            let meta = CheckpointMeta {
                seed: root,
                world_hash: world.hash(),
                model: outcome.params.config().clone(),
                config: json!({ "stage": "pretrain", "pretrain": cfg }),
            };
            let bytes = checkpoint::encode(&outcome.params, &meta)?;
            prepare_dir(paths.dir, &[&out])?;
            write_bytes(&out, &bytes)?;
            if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
                log(format_args!("pretrain loss {first:.4} -> {last:.4}"));
            }
            log(format_args!("model -> {}", out.display()));
        }
        Command::GenDataset { world, concept, surrogate, out } => {
            let world_path = paths.or(world, "world.json");
            let out = paths.or(out, "pairs.json");
            let world = load_world(&world_path)?;
            let pairs = pipeline::propose_pairs(&world, concept, surrogate, root)?;
            prepare_dir(paths.dir, &[&out])?;
            save_dataset(&pairs, &out).map_err(at(&out))?;
            log(format_args!("{} pairs -> {}", pairs.len(), out.display()));
        }
        Command::FilterDataset { world, model, pairs, out, report } => {
            let world = load_world(&paths.or(world, "world.json"))?;
            let (params, _) = load_model(&paths.or(model, "model.ckpt"), &world)?;
            let (pairs, concept) = load_pairs(&paths.or(pairs, "pairs.json"), &world)?;
            let out = paths.or(out, "filtered.json");
            let report_path = paths.or(report, "filter_report.json");
            let report = pipeline::filter_pairs(&world, &params, &pairs, &concept)?;
            prepare_dir(paths.dir, &[&out, &report_path])?;
            save_dataset(&report.kept, &out).map_err(at(&out))?;
            report.save(&report_path).map_err(at(&report_path))?;
            let c = &report.counts;
            log(format_args!(
                "kept {} of {} (false negative {}, false positive {}, errored {})",
                c.kept, c.input, c.false_negative, c.false_positive, c.errored
            ));
        }
        Command::Erase { world, model, pairs, out, report, erase } => {
            let world = load_world(&paths.or(world, "world.json"))?;
            let (params, _) = load_model(&paths.or(model, "model.ckpt"), &world)?;
            let (pairs, concept) = load_pairs(&paths.or(pairs, "filtered.json"), &world)?;
            let out = paths.or(out, "erased.ckpt");
            let report_path = paths.or(report, "erase_report.jsonl");
            let cfg = erase.config(root)?;
            cfg.validate(&params)?;
            let vocab = Vocab::from_world(&world);
            let (erased, report) = run_erasure(&params, &vocab, &pairs, &cfg)?;
            let meta = CheckpointMeta {
                seed: root,
                world_hash: world.hash(),
                model: erased.config().clone(),
                config: json!({ "stage": "erase", "concept": concept, "erase": cfg, "pairs": pairs.len() }),
            };
            let bytes = checkpoint::encode(&erased, &meta)?;
            prepare_dir(paths.dir, &[&out, &report_path])?;
            write_bytes(&out, &bytes)?;
            write_bytes(&report_path, report.to_jsonl().as_bytes())?;
            log(format_args!(
                "erased `{concept}` over {} steps, {} of {} windows discarded -> {}",
                cfg.steps,
                report.discarded(),
                report.windows.len(),
                out.display()
            ));
        }
        Command::Generate { world, model, prompt, temperature, out } => {
            let world = load_world(&paths.or(world, "world.json"))?;
            let (params, _) = load_model(&paths.or(model, "model.ckpt"), &world)?;
            let out = paths.or(out, "image.ppm");
            let vocab = Vocab::from_world(&world);
            let images = ModelImages {
                params: &params,
                vocab: &vocab,
                codebook: &world.codebook,
                sampling: match temperature {
                    Some(t) => FilterSampling::Temperature(*t),
                    None => FilterSampling::Greedy,
                },
            };
            let tokens = images.tokens(prompt, stage_seed(root, Stage::Sample))?;
            let image = decode_image(&tokens, &world.codebook)?;
            prepare_dir(paths.dir, &[&out])?;
            image.write_ppm(&out).map_err(at(&out))?;
            let ids: Vec<String> = tokens.iter().map(u32::to_string).collect();
            println!("{}", ids.join(" "));
        }
        Command::Eval { world, original, erased, concept, out } => {
            let world = load_world(&paths.or(world, "world.json"))?;
            let (reference, _) = load_model(&paths.or(original, "model.ckpt"), &world)?;
            let (candidate, _) = load_model(&paths.or(erased, "erased.ckpt"), &world)?;
            let out = paths.or(out, "metrics.json");
            let evaluator = Evaluator::new(&world, &reference, concept)?;
            let metrics = evaluator.report(&candidate)?;
            prepare_dir(paths.dir, &[&out])?;
            write_json(&out, &metrics)?;
            println!(
                "target {} accuracy {:.4} unrelated mean {:.4} min {:.4} fidelity {:.6} alignment {:.4}",
                metrics.target,
                metrics.erasure_accuracy,
                metrics.unrelated_mean,
                metrics.unrelated_min,
                metrics.fidelity_proxy,
                metrics.alignment
            );
        }
        Command::Ablate { world, model, pairs, axis, values, out, erase } => {
            let world = load_world(&paths.or(world, "world.json"))?;
            let (params, _) = load_model(&paths.or(model, "model.ckpt"), &world)?;
            let (pairs, concept) = load_pairs(&paths.or(pairs, "filtered.json"), &world)?;
            let out = paths.or(out, "sweep.csv");
            let base = erase.config(root)?;
            let axis = SweepAxis::from(*axis);
            for v in values {
                axis.apply(&base, v)?;
            }
            let evaluator = Evaluator::new(&world, &params, &concept)?;
            let rows = ablation_sweep(&evaluator, &params, &pairs, &base, axis, values)?;
            let text = sweep_csv(&rows)?;
            prepare_dir(paths.dir, &[&out])?;
            write_bytes(&out, text.as_bytes())?;
            log(format_args!("{} rows -> {}", rows.len(), out.display()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("ear").chain(args.iter().copied()))
    }

    #[test]
    fn erase_defaults() {
        let cli = parse(&["erase"]).unwrap();
        let Command::Erase { erase, .. } = cli.command else {
            panic!("wrong subcommand")
        };
        let cfg = erase.config(0).unwrap();
        let d = EraseConfig::default();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.eta, 1.0);
        assert_eq!(cfg.mu, 0.05);
        assert_eq!(cfg.layers, 0..5);
        assert_eq!(cfg.projections, ["q", "k", "v"]);
        assert_eq!(cfg.window, d.window);
        assert_eq!(cfg.seed, stage_seed(0, Stage::Erase));
    }

    #[test]
    fn erase_flags() {
        let cli = parse(&[
            "--seed", "7", "erase", "--mu", "inf", "--layers", "2..4", "--projections", "mlp,o",
            "--ordering", "random", "--policy", "accumulate-all", "--freeze-moments",
        ])
        .unwrap();
        assert_eq!(cli.seed, 7);
        let Command::Erase { erase, .. } = cli.command else {
            panic!("wrong subcommand")
        };
        let cfg = erase.config(7).unwrap();
        assert!(cfg.mu.is_infinite());
        assert_eq!(cfg.layers, 2..4);
        assert_eq!(cfg.projections, ["mlp", "o"]);
        assert_eq!(cfg.ordering, WindowOrdering::Random);
        assert_eq!(cfg.policy, UpdatePolicy::AccumulateAll);
        assert!(cfg.freeze_moments);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["ear", "frobnicate"]), 2);
        assert_eq!(run(["ear", "erase", "--no-such-flag"]), 2);
        assert_eq!(run(["ear", "ablate"]), 2);
    }

    #[test]
    fn missing_inputs_exit_one_and_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested");
        let code = run([
            "ear".as_ref(),
            "--out-dir".as_ref(),
            out.as_os_str(),
            "pretrain".as_ref(),
        ]);
        assert_eq!(code, 1);
        assert!(!out.exists());
    }

    #[test]
    fn bad_layer_range_is_rejected() {
        let cli = parse(&["erase", "--layers", "x"]).unwrap();
        let Command::Erase { erase, .. } = cli.command else {
            panic!("wrong subcommand")
        };
        assert!(erase.config(0).is_err());
    }
}
