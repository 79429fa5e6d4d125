use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use stmn::harness::{
    ablate, bench, default_variants, evaluate, infer_one, kernel_variants, load_model, make_dataset,
    run_gradcheck, train, Dataset, RunConfig, Split, TrainOptions, Variant,
};
use stmn::language::ExpressionRecord;
use stmn::model::{PreparedExpression, PreparedScene, Vocabularies};
use stmn::scene::build_superpoints;
use stmn::scene::io::{load_scene, load_superpoints, read_json, write_json};
use stmn::{Error, Result};

#[derive(Parser)]
#[command(name = "stmn", version, about = "Superpoint-text matching for 3D referring segmentation")]
struct Cli {
    /// Run configuration (JSON); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for run artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation threads.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Dataset root; falls back to `data.root` in the config, then `data`.
    #[arg(long, global = true, env = "STMN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// DDI structures, the no-DDI baseline and edge directions.
    Default,
    /// Kernel strategies and sampling counts.
    Kernel,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, superpoints and expressions into the dataset root.
    MakeDataset,
    /// Train on the dataset; writes checkpoint.bin and JSON-lines logs.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Evaluate on the validation split after every epoch.
        #[arg(long)]
        eval_each_epoch: bool,
    },
    /// Evaluate a checkpoint; writes metrics.json and records.jsonl.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Segment one expression in one scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Superpoint cache; computed from the scene when omitted.
        #[arg(long)]
        superpoints: Option<PathBuf>,
        /// Expression record (JSON).
        #[arg(long)]
        expression: PathBuf,
    },
    /// Train and evaluate named configuration variants.
    Ablate {
        #[arg(long, value_enum, default_value = "default")]
        grid: Grid,
        /// JSON list of `{name, overrides}` replacing the built-in grid.
        #[arg(long)]
        variants: Option<PathBuf>,
    },
    /// Time superpoint-level against point-level matching.
    Bench {
        /// Weights to time; a fresh model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        inferences: usize,
    },
    /// Finite-difference check of every op and of the full loss.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn data_root(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.data_dir.clone().or_else(|| cfg.data.root.clone()).unwrap_or_else(|| PathBuf::from("data"))
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn emit<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::MakeDataset => {
            let root = cli.out.clone().unwrap_or_else(|| data_root(cli, &cfg));
            let manifest = make_dataset(&cfg.data, cfg.seed, &root)?;
            eprintln!("wrote {} train / {} val expressions to {}", manifest.n_train, manifest.n_val, root.display());
            emit(&manifest);
        }
        Command::Train { resume, eval_each_epoch } => {
            let data = Dataset::load(&data_root(cli, &cfg), cfg.model.encoder_knn)?;
            let vocab = Vocabularies::from_records(&data.train)?;
            let tr = data.samples(Split::Train, &vocab.relations, cfg.model.pe_dim)?;
            let va = data.samples(Split::Val, &vocab.relations, cfg.model.pe_dim)?;
            let opts = TrainOptions {
                out: out_dir(cli),
                resume: *resume,
                eval_each_epoch: *eval_each_epoch,
                workers: cli.workers,
            };
            let run = train(&cfg, vocab, &data.scenes, &tr, &va, &opts)?;
            for e in &run.epochs {
                eprintln!("epoch {} loss {:.6} lr {}", e.epoch, e.mean_loss, e.lr);
            }
            emit(&run.epochs);
        }
        Command::Eval { checkpoint, split } => {
            let out = out_dir(cli);
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.bin"));
            let model = load_model(&ckpt)?;
            let data = Dataset::load(&data_root(cli, &cfg), model.config.encoder_knn)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let samples = data.samples(split, &model.vocab.relations, model.config.pe_dim)?;
            let (metrics, records) = evaluate(&model, &data.scenes, &samples, cli.workers)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join("metrics.json"), &metrics)?;
            stmn::harness::dataset::write_jsonl(&out.join("records.jsonl"), &records)?;
            emit(&metrics);
        }
        Command::Infer { checkpoint, scene, superpoints, expression } => {
            let model = load_model(checkpoint)?;
            let (sc, objects) = load_scene(scene)?;
            let partition = match superpoints {
                Some(p) => {
                    let (id, part) = load_superpoints(p)?;
                    if id != sc.scene_id {
                        return Err(Error::Invalid(format!(
                            "{}: superpoints belong to `{id}`, scene is `{}`",
                            p.display(),
                            sc.scene_id
                        )));
                    }
                    part
                }
                None => build_superpoints(&sc, &cfg.data.superpoints),
            };
            let prepared = PreparedScene::new(sc, objects, partition, model.config.encoder_knn)?;
            let record: ExpressionRecord = read_record(expression)?;
            let with_gt = record.target_instance < prepared.scene.n_instances();
            let expr = PreparedExpression::new(
                ExpressionRecord { target_instance: if with_gt { record.target_instance } else { 0 }, ..record },
                &prepared,
                &model.vocab.relations,
                model.config.pe_dim,
            )?;
            let out = infer_one(&model, &prepared, &expr, with_gt)?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join(format!("{}.json", out.expr_id)), &out)?;
            }
            emit(&out);
        }
        Command::Ablate { grid, variants } => {
            let data = Dataset::load(&data_root(cli, &cfg), cfg.model.encoder_knn)?;
            let list: Vec<Variant> = match variants {
                Some(p) => read_json(p)?,
                None => match grid {
                    Grid::Default => default_variants(),
                    Grid::Kernel => kernel_variants(),
                    Grid::All => default_variants().into_iter().chain(kernel_variants()).collect(),
                },
            };
            let rows = ablate(&cfg, &data, &list, &out_dir(cli), cli.workers)?;
            emit(&rows);
        }
        Command::Bench { checkpoint, inferences } => {
            let model = match checkpoint {
                Some(p) => load_model(p)?,
                None => {
                    let data = Dataset::load(&data_root(cli, &cfg), cfg.model.encoder_knn)?;
                    stmn::model::Model::new(cfg.model.clone(), Vocabularies::from_records(&data.train)?, cfg.seed)?
                }
            };
            let data = Dataset::load(&data_root(cli, &cfg), model.config.encoder_knn)?;
            let samples = data.samples(Split::Val, &model.vocab.relations, model.config.pe_dim)?;
            let report = bench(&model, &data.scenes, &samples, *inferences)?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join("bench.json"), &report)?;
            }
            emit(&report);
        }
        Command::Gradcheck => {
            let summary = run_gradcheck(cfg.seed)?;
            for l in &summary.lines {
                eprintln!(
                    "{} {:<28} max_rel_error {:.3e} ({} entries)",
                    if l.passed { "ok  " } else { "FAIL" },
                    l.name,
                    l.max_rel_error,
                    l.entries
                );
            }
            emit(&summary);
            if !summary.passed {
                return Err(Error::Contract("gradient check exceeded tolerance".into()));
            }
        }
    }
    Ok(())
}

/// Accepts a JSON object or the first line of a JSON-lines file.
fn read_record(path: &Path) -> Result<ExpressionRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    serde_json::from_str(&text)
        .or_else(|_| serde_json::from_str(first))
        .map_err(|e| Error::json(path, e))
}
