use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gpanet::ablation::ablate;
use gpanet::checkpoint::{load_checkpoint, save_checkpoint};
use gpanet::config::{comment_block, RunConfig};
use gpanet::datasets::{make_repetitions, parse_manifest, read_protocols, synth_dataset, write_protocols, EvalProtocol, ImageLibrary, ManifestRecord};
use gpanet::diagnostics::{gradcheck_suite, render_table};
use gpanet::io::write_atomic;
use gpanet::retrieval::{evaluate, read_descriptors, score, write_descriptors, DescriptorCache, EvalReport};
use gpanet::training::{log_to_csv, train};

/// Global and part-aware identity retrieval: data, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "gpanet", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Run configuration file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set optim.epochs=30`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker thread cap.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic identity-image dataset and its manifest.
    Synth {
        #[arg(long, default_value_t = 16)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        per_id: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the repeated train/validation/gallery/query protocols.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a protocol's training split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Which repetition's training split to use.
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training log path (delimited text).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write eval-mode descriptors for a set of images.
    Extract {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which images: every manifest record, or one repetition's gallery or queries.
        #[arg(long, value_enum, default_value_t = Subset::All)]
        subset: Subset,
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint over all protocols, or a query descriptor file against a gallery file.
    Eval {
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        protocols: Option<PathBuf>,
        #[arg(long, requires = "query", conflicts_with = "checkpoint")]
        gallery: Option<PathBuf>,
        #[arg(long, requires = "gallery")]
        query: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
        /// Two-column CMC curve path.
        #[arg(long)]
        cmc: Option<PathBuf>,
    },
    /// Partition-grid and component ablation tables.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Rendered table path.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON copy of the results.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest; image paths resolve relative to its directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Protocol file from `split`; built from the manifest when omitted.
    #[arg(long)]
    protocols: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Subset {
    All,
    Gallery,
    Query,
}

enum Failure {
    Usage(String),
    Lib(gpanet::Error),
}

impl From<gpanet::Error> for Failure {
    fn from(e: gpanet::Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_protocols(data: &DataArgs, config: &RunConfig) -> gpanet::Result<Vec<EvalProtocol>> {
    match &data.protocols {
        Some(p) => read_protocols(p),
        None => {
            let records = parse_manifest(&data.manifest)?;
            make_repetitions(&records, &config.protocol.protocol_config(), config.protocol.repetitions, config.seed)
        }
    }
}

fn pick(protocols: &[EvalProtocol], repetition: usize) -> Result<&EvalProtocol, Failure> {
    protocols
        .iter()
        .find(|p| p.repetition == repetition)
        .ok_or_else(|| Failure::Usage(format!("no repetition {repetition} among {} protocols", protocols.len())))
}

fn write_text(path: &Path, text: &str) -> gpanet::Result<()> {
    write_atomic(path, text.as_bytes())
}

fn run(cli: Cli) -> CmdResult {
    if cli.global.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    let config = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    let header = config.to_text();
    match cli.command {
        Command::Synth { ids, per_id, size, seed, out } => {
            if ids < 2 || per_id < 2 || size == 0 {
                return Err(Failure::Usage("synth needs --ids >= 2, --per-id >= 2 and a positive --size".into()));
            }
            let manifest = synth_dataset(ids, per_id, size, seed, &out)?;
            println!("wrote {} images and {}", ids * per_id, manifest.display());
        }
        Command::Split { manifest, out } => {
            let data = DataArgs { manifest, protocols: None };
            let protocols = load_protocols(&data, &config)?;
            write_protocols(&out, &protocols, Some(&header))?;
            let p = &protocols[0];
            println!(
                "{} repetitions: {} train, {} validation, {} gallery, {} query images",
                protocols.len(),
                p.train.len(),
                p.validation.len(),
                p.gallery.len(),
                p.query.len()
            );
        }
        Command::Train { data, repetition, out, log } => {
            let protocols = load_protocols(&data, &config)?;
            let protocol = pick(&protocols, repetition)?;
            let mut images = ImageLibrary::new(base_dir(&data.manifest), config.backbone.input_size);
            let outcome = train(protocol, &mut images, &config.train_config(), |e| {
                let val = e.val_rank1.map_or("n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
                eprintln!("epoch {:>3}  loss {:.4}  val rank-1 {val}", e.epoch, e.mean_total_loss);
            })?;
            save_checkpoint(&out, &outcome.model)?;
            if let Some(path) = log {
                write_text(&path, &log_to_csv(&outcome.log, Some(&header)))?;
            }
            println!("wrote {}", out.display());
        }
        Command::Extract { data, checkpoint, subset, repetition, out } => {
            let mut model = load_checkpoint(&checkpoint)?;
            let records: Vec<ManifestRecord> = match subset {
                Subset::All => parse_manifest(&data.manifest)?,
                Subset::Gallery | Subset::Query => {
                    let protocols = load_protocols(&data, &config)?;
                    let p = pick(&protocols, repetition)?;
                    if subset == Subset::Gallery { p.gallery.clone() } else { p.query.clone() }
                }
            };
            if records.is_empty() {
                return Err(Failure::Lib(gpanet::Error::Data("no images selected".into())));
            }
            let mut images = ImageLibrary::new(base_dir(&data.manifest), model.backbone_config.input_size);
            let matrix = DescriptorCache::new(&mut model).matrix(&records, &mut images)?;
            write_descriptors(&out, &matrix)?;
            println!("wrote {} descriptors of dimension {} to {}", matrix.len(), matrix.dim(), out.display());
        }
        Command::Eval { checkpoint, manifest, protocols, gallery, query, out, cmc } => {
            let mut report = match (checkpoint, gallery, query) {
                (Some(ckpt), None, None) => {
                    let manifest = manifest.expect("required by clap");
                    let data = DataArgs { manifest, protocols };
                    let protocols = load_protocols(&data, &config)?;
                    let mut model = load_checkpoint(&ckpt)?;
                    let mut images = ImageLibrary::new(base_dir(&data.manifest), model.backbone_config.input_size);
                    evaluate(&mut model, &protocols, &mut images)?
                }
                (None, Some(g), Some(q)) => {
                    let (g, q) = (read_descriptors(&g)?, read_descriptors(&q)?);
                    EvalReport::from_scores(&[(0, score(&g, &q)?)])?
                }
                _ => return Err(Failure::Usage("eval needs --checkpoint with --manifest, or --gallery with --query".into())),
            };
            report.config = Some(header.clone());
            write_text(&out, &report.to_json()?)?;
            if let Some(path) = cmc {
                let text = comment_block(&header) + &report.cmc_text();
                write_text(&path, &text)?;
            }
            print!("{}", report.summary());
        }
        Command::Ablate { data, out, json } => {
            let protocols = load_protocols(&data, &config)?;
            let mut images = ImageLibrary::new(base_dir(&data.manifest), config.backbone.input_size);
            let mut report = ablate(&protocols, &mut images, &config.train_config(), |label, _| eprintln!("finished {label}"))?;
            report.config = Some(header.clone());
            let text = report.render();
            write_text(&out, &text)?;
            if let Some(path) = json {
                write_text(&path, &report.to_json()?)?;
            }
            print!("{text}");
        }
        Command::Gradcheck { seed } => {
            let rows = gradcheck_suite(seed)?;
            print!("{}", render_table(&rows));
            if let Some(bad) = rows.iter().find(|r| !r.passed()) {
                return Err(Failure::Lib(gpanet::Error::Numeric(format!(
                    "gradient check failed for {} w.r.t. {}: {:.3e}",
                    bad.op, bad.wrt, bad.max_rel_error
                ))));
            }
        }
        Command::ShowConfig => print!("{header}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            match e {
                gpanet::Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
