use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qbit_core::arch::NetworkDef;
use qbit_core::data::{detect, load_cifar10, load_mnist, resolve_root, Dataset, DatasetKind, Split};
use qbit_core::error::QbitError;
use qbit_core::experiment::Experiment;
use qbit_core::model_file::{self, SavedModel};
use qbit_core::net::{deploy, evaluate, PackedModel, METRICS_HEADER};
use qbit_core::schedule::{layer_param_counts, size_report, validate_schedule, BitwidthSchedule, Notation};

const EXIT_OTHER: u8 = 1;
const EXIT_DATASET: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_MODEL: u8 = 4;

#[derive(Parser)]
#[command(name = "qbit", version, about = "Train, pack and inspect mixed-precision quantized networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a config file and write the metrics log and model files.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Top-1 accuracy of a model on the test split of a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to $QBIT_DATA_DIR.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-layer parameter counts, bits and average bitwidth for a schedule.
    SizeReport {
        #[arg(long)]
        arch: PathBuf,
        /// Weight bitwidths, e.g. `8-4-2-1-1-1/1`.
        #[arg(long)]
        schedule: String,
        #[arg(long, default_value_t = 2)]
        baseline: u8,
        /// Activation bitwidth.
        #[arg(long, default_value_t = 2)]
        ka: u8,
    },
    /// Convert a training checkpoint into a packed model.
    Pack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

/// Exit code for an error raised while handling `input`.
fn classify(e: QbitError, input: &Path, default: u8) -> Failure {
    let code = match &e {
        QbitError::Config { .. } => EXIT_CONFIG,
        QbitError::Dataset { .. } => EXIT_DATASET,
        QbitError::Format(_) => EXIT_MODEL,
        _ => default,
    };
    fail(code, format!("{}: {e}", input.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Eval { model, data } => cmd_eval(&model, data.as_deref()),
        Command::SizeReport {
            arch,
            schedule,
            baseline,
            ka,
        } => cmd_size_report(&arch, &schedule, baseline, ka),
        Command::Pack { model, out } => cmd_pack(&model, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut exp = Experiment::load(config).map_err(|e| classify(e, config, EXIT_CONFIG))?;
    if let Some(s) = seed {
        exp.train.seed = s;
    }
    let data_root = exp.data.resolve_root().map_err(|e| classify(e, config, EXIT_DATASET))?;
    let (train_set, val_set, test_set) = exp.datasets().map_err(|e| classify(e, &data_root, EXIT_DATASET))?;
    if train_set.shape() != exp.def.input || train_set.classes() != exp.def.classes {
        return Err(fail(
            EXIT_DATASET,
            format!(
                "{}: images {:?} with {} classes do not fit network input {:?} with {} classes",
                data_root.display(),
                train_set.shape(),
                train_set.classes(),
                exp.def.input,
                exp.def.classes
            ),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", out.display())))?;
    let log_path = out.join("metrics.tsv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", log_path.display())))?);
    let mut net = exp.build().map_err(|e| classify(e, config, EXIT_CONFIG))?;
    let norm = exp.data.normalization.clone();
    println!(
        "training {} on {} samples ({} validation), {} epochs",
        exp.def.name,
        train_set.len(),
        val_set.len(),
        exp.train.epochs
    );
    println!("{METRICS_HEADER}");
    let mut io_err = None;
    let report = qbit_core::net::train(&mut net, &exp.train, &train_set, &val_set, &norm, |m| {
        println!("{}", m.tsv_line());
        if let Err(e) = writeln!(log, "{}", m.tsv_line()).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    })
    .map_err(|e| classify(e, config, EXIT_OTHER))?;
    if let Some(e) = io_err {
        return Err(fail(EXIT_OTHER, format!("{}: {e}", log_path.display())));
    }
    let packed = deploy(&net).map_err(|e| classify(e, config, EXIT_OTHER))?;
    let ckpt = out.join("checkpoint.qbc");
    let model = out.join("model.qbm");
    model_file::save_checkpoint(&ckpt, &net, &norm).map_err(|e| classify(e, &ckpt, EXIT_OTHER))?;
    model_file::save_packed(&model, &packed, &norm).map_err(|e| classify(e, &model, EXIT_OTHER))?;
    let acc = evaluate(&packed, &test_set, &norm, 256).map_err(|e| classify(e, &data_root, EXIT_DATASET))?;
    println!("best validation epoch {} ({:.4})", report.best_epoch, report.best_val_acc);
    println!("test accuracy {acc:.6}");
    println!("wrote {} and {}", model.display(), ckpt.display());
    Ok(())
}

fn load_test_split(dir: &Path) -> Result<Dataset, Failure> {
    let kind = detect(dir).ok_or_else(|| {
        fail(
            EXIT_DATASET,
            format!("{}: no MNIST (t10k-*-ubyte) or CIFAR-10 (test_batch.bin) files found", dir.display()),
        )
    })?;
    let ds = match kind {
        DatasetKind::Mnist => load_mnist(dir, Split::Test),
        DatasetKind::Cifar10 => load_cifar10(dir, Split::Test),
    };
    ds.map_err(|e| classify(e, dir, EXIT_DATASET))
}

fn load_packed(path: &Path) -> Result<(PackedModel, qbit_core::data::Normalization), Failure> {
    let (saved, norm) = model_file::load(path).map_err(|e| classify(e, path, EXIT_MODEL))?;
    let packed = match saved {
        SavedModel::Packed(m) => m,
        SavedModel::Checkpoint(net) => deploy(&net).map_err(|e| classify(e, path, EXIT_MODEL))?,
    };
    Ok((packed, norm))
}

fn cmd_eval(model: &Path, data: Option<&Path>) -> Result<(), Failure> {
    let (packed, norm) = load_packed(model)?;
    let dir = resolve_root(data).map_err(|e| classify(e, Path::new("--data"), EXIT_DATASET))?;
    let test = load_test_split(&dir)?;
    if test.shape() != packed.def.input || test.classes() != packed.def.classes {
        return Err(fail(
            EXIT_MODEL,
            format!(
                "{}: model expects {:?} inputs with {} classes but {} holds {:?} with {} classes",
                model.display(),
                packed.def.input,
                packed.def.classes,
                dir.display(),
                test.shape(),
                test.classes()
            ),
        ));
    }
    if test.is_empty() {
        return Err(fail(EXIT_DATASET, format!("{}: test split is empty", dir.display())));
    }
    let acc = evaluate(&packed, &test, &norm, 256).map_err(|e| classify(e, &dir, EXIT_OTHER))?;
    println!("test accuracy {acc:.6}");
    Ok(())
}

fn cmd_size_report(arch: &Path, schedule: &str, baseline: u8, ka: u8) -> Result<(), Failure> {
    let text = std::fs::read_to_string(arch).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", arch.display())))?;
    let def = NetworkDef::from_text(&text).map_err(|e| classify(e, arch, EXIT_CONFIG))?;
    let notation = Notation::parse(schedule).map_err(|e| fail(EXIT_CONFIG, format!("--schedule `{schedule}`: {e}")))?;
    let s = BitwidthSchedule::from_notation(&def, &notation, ka)
        .map_err(|e| fail(EXIT_CONFIG, format!("--schedule `{schedule}`: {e}")))?;
    for v in validate_schedule(&s) {
        eprintln!("warning: {v}");
    }
    let report = size_report(&s, &layer_param_counts(&def), baseline)
        .map_err(|e| fail(EXIT_CONFIG, format!("--baseline {baseline}: {e}")))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} {}", def.name, s.notation());
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_pack(model: &Path, out: &Path) -> Result<(), Failure> {
    let (packed, norm) = load_packed(model)?;
    model_file::save_packed(out, &packed, &norm).map_err(|e| classify(e, out, EXIT_OTHER))?;
    println!(
        "wrote {} ({} bytes of packed weights)",
        out.display(),
        packed.packed_weight_bytes()
    );
    Ok(())
}
