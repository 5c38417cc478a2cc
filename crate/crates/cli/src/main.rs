//! `vsemb`: synthesize data, build a visual oracle, train, evaluate.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 training
//! failure, 4 codebook coverage failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vsemb::datamodel::{
    class_partition_counts, generate_synthetic, load_dataset, save_dataset, write_tensor_file,
    Codebook, Dataset, SplitSpec,
};
use vsemb::evaluator::{self, EvalReport, Setting};
use vsemb::oracle::{self, OracleKind, VisualOracle};
use vsemb::par::{self, ExecMode};
use vsemb::trainer::{self, Mode, Supervision};
use vsemb::{Error, Result};

use config::RunConfig;

fn defaults_help() -> String {
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).expect("serializable");
    format!(
        "Every configuration field can be set in a JSON file (--config) or with \
         --set section.key=value. Precedence: command-line flags, then --set, \
         then the file, then these defaults:\n\n{defaults}"
    )
}

#[derive(Parser, Debug)]
#[command(
    name = "vsemb",
    version,
    about = "Part-type embeddings for generalized zero-shot recognition"
)]
#[command(after_long_help = defaults_help())]
struct Cli {
    /// Worker threads; results are identical for any value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; the generator, oracle and trainer seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration field, e.g. `--set train.eta=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and save a visual oracle.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Oracle file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// structured | flat
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        parts: Option<usize>,
        #[arg(long)]
        types: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write the class-averaged visual codebook (VSEF, rows by class id).
        #[arg(long)]
        emit_codebook: Option<PathBuf>,
        /// Also write every instance's embedding (VSEF, rows by instance id).
        #[arg(long)]
        emit_pi: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// semantic | visual | visual-flat | baseline
        #[arg(long)]
        mode: Option<String>,
        /// Visual oracle (required by the visual modes).
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training log CSV [default: checkpoint path with `.log.csv`].
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        parts: Option<usize>,
        #[arg(long)]
        types: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        lr_step1: Option<f64>,
        #[arg(long)]
        lr_step2: Option<f64>,
        /// Use the literal margin on the correct class (constant offset).
        #[arg(long)]
        margin_on_correct: bool,
        /// Let the visual potential move the prototypes.
        #[arg(long)]
        theta_grad: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: Option<PathBuf>,
        /// zsl | gzsl
        #[arg(long)]
        setting: Option<String>,
        /// Codebook (`.csv` semantic, otherwise VSEF visual with rows for
        /// classes 0..n) [default: the dataset's codebook].
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Alternative split file; its stem names the split in the report.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Report CSV [default: checkpoint path with `.<setting>.csv`].
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Merge report CSVs into one comparison CSV.
    Compare {
        /// `NAME=REPORT.csv`, one per variant.
        #[arg(required = true, value_name = "NAME=REPORT")]
        reports: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration as JSON.
    Defaults,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match with_threads(cli.threads, move || run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::TrainingAborted { .. } | Error::NonFinite(_) => 3,
        Error::Coverage { .. } => 4,
        _ => 2,
    }
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    match threads {
        0 => Err(Error::Config("--threads must be at least 1".into())),
        1 => par::with_mode(ExecMode::Sequential, f),
        n => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(f),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.sets)?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    cfg.distribute_seed();
    Ok(cfg)
}

fn required(cli: Option<PathBuf>, file: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    cli.or_else(|| file.clone())
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let out = required(out, &cfg.paths.out, "out")?;
            cmd_synth(&cfg, &out)
        }
        Command::Oracle {
            common,
            data,
            out,
            kind,
            parts,
            types,
            epochs,
            emit_codebook,
            emit_pi,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = kind {
                cfg.oracle.kind = match k.as_str() {
                    "structured" => OracleKind::Structured,
                    "flat" => OracleKind::Flat,
                    _ => return Err(Error::Config(format!("unknown oracle kind {k:?}"))),
                };
            }
            if let Some(v) = parts {
                cfg.oracle.parts = v;
            }
            if let Some(v) = types {
                cfg.oracle.types = v;
            }
            if let Some(v) = epochs {
                cfg.oracle.epochs = v;
            }
            let data = required(data, &cfg.paths.data, "data")?;
            let out = required(out, &cfg.paths.oracle, "out")?;
            cmd_oracle(
                &cfg,
                &data,
                &out,
                emit_codebook.as_deref(),
                emit_pi.as_deref(),
            )
        }
        Command::Train {
            common,
            data,
            mode,
            oracle,
            out,
            log,
            epochs,
            parts,
            types,
            eta,
            lr_step1,
            lr_step2,
            margin_on_correct,
            theta_grad,
        } => {
            let mut cfg = load_config(&common)?;
            let t = &mut cfg.train;
            if let Some(m) = mode {
                t.mode = m.parse()?;
            }
            if let Some(v) = epochs {
                t.epochs = v;
            }
            if let Some(v) = parts {
                t.parts = v;
            }
            if let Some(v) = types {
                t.types = v;
            }
            if let Some(v) = eta {
                t.eta = v;
            }
            if let Some(v) = lr_step1 {
                t.lr_step1 = v;
            }
            if let Some(v) = lr_step2 {
                t.lr_step2 = v;
            }
            t.margin_on_correct |= margin_on_correct;
            t.theta_grad |= theta_grad;
            let data = required(data, &cfg.paths.data, "data")?;
            let out = required(out, &cfg.paths.checkpoint, "out")?;
            let oracle = oracle.or_else(|| cfg.paths.oracle.clone());
            let log = log
                .or_else(|| cfg.paths.log.clone())
                .unwrap_or_else(|| with_suffix(&out, ".log.csv"));
            cmd_train(&cfg, &data, oracle.as_deref(), &out, &log)
        }
        Command::Eval {
            common,
            data,
            model,
            setting,
            codebook,
            split,
            report,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = setting {
                cfg.eval.setting = s.parse()?;
            }
            let data = required(data, &cfg.paths.data, "data")?;
            let model = required(model, &cfg.paths.checkpoint, "model")?;
            let codebook = codebook.or_else(|| cfg.paths.codebook.clone());
            let split = split.or_else(|| cfg.paths.split.clone());
            let report = report
                .or_else(|| cfg.paths.report.clone())
                .unwrap_or_else(|| {
                    with_suffix(&model, &format!(".{}.csv", cfg.eval.setting.as_str()))
                });
            cmd_eval(
                &cfg,
                &data,
                &model,
                codebook.as_deref(),
                split.as_deref(),
                &report,
            )
        }
        Command::Compare { reports, out } => cmd_compare(&reports, &out),
        Command::Defaults => {
            println!(
                "{}",
                serde_json::to_string_pretty(&RunConfig::default()).expect("serializable")
            );
            Ok(())
        }
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = generate_synthetic(&cfg.synth)?;
    save_dataset(&s.dataset, out)?;
    write_tensor_file(&s.planted.prototype_tensor()?, out.join("planted.vsef"))?;
    write_tensor_file(
        &s.planted.visual_codebook()?.to_tensor()?,
        out.join("planted_q.vsef"),
    )?;
    let counts = class_partition_counts(&s.dataset);
    let manifest = json!({
        "generator": cfg.synth,
        "separation": s.planted.separation,
        "noise": s.planted.noise,
        "min_separation": s.planted.min_separation,
        "classes": counts.classes,
        "seen": counts.seen,
        "unseen": counts.unseen,
        "instances": counts.images,
        "planted": "planted.vsef (parts x types x channels)",
        "planted_q": "planted_q.vsef (classes x parts x types)",
    });
    write_text(
        &out.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("serializable") + "\n"),
    )?;
    println!(
        "wrote {} instances ({} classes, {} seen) to {}",
        counts.images,
        counts.classes,
        counts.seen,
        out.display()
    );
    Ok(())
}

fn source_id(data: &Path) -> String {
    data.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn cmd_oracle(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    emit_codebook: Option<&Path>,
    emit_pi: Option<&Path>,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let oracle = oracle::build_oracle(&dataset, &cfg.oracle, &source_id(data))?;
    oracle.save(out)?;
    for (epoch, (l_prt, phi_xy)) in oracle.training.iter().enumerate() {
        println!("epoch {epoch}: L_prt {l_prt:.6} phi_XY {phi_xy:.6}");
    }
    for (m, f) in oracle.fit.iter().enumerate() {
        println!(
            "part {m}: nll {:.6} -> {:.6} in {} steps (converged {}, max increase {:.3e}, reseeded {})",
            f.initial_nll, f.final_nll, f.steps, f.converged, f.max_increase, f.reseeded
        );
    }
    if let Some(path) = emit_codebook {
        let book = oracle::oracle_codebook(&oracle, &dataset, dataset.classes())?;
        write_tensor_file(&book.to_tensor()?, path)?;
    }
    if let Some(path) = emit_pi {
        let all: Vec<_> = dataset.instances().iter().collect();
        write_tensor_file(&oracle::export_pi(&oracle, &all)?, path)?;
    }
    println!("wrote oracle to {}", out.display());
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    oracle: Option<&Path>,
    out: &Path,
    log: &Path,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let oracle: Option<VisualOracle> = oracle.map(VisualOracle::load).transpose()?;
    let supervision = match (cfg.train.mode, &oracle) {
        (Mode::Visual | Mode::VisualFlat, None) => {
            return Err(Error::Config(format!(
                "mode {:?} requires --oracle",
                cfg.train.mode
            )))
        }
        (Mode::Semantic, _) => Supervision::Codebook(dataset.codebook()),
        (_, Some(o)) => Supervision::Oracle(o),
        (Mode::Baseline, None) => Supervision::Codebook(dataset.codebook()),
    };
    let ckpt = trainer::train(&dataset, &cfg.train, supervision)?;
    trainer::save_checkpoint(&ckpt, out)?;
    let mut csv = String::from("epoch,l_prt,em_nll,em_steps,phi_xy,phi_sx\n");
    for e in &ckpt.log {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.l_prt, e.em_nll, e.em_steps, e.phi_xy, e.phi_sx
        ));
        println!(
            "epoch {}: L_prt {:.6} em_nll {:.6} ({} steps) phi_XY {:.6} phi_SX {:.6}",
            e.epoch, e.l_prt, e.em_nll, e.em_steps, e.phi_xy, e.phi_sx
        );
    }
    write_text(log, &csv)?;
    println!("wrote checkpoint to {}", out.display());
    Ok(())
}

/// Reads a codebook; a VSEF file with `n` rows covers classes `0..n`.
fn read_codebook(path: &Path) -> Result<Codebook> {
    if path.extension().is_some_and(|e| e == "csv") {
        return Codebook::read_semantic_csv(path);
    }
    let t = vsemb::datamodel::read_tensor_file(path)?;
    let classes: Vec<usize> = (0..t.dims().first().copied().unwrap_or(0)).collect();
    Codebook::from_visual_tensor(&t, &classes)
}

fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    model: &Path,
    codebook: Option<&Path>,
    split: Option<&Path>,
    report: &Path,
) -> Result<()> {
    let mut dataset: Dataset = load_dataset(data)?;
    let mut split_id = "split".to_string();
    if let Some(path) = split {
        dataset = dataset.with_split(SplitSpec::read(path)?)?;
        split_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(split_id);
    }
    let ckpt = trainer::load_checkpoint(model)?;
    let book = match codebook {
        Some(p) => read_codebook(p)?,
        None => dataset.codebook().clone(),
    };
    let r = evaluator::evaluate(&ckpt, &dataset, &book, cfg.eval.setting, &split_id)?;
    print!("{}", r.to_table());
    write_text(report, &r.to_csv())?;
    Ok(())
}

fn parse_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = || Error::Format(format!("{}: not a report CSV", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(evaluator::CSV_HEADER) {
        return Err(bad());
    }
    let row: Vec<&str> = lines.next().ok_or_else(bad)?.split(',').collect();
    if row.len() != 6 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let opt = |s: &str| {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    Ok(EvalReport {
        setting: row[0].parse::<Setting>()?,
        split: row[1].to_string(),
        per_class: Default::default(),
        ts: num(row[2])?,
        tr: opt(row[3])?,
        h: opt(row[4])?,
        n: row[5].parse().map_err(|_| bad())?,
    })
}

fn cmd_compare(reports: &[String], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for item in reports {
        let (name, path) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected NAME=REPORT, got {item:?}")))?;
        rows.push((name.to_string(), parse_report(Path::new(path))?));
    }
    let refs: Vec<(&str, &EvalReport)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let csv = evaluator::comparison_csv(&refs);
    print!("{csv}");
    write_text(out, &csv)
}
