use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use motility3d::data::fixture::{write_fixture, FixtureSpec};
use motility3d::data::{load_clip, read_manifest, sample_refs, split_dataset, Part};
use motility3d::models::{shape_trace, ArchId, ArchSpec, Prediction};
use motility3d::train::trainer::{evaluate, tabular_rows, train_on, Control};
use motility3d::train::{gradcheck_suite, load_checkpoint, prepare_data, TrainConfig};
use motility3d::{exec, Error, ErrorKind, Result, Tensor};

#[derive(Parser)]
#[command(name = "motility3d", version, about = "3D ResNet sperm-motility classifier")]
struct Cli {
    /// Worker threads for convolution and frame decoding (1 = deterministic serial mode).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Delimiter of the tabular CSV file.
    #[arg(long, global = true)]
    tabular_delimiter: Option<char>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Accuracy and confusion matrix of a checkpoint on one split part.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        part: Part,
        #[arg(long)]
        tabular: Option<PathBuf>,
        #[arg(long, default_value_t = ',')]
        manifest_delimiter: char,
    },
    /// Classify one frame directory.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, requires = "id")]
        tabular: Option<PathBuf>,
        #[arg(long, requires = "tabular")]
        id: Option<String>,
    },
    /// Finite-difference check of every operation and a small network.
    Gradcheck {
        #[arg(long)]
        arch: ArchId,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Activation shapes for an input size, without running the network.
    Shapes {
        #[arg(long)]
        arch: ArchId,
        /// Frames, height, width.
        #[arg(long, num_args = 3, default_values_t = [50, 480, 640])]
        input: Vec<usize>,
    },
    /// Write a synthetic dataset.
    Fixture {
        #[arg(long, value_enum, default_value_t = FixtureKind::Overfit)]
        kind: FixtureKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    /// Eight 16x64x80 clips with class-distinct motion.
    Overfit,
    /// 85-row manifest with 52/9/24 labels and a tabular file.
    Cohort,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    exec::set_threads(cli.threads);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

fn ascii(c: char, flag: &str) -> Result<u8> {
    if c.is_ascii() {
        Ok(c as u8)
    } else {
        Err(Error::InvalidArgument(format!("{flag} must be an ASCII character")))
    }
}

fn write_report(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(name);
        fs::write(&path, format!("{text}\n")).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Train { config } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(d) = cli.tabular_delimiter {
                cfg.tabular_delimiter = d;
            }
            if let Some(o) = out {
                cfg.out_dir = o.to_path_buf();
            }
            cfg.validate()?;
            let data = prepare_data(&cfg)?;
            println!(
                "{}: {} train / {} val / {} test samples, {} excluded",
                cfg.arch,
                data.train.len(),
                data.val.len(),
                data.test.len(),
                data.split.excluded.len()
            );
            let outcome = train_on(&cfg, &data, Some(&cfg.out_dir), |m| {
                println!(
                    "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}  lr {:.3e}  ({:.1}s)",
                    m.epoch, m.train_loss, m.val_loss, m.val_acc, m.lr, m.seconds
                );
                Control::Continue
            })?;
            if outcome.stopped_early {
                println!("early stop after epoch {}", outcome.metrics.len());
            }
            println!(
                "best epoch {}  val_loss {:.6}  val_acc {:.4}  -> {}",
                outcome.info.epoch,
                outcome.info.best_val_loss,
                outcome.info.best_val_acc,
                outcome.checkpoint.as_deref().unwrap_or(Path::new("-")).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            ckpt,
            manifest,
            part,
            tabular,
            manifest_delimiter,
        } => {
            let (model, info) = load_checkpoint(&ckpt)?;
            let spec = ArchSpec::new(info.arch);
            let rows = read_manifest(&manifest, ascii(manifest_delimiter, "--manifest-delimiter")?)?;
            let ids: Vec<String> = rows.iter().map(|r| r.participant_id.clone()).collect();
            let split = split_dataset(&ids, info.seeds.split, info.split_sizes)?;
            let table = match (spec.uses_tabular, tabular, &info.tabular_stats) {
                (true, Some(path), Some(stats)) => {
                    let delim = ascii(cli.tabular_delimiter.unwrap_or(';'), "--tabular-delimiter")?;
                    Some(tabular_rows(&path, delim, stats)?)
                }
                (true, None, _) => {
                    return Err(Error::InvalidArgument(format!(
                        "{} needs --tabular",
                        info.arch
                    )))
                }
                (true, Some(_), None) => {
                    return Err(Error::CheckpointIntegrity(
                        "tabular model without stored standardization".into(),
                    ))
                }
                (false, Some(_), _) => {
                    return Err(Error::InvalidArgument(format!(
                        "{} takes no tabular input",
                        info.arch
                    )))
                }
                (false, None, _) => None,
            };
            let refs = sample_refs(&rows, split.part(part), table.as_ref())?;
            let eval = evaluate(&model, &refs, &info.frames, &info.class_weights)?;
            let text = serde_json::json!({
                "part": part.as_str(),
                "total": eval.total,
                "correct": eval.correct,
                "accuracy": eval.accuracy,
                "loss": eval.loss,
                "confusion": eval.confusion,
            })
            .to_string();
            println!("{text}");
            write_report(out, &format!("eval_{part}.json"), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict {
            ckpt,
            frames,
            tabular,
            id,
        } => {
            let (model, info) = load_checkpoint(&ckpt)?;
            let spec = ArchSpec::new(info.arch);
            let tab = match (spec.uses_tabular, tabular, id) {
                (true, Some(path), Some(id)) => {
                    let stats = info.tabular_stats.as_ref().ok_or_else(|| {
                        Error::CheckpointIntegrity("tabular model without stored standardization".into())
                    })?;
                    let delim = ascii(cli.tabular_delimiter.unwrap_or(';'), "--tabular-delimiter")?;
                    let rows = tabular_rows(&path, delim, stats)?;
                    let row = rows.get(&id).ok_or_else(|| {
                        Error::InvalidArgument(format!("no row for '{id}' in {}", path.display()))
                    })?;
                    Some(Tensor::new(vec![1, row.len()], row.clone())?)
                }
                (true, _, _) => {
                    return Err(Error::InvalidArgument(format!(
                        "{} needs --tabular and --id",
                        info.arch
                    )))
                }
                (false, Some(_), _) => {
                    return Err(Error::InvalidArgument(format!(
                        "{} takes no tabular input",
                        info.arch
                    )))
                }
                (false, None, _) => None,
            };
            let clip = load_clip(&frames, &info.frames)?;
            let [_, t, h, w] = <[usize; 4]>::try_from(clip.shape()).expect("4-d clip");
            let clip = clip.reshape(vec![1, 1, t, h, w])?;
            let p = model
                .predict(&clip, tab.as_ref())?
                .pop()
                .expect("one prediction");
            let text = prediction_line(&p);
            println!("{text}");
            write_report(out, "prediction.json", &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { arch, seed } => {
            let lines = gradcheck_suite(arch, seed)?;
            let mut failed = 0;
            for l in &lines {
                let verdict = if l.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{:<52} max_rel_err {:.3e}  threshold {:.0e}  checked {:>4}  excluded {:>3}  {verdict}",
                    l.name, l.max_rel_error, l.threshold, l.checked, l.excluded
                );
                failed += usize::from(!l.passed());
            }
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", lines.len());
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Shapes { arch, input } => {
            let trace = shape_trace(&ArchSpec::new(arch), [1, input[0], input[1], input[2]])?;
            println!("stem      {:?}", trace.stem);
            println!("prep      {:?}", trace.prep);
            for (i, s) in trace.stages.iter().enumerate() {
                println!("layer{}    {:?}", i + 1, s);
            }
            println!("avgpool   kernel {:?} -> {}", trace.pool_kernel(), trace.pooled);
            if let (Some(f), Some(h)) = (trace.fused, trace.hidden) {
                println!("fusion    {f} -> {h}");
            }
            println!("logits    {}", trace.logits);
            Ok(ExitCode::SUCCESS)
        }
        Command::Fixture { kind } => {
            let dir = out.ok_or_else(|| Error::InvalidArgument("fixture needs --out".into()))?;
            let spec = match kind {
                FixtureKind::Overfit => FixtureSpec::overfit(),
                FixtureKind::Cohort => FixtureSpec::cohort(),
            };
            let fx = write_fixture(dir, &spec)?;
            println!("{} samples -> {}", fx.ids.len(), fx.manifest.display());
            if let Some(t) = fx.tabular {
                println!("tabular -> {}", t.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn prediction_line(p: &Prediction) -> String {
    format!(
        "{{\"class\": \"{}\", \"index\": {}, \"probabilities\": [{:.6}, {:.6}, {:.6}]}}",
        p.class_name(),
        p.class,
        p.probabilities[0],
        p.probabilities[1],
        p.probabilities[2]
    )
}
