//! Command-line front end: `phantom-gen`, `train-detector`, `detect`,
//! `train-fpr`, `reduce`, `froc`, `report`, and `pipeline`.
//!
//! Every run resolves its configuration (preset defaults, then the
//! `--config` file, then `--set key=value` overrides, then explicit flags),
//! writes the resolved document as `run-config.txt` next to its outputs,
//! and streams progress to stderr. Results go to files only; identical
//! argv, config, and seed produce byte-identical outputs.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_detector, load_fpr, save_detector, save_fpr};
use crate::config::{
    apply_detector, apply_fpr, apply_phantom, emit_detector, emit_fpr, emit_phantom, KvDoc,
};
use crate::ct::{
    generate_phantom, load_annotations, load_candidates, save_annotations, save_candidates,
    save_volume, Annotation, Candidate, ElementType, PhantomParams,
};
use crate::detector::{train_detector, DetectorConfig};
use crate::fpr::{build_fpr, rescore_candidates, train_fpr, Fpr3dConfig};
use crate::froc::{average_froc_score, froc_curve, emit_report, FrocSystem};
use crate::pipeline::{build_fpr_training_set, detect_all, load_dataset};
use crate::util::fmt_float;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nodule-cad",
    version,
    about = "Two-stage pulmonary nodule detection on CT volumes",
    disable_help_subcommand = true
)]
struct Cli {
    /// Worker threads for intra-stage parallelism (0 = automatic). Falls
    /// back to the NODULE_PIPELINE_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Configuration preset.
    #[arg(long, global = true, value_parser = ["desk", "full"], default_value = "desk")]
    preset: String,

    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Inline override, repeatable: --set detector.lr=0.001
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Random seed; echoed into the resolved configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom scans plus their annotations CSV.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
        /// Number of scans to generate.
        #[arg(long)]
        scans: usize,
    },
    /// Train the stage-1 candidate detector on a phantom directory.
    TrainDetector {
        /// Directory with .mhd volumes and annotations.csv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run stage-1 detection, writing a candidates CSV.
    Detect {
        /// Detector checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop candidates below this confidence.
        #[arg(long)]
        score_floor: Option<f64>,
    },
    /// Train the 3D false-positive reducer on stage-1 candidates.
    TrainFpr {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 candidates over the same scans.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rescore candidates with a trained reducer.
    Reduce {
        /// Reducer checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a candidates CSV against annotations.
    Froc {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scan directory fixing the evaluation scan set; defaults to the
        /// scans referenced by the two CSVs.
        #[arg(long)]
        data: Option<PathBuf>,
        /// System name in the report.
        #[arg(long, default_value = "candidates")]
        system: String,
    },
    /// Compare several candidate CSVs in one report.
    Report {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Repeatable NAME=CSV pair.
        #[arg(long = "system", value_name = "NAME=CSV", required = true)]
        systems: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Chain detect, reduce, and froc over one dataset.
    Pipeline {
        #[arg(long)]
        data: PathBuf,
        /// Detector checkpoint.
        #[arg(long)]
        detector: PathBuf,
        /// Reducer checkpoint.
        #[arg(long)]
        fpr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        score_floor: Option<f64>,
    },
}

/// Run the CLI on an argv tail (without the program name); returns the
/// process exit code: 0 success, 1 validation error, 2 runtime failure.
pub fn dispatch<I>(args: I) -> u8
where
    I: IntoIterator<Item = String>,
{
    let argv = std::iter::once("nodule-cad".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own help/usage text; help requests exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads.or_else(|| {
        std::env::var("NODULE_PIPELINE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    let run = || match run_command(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    match threads {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build();
            match pool {
                Ok(pool) => pool.install(run),
                Err(e) => {
                    eprintln!("error: cannot build thread pool: {e}");
                    2
                }
            }
        }
        _ => run(),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape(_)
        | Error::InvalidArgument(_)
        | Error::Parse(_)
        | Error::Csv { .. }
        | Error::InfeasiblePacking(_) => 1,
        Error::Io { .. } | Error::NonFiniteLoss { .. } => 2,
    }
}

/// Preset defaults overlaid with the config file and inline overrides.
fn resolve_doc(cli: &Cli) -> Result<KvDoc> {
    let mut doc = KvDoc::new();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        doc.merge(&KvDoc::parse(&text)?);
    }
    for pair in &cli.overrides {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::InvalidArgument(format!(
                "--set expects KEY=VALUE, got {pair:?}"
            )));
        };
        doc.set(k.trim(), v.trim());
    }
    Ok(doc)
}

fn detector_config(cli: &Cli, doc: &KvDoc) -> Result<DetectorConfig> {
    let mut cfg = match cli.preset.as_str() {
        "full" => DetectorConfig::full(),
        _ => DetectorConfig::desk(),
    };
    apply_detector(&mut cfg, doc)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn fpr_config(cli: &Cli, doc: &KvDoc) -> Result<Fpr3dConfig> {
    let mut cfg = match cli.preset.as_str() {
        "full" => Fpr3dConfig::full(),
        _ => Fpr3dConfig::desk(),
    };
    apply_fpr(&mut cfg, doc)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn phantom_params(doc: &KvDoc) -> Result<PhantomParams> {
    let mut params = PhantomParams::default();
    apply_phantom(&mut params, doc)?;
    Ok(params)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write the fully resolved configuration next to the outputs.
fn write_run_config(dir: &Path, cli: &Cli, command: &str, mut doc: KvDoc, seed: u64) -> Result<()> {
    doc.set("run.command", command);
    doc.set("run.preset", &cli.preset);
    doc.set("run.seed", seed);
    doc.set(
        "run.threads",
        cli.threads.map(|t| t.to_string()).unwrap_or_else(|| "auto".into()),
    );
    let path = dir.join("run-config.txt");
    std::fs::write(&path, doc.to_text()).map_err(|e| Error::io(&path, e))
}

fn scan_universe(
    data: &Option<PathBuf>,
    candidates: &[Candidate],
    annotations: &[Annotation],
) -> Result<Vec<String>> {
    let mut scans: Vec<String> = match data {
        Some(dir) => load_dataset(dir)?
            .into_iter()
            .map(|(v, _)| v.series_uid().to_string())
            .collect(),
        None => {
            let mut s: Vec<String> = candidates
                .iter()
                .map(|c| c.series_uid.clone())
                .chain(annotations.iter().map(|a| a.series_uid.clone()))
                .collect();
            s.sort();
            s.dedup();
            s
        }
    };
    scans.sort();
    Ok(scans)
}

fn run_command(cli: &Cli) -> Result<()> {
    let doc = resolve_doc(cli)?;
    match &cli.command {
        Command::PhantomGen { out, scans } => {
            let params = phantom_params(&doc)?;
            let seed = cli.seed.unwrap_or(0);
            ensure_dir(out)?;
            let mut annotations = Vec::new();
            for i in 0..*scans {
                let uid = format!("phantom-{seed}-{i:03}");
                let (vol, annos) = generate_phantom(&uid, seed.wrapping_add(i as u64), &params)?;
                save_volume(&vol, &out.join(format!("{uid}.mhd")), ElementType::Float)?;
                annotations.extend(annos);
                eprintln!("wrote {uid} ({} nodules)", annotations.len());
            }
            save_annotations(&out.join("annotations.csv"), &annotations)?;
            let mut resolved = KvDoc::new();
            emit_phantom(&params, &mut resolved);
            resolved.set("run.scans", scans);
            write_run_config(out, cli, "phantom-gen", resolved, seed)?;
            Ok(())
        }
        Command::TrainDetector { data, out } => {
            let cfg = detector_config(cli, &doc)?;
            let dataset = load_dataset(data)?;
            ensure_dir(out)?;
            let mut log_rows = String::from("step,loss\n");
            let (model, _) = train_detector(&dataset, &cfg, |step, loss| {
                log_rows.push_str(&format!("{step},{}\n", fmt_float(loss)));
                if step % 25 == 0 {
                    eprintln!("step {step}: loss {loss:.4}");
                }
            })?;
            save_detector(&out.join("detector.ckpt"), &model)?;
            let log_path = out.join("train_log.csv");
            std::fs::write(&log_path, log_rows).map_err(|e| Error::io(&log_path, e))?;
            let mut resolved = KvDoc::new();
            emit_detector(&cfg, &mut resolved);
            resolved.set("run.data", data.display());
            write_run_config(out, cli, "train-detector", resolved, cfg.seed)?;
            Ok(())
        }
        Command::Detect {
            model,
            data,
            out,
            score_floor,
        } => {
            let mut detector = load_detector(model)?;
            apply_detector(&mut detector.config, &doc)?;
            let floor = score_floor.unwrap_or(detector.config.score_floor);
            let dataset = load_dataset(data)?;
            ensure_dir(out)?;
            let volumes: Vec<_> = dataset.into_iter().map(|(v, _)| v).collect();
            let mut candidates = Vec::new();
            for vol in &volumes {
                let found = crate::detector::detect_candidates(&detector, vol, floor)?;
                eprintln!("{}: {} candidates", vol.series_uid(), found.len());
                candidates.extend(found);
            }
            save_candidates(&out.join("candidates.csv"), &candidates)?;
            let mut resolved = KvDoc::new();
            emit_detector(&detector.config, &mut resolved);
            resolved.set("run.data", data.display());
            resolved.set("run.model", model.display());
            resolved.set("run.score_floor", fmt_float(floor));
            write_run_config(out, cli, "detect", resolved, detector.config.seed)?;
            Ok(())
        }
        Command::TrainFpr {
            data,
            candidates,
            out,
        } => {
            let cfg = fpr_config(cli, &doc)?;
            let dataset = load_dataset(data)?;
            let cands = load_candidates(candidates)?;
            ensure_dir(out)?;
            let patches = build_fpr_training_set(&dataset, &cands, &cfg)?;
            let positives = patches
                .iter()
                .filter(|p| p.label == Some(true))
                .count();
            eprintln!(
                "training on {} patches ({positives} positive after duplication)",
                patches.len()
            );
            let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed);
            let model = build_fpr(&cfg, &mut rng)?;
            let mut log_rows = String::from("epoch,mean_loss,val_accuracy\n");
            let (model, _) = train_fpr(model, &patches, |s| {
                log_rows.push_str(&format!(
                    "{},{},{}\n",
                    s.epoch,
                    fmt_float(s.mean_loss),
                    fmt_float(s.val_accuracy)
                ));
                eprintln!(
                    "epoch {}: loss {:.4}, val accuracy {:.3}",
                    s.epoch, s.mean_loss, s.val_accuracy
                );
            })?;
            save_fpr(&out.join("fpr.ckpt"), &model)?;
            let log_path = out.join("train_log.csv");
            std::fs::write(&log_path, log_rows).map_err(|e| Error::io(&log_path, e))?;
            let mut resolved = KvDoc::new();
            emit_fpr(&cfg, &mut resolved);
            resolved.set("run.data", data.display());
            resolved.set("run.candidates", candidates.display());
            write_run_config(out, cli, "train-fpr", resolved, cfg.seed)?;
            Ok(())
        }
        Command::Reduce {
            model,
            data,
            candidates,
            out,
        } => {
            let fpr = load_fpr(model)?;
            let dataset = load_dataset(data)?;
            let cands = load_candidates(candidates)?;
            ensure_dir(out)?;
            let volumes: Vec<_> = dataset.into_iter().map(|(v, _)| v).collect();
            let rescored = rescore_candidates(&fpr, &volumes, &cands)?;
            save_candidates(&out.join("candidates.csv"), &rescored)?;
            eprintln!("rescored {} candidates", rescored.len());
            let mut resolved = KvDoc::new();
            emit_fpr(&fpr.config, &mut resolved);
            resolved.set("run.data", data.display());
            resolved.set("run.model", model.display());
            resolved.set("run.candidates", candidates.display());
            write_run_config(out, cli, "reduce", resolved, fpr.config.seed)?;
            Ok(())
        }
        Command::Froc {
            candidates,
            annotations,
            out,
            data,
            system,
        } => {
            let cands = load_candidates(candidates)?;
            let annos = load_annotations(annotations)?;
            let scans = scan_universe(data, &cands, &annos)?;
            ensure_dir(out)?;
            let curve = froc_curve(&scans, &cands, &annos)?;
            eprintln!(
                "{} scans, {} candidates, average FROC score {:.4}",
                scans.len(),
                cands.len(),
                average_froc_score(&curve)
            );
            emit_report(
                &[FrocSystem {
                    name: system.clone(),
                    curve,
                }],
                out,
            )?;
            let mut resolved = KvDoc::new();
            resolved.set("run.candidates", candidates.display());
            resolved.set("run.annotations", annotations.display());
            write_run_config(out, cli, "froc", resolved, cli.seed.unwrap_or(0))?;
            Ok(())
        }
        Command::Report {
            annotations,
            out,
            systems,
            data,
        } => {
            let annos = load_annotations(annotations)?;
            ensure_dir(out)?;
            let mut parsed = Vec::new();
            for pair in systems {
                let Some((name, path)) = pair.split_once('=') else {
                    return Err(Error::InvalidArgument(format!(
                        "--system expects NAME=CSV, got {pair:?}"
                    )));
                };
                parsed.push((name.to_string(), load_candidates(Path::new(path))?));
            }
            let all_cands: Vec<Candidate> =
                parsed.iter().flat_map(|(_, c)| c.iter().cloned()).collect();
            let scans = scan_universe(data, &all_cands, &annos)?;
            let mut report = Vec::new();
            for (name, cands) in &parsed {
                report.push(FrocSystem {
                    name: name.clone(),
                    curve: froc_curve(&scans, cands, &annos)?,
                });
            }
            emit_report(&report, out)?;
            for s in &report {
                eprintln!(
                    "{}: average FROC score {:.4}",
                    s.name,
                    average_froc_score(&s.curve)
                );
            }
            let mut resolved = KvDoc::new();
            resolved.set("run.annotations", annotations.display());
            resolved.set("run.systems", systems.join(";"));
            write_run_config(out, cli, "report", resolved, cli.seed.unwrap_or(0))?;
            Ok(())
        }
        Command::Pipeline {
            data,
            detector,
            fpr,
            out,
            score_floor,
        } => {
            let det = load_detector(detector)?;
            let red = load_fpr(fpr)?;
            let dataset = load_dataset(data)?;
            ensure_dir(out)?;
            let floor = score_floor.unwrap_or(det.config.score_floor);
            let volumes: Vec<_> = dataset.iter().map(|(v, _)| v.clone()).collect();
            let annotations: Vec<Annotation> =
                dataset.iter().flat_map(|(_, a)| a.iter().cloned()).collect();
            eprintln!("stage 1: detecting over {} scans", volumes.len());
            let stage1 = detect_all(&det, &volumes, floor)?;
            save_candidates(&out.join("stage1_candidates.csv"), &stage1)?;
            eprintln!("stage 2: rescoring {} candidates", stage1.len());
            let stage2 = rescore_candidates(&red, &volumes, &stage1)?;
            save_candidates(&out.join("stage2_candidates.csv"), &stage2)?;
            let scans: Vec<String> = volumes
                .iter()
                .map(|v| v.series_uid().to_string())
                .collect();
            let report = vec![
                FrocSystem {
                    name: "stage1".into(),
                    curve: froc_curve(&scans, &stage1, &annotations)?,
                },
                FrocSystem {
                    name: "stage2".into(),
                    curve: froc_curve(&scans, &stage2, &annotations)?,
                },
            ];
            emit_report(&report, out)?;
            for s in &report {
                eprintln!(
                    "{}: average FROC score {:.4} over {{1/8,1/4,1/2,1,2,4,8}} FPs/scan",
                    s.name,
                    average_froc_score(&s.curve)
                );
            }
            let mut resolved = KvDoc::new();
            emit_detector(&det.config, &mut resolved);
            emit_fpr(&red.config, &mut resolved);
            resolved.set("run.data", data.display());
            resolved.set("run.detector", detector.display());
            resolved.set("run.fpr", fpr.display());
            resolved.set("run.score_floor", fmt_float(floor));
            write_run_config(out, cli, "pipeline", resolved, det.config.seed)?;
            Ok(())
        }
    }
}
