use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use quantdistill::config::{parse_bits, ExperimentConfig};
use quantdistill::distill::loss_csv;
use quantdistill::eval::{self, RangeCorrelationReport, TarAtFar};
use quantdistill::pipeline::{self, StudentSummary};
use quantdistill::store::{self, StorageMode};
use quantdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "quantdistill", version, about = "Quantize embedding networks and recover them by data-free distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision teacher on labeled synthetic identities.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Calibrate, quantize and distill one student per bit-width.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Comma-separated bit-widths, overriding the config.
        #[arg(long)]
        bits: Option<String>,
    },
    /// Evaluate model files and write a consolidated report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(required = true)]
        models: Vec<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    write(path, s)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn pretrain(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    ensure_dir(&cfg.output_dir)?;
    let out = pipeline::pretrain_teacher(&cfg)?;
    let model = cfg.output_dir.join("teacher.qfmd");
    store::save_model(&out.net, &model, StorageMode::Fp32)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write(&cfg.output_dir.join("teacher_loss.csv"), csv)?;
    write_json(&cfg.output_dir.join("teacher_report.json"), &out.report)?;
    println!(
        "teacher: accuracy {:.4}, model {}",
        out.report.accuracy,
        model.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DistillSummary {
    teacher: String,
    students: Vec<StudentSummary>,
}

fn distill(config: &Path, teacher_path: &Path, bits: Option<&str>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(b) = bits {
        cfg.bits = parse_bits("bits", b)?;
    }
    let (teacher, _) = store::load_model(teacher_path)?;
    if teacher.input_dim() != cfg.input_dim {
        return Err(Error::Dimension(format!(
            "teacher input dim {} but config input_dim {}",
            teacher.input_dim(),
            cfg.input_dim
        )));
    }
    ensure_dir(&cfg.output_dir)?;
    let mut summaries = Vec::new();
    for &b in &cfg.bits {
        let out = pipeline::distill_student(&cfg, &teacher, b)?;
        let tag = format!("w{b}a{b}");
        store::save_model(
            &out.student,
            &cfg.output_dir.join(format!("student_{tag}.qfmd")),
            StorageMode::Quantized,
        )?;
        write(&cfg.output_dir.join(format!("loss_{tag}.csv")), loss_csv(&out.curve))?;
        write_json(&cfg.output_dir.join(format!("size_{tag}.json")), &out.summary.size)?;
        summaries.push(out.summary);
    }
    pipeline::flag_convergence(&mut summaries);
    for s in &summaries {
        let status = match s.converged {
            Some(true) => "converged",
            Some(false) => "NOT converged",
            None => "convergence unknown",
        };
        println!(
            "w{0}a{0}: final smoothed KD loss {1:.6} ({status})",
            s.bit_width, s.final_smoothed_loss
        );
        if s.converged == Some(false) && s.bit_width < 6 {
            eprintln!("warning: {}-bit student did not converge", s.bit_width);
        }
    }
    write_json(
        &cfg.output_dir.join("distill_summary.json"),
        &DistillSummary {
            teacher: teacher_path.display().to_string(),
            students: summaries,
        },
    )
}

#[derive(Serialize)]
struct EvalRow {
    model: String,
    mode: StorageMode,
    bit_width: u8,
    param_count: usize,
    file_bytes: u64,
    fp32_bytes: u64,
    quantized_bytes: Option<u64>,
    ratio: Option<f64>,
    accuracy: f64,
    threshold: f64,
    tar_at_far: Vec<TarAtFar>,
}

#[derive(Serialize)]
struct EvalReport {
    rows: Vec<EvalRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    range_correlation: Vec<RangeCorrelationReport>,
}

fn evaluate(config: &Path, models: &[PathBuf]) -> Result<()> {
    let cfg = load_config(config)?;
    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    for m in models {
        let key = fs::canonicalize(m).unwrap_or_else(|_| m.clone());
        if seen.insert(key) {
            unique.push(m.clone());
        } else {
            eprintln!("warning: duplicate model path {} ignored", m.display());
        }
    }
    let mut nets = Vec::new();
    for path in &unique {
        let (net, mode) = store::load_model(path)?;
        if let Some((first, _, _)) = nets.first() {
            let first: &quantdistill::EmbeddingNet = first;
            if !first.same_architecture(&net) {
                return Err(Error::Dimension(format!(
                    "{} does not match the architecture of {}",
                    path.display(),
                    unique[0].display()
                )));
            }
        }
        nets.push((net, mode, path.clone()));
    }
    let space = pipeline::identity_space(&cfg)?;
    let pairs = pipeline::eval_pairs(&cfg, &space)?;
    let mut rows = Vec::new();
    for (net, mode, path) in &nets {
        let report = eval::verify(net, &pairs, &cfg.far_targets)?;
        let file_bytes = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        let bits = net.quant_state().map(|q| q.bit_width);
        let size = store::net_size_report(net, &bits.into_iter().collect::<Vec<_>>())?;
        let q = size.quantized.first();
        rows.push(EvalRow {
            model: path.display().to_string(),
            mode: *mode,
            bit_width: bits.map(|b| b.bits()).unwrap_or(32),
            param_count: net.param_count(),
            file_bytes,
            fp32_bytes: size.fp32_bytes,
            quantized_bytes: q.map(|q| q.total_bytes),
            ratio: q.map(|q| q.ratio),
            accuracy: report.accuracy,
            threshold: report.threshold,
            tar_at_far: report.tar_at_far,
        });
    }
    let calibrated: Vec<_> = nets.iter().filter(|(n, _, _)| n.is_calibrated()).collect();
    let mut correlations = Vec::new();
    for i in 0..calibrated.len() {
        for j in i + 1..calibrated.len() {
            let (a, _, pa) = calibrated[i];
            let (b, _, pb) = calibrated[j];
            correlations.push(eval::range_correlation(
                a,
                b,
                &pa.display().to_string(),
                &pb.display().to_string(),
            )?);
        }
    }
    ensure_dir(&cfg.output_dir)?;
    if !correlations.is_empty() {
        let mut csv = String::from("depth,lo,hi,source\n");
        let mut written = BTreeSet::new();
        for c in &correlations {
            for (label, iv) in [(&c.source_a, &c.intervals_a), (&c.source_b, &c.intervals_b)] {
                if written.insert(label.clone()) {
                    for (d, (lo, hi)) in iv.iter().enumerate() {
                        csv.push_str(&format!("{d},{lo},{hi},{label}\n"));
                    }
                }
            }
        }
        write(&cfg.output_dir.join("ranges.csv"), csv)?;
    }
    for r in &rows {
        println!("{}: w{}  accuracy {:.4}", r.model, r.bit_width, r.accuracy);
    }
    write_json(
        &cfg.output_dir.join("eval_report.json"),
        &EvalReport {
            rows,
            range_correlation: correlations,
        },
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain { config } => pretrain(config),
        Command::Distill { config, teacher, bits } => distill(config, teacher, bits.as_deref()),
        Command::Eval { config, models } => evaluate(config, models),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
