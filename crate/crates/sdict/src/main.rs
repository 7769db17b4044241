//! Command-line driver for the spectral-dictionary toolkit.
//!
//! Exit codes are a stable contract: 0 success, 1 config or IO error,
//! 2 numerical abort (non-finite values), 3 check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdict::autograd::{fd_check, Tape};
use sdict::bench::{self, ALL_OPERATORS};
use sdict::checkpoint;
use sdict::config::{self, BenchConfig, TrainConfig};
use sdict::dataset;
use sdict::dictionary::atom_spectrum;
use sdict::error::{Result, SdictError};
use sdict::linalg::DEFAULT_RIDGE;
use sdict::matrix::RMatrix;
use sdict::mixer::{self, MixerPath};
use sdict::model::{store_block_mixer, store_block_prefixes, Model};
use sdict::trainer;

#[derive(Parser)]
#[command(name = "sdict", version, about = "Spectral-dictionary token mixer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy vision-language model and write checkpoints + metrics.
    Train {
        /// Training config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints, metrics.jsonl, summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's model seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out split of the synthetic set.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// SDV1 checkpoint produced by train.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time mixer and attention forwards over a length grid; write CSV + slope summary.
    Bench {
        /// Bench config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV output path; the slope summary lands next to it with a .json extension.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's input seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for the timed operators (recorded in the CSV header).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Dump per-atom magnitude spectra of one layer's dictionary (CSV + PGM mosaic).
    Atoms {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block prefix (e.g. vis0, fus1) or its index in declaration order.
        #[arg(long)]
        layer: String,
        /// Output path prefix: writes <out>_atom<k>.csv and <out>_mosaic.pgm.
        #[arg(long)]
        out: PathBuf,
        /// Spectrum length (power of two).
        #[arg(long, default_value_t = 64)]
        length: usize,
    },
    /// Run one layer's mixer on a CSV matrix and write the reconstruction.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block prefix; defaults to the first block in the checkpoint.
        #[arg(long)]
        layer: Option<String>,
        /// Input L x d CSV (no header).
        #[arg(long)]
        input: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum relative error accepted.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 2)]
        per_tensor: usize,
        /// Deliberately skew one gradient; the check must then fail (self-test).
        #[arg(long)]
        corrupt: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SDICT_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version are successes; everything else is a usage
            // error, reported under the config/IO exit code.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &SdictError) -> u8 {
    match e {
        SdictError::NonFinite(_) | SdictError::Singular { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Train { config, out, seed } => cmd_train(config.as_deref(), &out, seed),
        Cmd::Eval { config, checkpoint, seed } => cmd_eval(config.as_deref(), &checkpoint, seed),
        Cmd::Bench { config, out, seed, threads } => {
            cmd_bench(config.as_deref(), &out, seed, threads)
        }
        Cmd::Atoms { checkpoint, layer, out, length } => {
            cmd_atoms(&checkpoint, &layer, &out, length)
        }
        Cmd::Reconstruct { checkpoint, layer, input, out } => {
            cmd_reconstruct(&checkpoint, layer.as_deref(), &input, &out)
        }
        Cmd::Gradcheck { config, tolerance, per_tensor, corrupt, seed } => {
            cmd_gradcheck(config.as_deref(), tolerance, per_tensor, corrupt, seed)
        }
    }
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => config::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<u8> {
    let cfg = load_train_config(config, seed)?;
    let outcome = trainer::train(&cfg, out)?;
    println!(
        "trained {} steps (early_stop={}) caption_acc={:.4} vqa_acc={:.4}",
        outcome.steps_run,
        outcome.early_stopped,
        outcome.final_eval.caption_acc,
        outcome.final_eval.vqa_acc
    );
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(0)
}

fn cmd_eval(config: Option<&Path>, ckpt: &Path, seed: Option<u64>) -> Result<u8> {
    let cfg = load_train_config(config, seed)?;
    let mut model = Model::new(&cfg.model)?;
    checkpoint::load_into(ckpt, &mut model.store)?;
    let all = dataset::gen_dataset(
        cfg.data_seed,
        cfg.train_examples + cfg.eval_examples,
        cfg.model.image_side,
    );
    let eval = &all[cfg.train_examples..];
    let report = trainer::evaluate(&model, eval)?;
    println!(
        "{}",
        serde_json::json!({
            "caption_acc": report.caption_acc,
            "vqa_acc": report.vqa_acc,
            "caption_tokens": report.caption_tokens,
            "samples": report.samples,
        })
    );
    Ok(0)
}

fn cmd_bench(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<u8> {
    let mut cfg: BenchConfig = match config {
        Some(p) => config::load(p)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    if cfg.threads != 1 {
        // The timed operators are single-threaded; pretending otherwise would
        // record exponents confounded by parallel speedup.
        return Err(SdictError::Config(format!(
            "this build times single-threaded operators; threads must be 1, got {}",
            cfg.threads
        )));
    }
    let records = bench::run_grid(&cfg, &ALL_OPERATORS)?;
    bench::write_csv(out, &records, cfg.threads)?;
    let summary = out.with_extension("json");
    bench::write_summary(&summary, &records, cfg.threads)?;
    for op in ALL_OPERATORS {
        match bench::slope_for(&records, op) {
            Ok(s) => println!("{op}: wall-time slope {s:.3}"),
            Err(_) => println!("{op}: too few timed points for a slope"),
        }
    }
    println!("csv: {}", out.display());
    println!("summary: {}", summary.display());
    Ok(0)
}

fn cmd_atoms(ckpt: &Path, layer: &str, out: &Path, length: usize) -> Result<u8> {
    let store = checkpoint::load(ckpt)?;
    let prefixes = store_block_prefixes(&store);
    if prefixes.is_empty() {
        return Err(SdictError::Config("checkpoint holds no mixer blocks".into()));
    }
    let prefix = match layer.parse::<usize>() {
        Ok(i) => prefixes
            .get(i)
            .ok_or_else(|| {
                SdictError::Config(format!(
                    "layer index {i} out of range; checkpoint has {} blocks",
                    prefixes.len()
                ))
            })?
            .clone(),
        Err(_) => {
            if !prefixes.iter().any(|p| p == layer) {
                return Err(SdictError::Config(format!(
                    "no block named {layer}; available: {}",
                    prefixes.join(", ")
                )));
            }
            layer.to_string()
        }
    };
    let dict = sdict::model::store_block_dictionary(&store, &prefix)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let k = dict.k();
    let mut rows = Vec::with_capacity(k);
    let stem = out.display();
    for a in 0..k {
        let spec = atom_spectrum(&dict, a, length)?;
        let mut text = String::new();
        for v in &spec {
            text.push_str(&format!("{v}\n"));
        }
        std::fs::write(format!("{stem}_atom{a}.csv"), text)?;
        rows.push(spec);
    }
    let pgm_path = format!("{stem}_mosaic.pgm");
    write_pgm(Path::new(&pgm_path), &rows)?;
    println!("wrote {k} atom spectra and {pgm_path}");
    Ok(0)
}

/// One image row per atom, one column per frequency bin, grayscale scaled to
/// the global maximum.
fn write_pgm(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    let peak = rows.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in rows {
        for &v in row {
            let g = if peak > 0.0 { (v / peak * 255.0).round() as u8 } else { 0 };
            buf.push(g);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn cmd_reconstruct(
    ckpt: &Path,
    layer: Option<&str>,
    input: &Path,
    out: &Path,
) -> Result<u8> {
    let store = checkpoint::load(ckpt)?;
    let prefixes = store_block_prefixes(&store);
    let prefix = match layer {
        Some(name) => {
            if !prefixes.iter().any(|p| p == name) {
                return Err(SdictError::Config(format!(
                    "no block named {name}; available: {}",
                    prefixes.join(", ")
                )));
            }
            name.to_string()
        }
        None => prefixes
            .first()
            .ok_or_else(|| SdictError::Config("checkpoint holds no mixer blocks".into()))?
            .clone(),
    };
    let mixer = store_block_mixer(&store, &prefix, MixerPath::Dense, DEFAULT_RIDGE)?;
    let x = read_csv_matrix(input)?;
    let y = mixer::sdict_forward(&mixer, &x)?;
    write_csv_matrix(out, &y)?;
    let rec = mixer::rec_loss(&[x], &[y]);
    println!("rec_loss={rec}");
    Ok(0)
}

fn read_csv_matrix(path: &Path) -> Result<RMatrix> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, m: &str| {
        SdictError::Config(format!("{}:{line}: {m}", path.display()))
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            row.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(i + 1, &format!("not a number: {field:?}")))?,
            );
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(bad(i + 1, "ragged row"));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SdictError::Config(format!("{}: empty matrix", path.display())));
    }
    let views: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Ok(RMatrix::from_rows(&views))
}

fn write_csv_matrix(path: &Path, m: &RMatrix) -> Result<()> {
    let mut text = String::new();
    for r in 0..m.rows {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_gradcheck(
    config: Option<&Path>,
    tolerance: f64,
    per_tensor: usize,
    corrupt: bool,
    seed: Option<u64>,
) -> Result<u8> {
    let cfg = load_train_config(config, seed)?;
    let model = Model::new(&cfg.model)?;
    let ex = dataset::gen_dataset(cfg.data_seed, 1, cfg.model.image_side).remove(0);
    let lambda_rec = cfg.loss.lambda_rec_at(0, cfg.steps.max(1));
    let lambda_l1 = cfg.loss.lambda_l1;
    let smoothing = cfg.label_smoothing;

    // The corrupt self-test adds c * sum_sq(p - (p_snapshot - 1)) for the
    // first parameter. Each finite-difference probe rebuilds the graph, so
    // the snapshot tracks the perturbed value and the term stays constant in
    // value, but the within-graph gradient picks up a 2c-per-entry skew that
    // the checker must flag.
    let first_param = model.store.iter().next().map(|(id, _, _)| id);
    let mut store = model.store.clone();
    let report = fd_check(
        &mut store,
        |s| {
            let mut tape = Tape::new();
            let parts = trainer::sample_loss_with(
                &model, s, &mut tape, &ex, lambda_rec, lambda_l1, smoothing,
            )
            .expect("gradcheck graph build failed");
            let mut loss = parts.total;
            if corrupt {
                let pid = first_param.expect("store has parameters");
                let p = tape.param(s, pid);
                let mut shifted = s.get(pid).clone();
                for v in &mut shifted.data {
                    *v -= 1.0;
                }
                let anchor = tape.input(shifted);
                let diff = tape.sub(p, anchor);
                let skew = tape.sum_sq(diff);
                let skew_w = tape.scale(skew, 1e-2);
                loss = tape.add(loss, skew_w);
            }
            (tape, loss)
        },
        per_tensor,
        1e-5,
        seed.unwrap_or(cfg.model.seed),
    );
    println!(
        "checked {} coordinates; max relative error {:.3e} at {} [{}]",
        report.checked, report.max_rel_err, report.worst_param, report.worst_coord
    );
    if report.max_rel_err < tolerance {
        println!("gradcheck PASS (tolerance {tolerance:.1e})");
        Ok(0)
    } else {
        println!("gradcheck FAIL (tolerance {tolerance:.1e})");
        Ok(3)
    }
}
