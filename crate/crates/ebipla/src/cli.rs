//! Command-line front end: `gen-data`, `train`, `sweep`, `eval-mmd`,
//! `verify-bound`.
//!
//! Every run writes a fully resolved config echo next to its artifacts, so
//! any output can be reproduced byte-for-byte from the `--out` directory.
//! Exit codes: 0 success, 1 runtime/check failure, 2 invalid configuration.

use crate::config::{
    build_decoder, build_energy, init_theta, layout_json, load_config, resolve_dataset,
    set_config_path, theta_star_for, ConfigFile,
};
use crate::data::{export_csv, load_dataset, sample_swiss_roll, save_dataset};
use crate::dynamics::measure_zeta_bias;
use crate::error::{Error, Result};
use crate::eval::{mmd_unbiased, MmdConfig};
use crate::model::{GaussianLocationModel, GaussianScaleModel, IdentityDecoder, Theta};
use crate::rng::NoiseStream;
use crate::theory::{
    bound_exact, concentration_check, gaussian_location_profile, location_testbed_data,
    rescaling_equivalence_check, ConcentrationConfig,
};
use crate::trainer::{metrics_to_csv, run, save_checkpoint, summarize, RunSummary};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "ebipla",
    about = "Interacting-particle Langevin training for latent energy-based models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (fallback: EBIPLA_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset from the config's `dataset.swiss_roll` section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also export dataset.csv for inspection.
        #[arg(long)]
        csv: bool,
    },
    /// Train per the config; writes metrics.csv, summary.json, checkpoint.bin.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override run.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Grid sweep over config paths x seeds; writes sweep_results.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unbiased MMD between two dataset files.
    EvalMmd {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        bandwidth: f64,
    },
    /// Run the theorem-verification checks; writes bound_check.csv.
    VerifyBound {
        #[arg(long)]
        out: PathBuf,
        /// Seeds per grid cell for the empirical checks.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Use the full 20-seed grid (slow).
        #[arg(long)]
        full: bool,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Schema { .. }
        | Error::Dimension { .. }
        | Error::StepRestriction { .. }
        | Error::MissingCapability(_) => 2,
        _ => 1,
    }
}

pub fn run_cli(cli: Cli) -> i32 {
    let threads = cli.threads.or_else(|| {
        std::env::var("EBIPLA_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    let body = || -> Result<i32> {
        match &cli.command {
            Command::GenData {
                config,
                out,
                seed,
                csv,
            } => {
                cmd_gen_data(config, out, *seed, *csv)?;
                Ok(0)
            }
            Command::Train { config, out, seed } => {
                let summary = cmd_train(config, out, *seed)?;
                println!(
                    "trained {} iterations; artifacts in {}",
                    summary.final_iteration,
                    out.display()
                );
                Ok(0)
            }
            Command::Sweep { config, out } => {
                let ok = cmd_sweep(config, out)?;
                Ok(if ok { 0 } else { 1 })
            }
            Command::EvalMmd { p, q, bandwidth } => {
                let v = cmd_eval_mmd(p, q, *bandwidth)?;
                println!("mmd: {v}");
                Ok(0)
            }
            Command::VerifyBound { out, seeds, full } => {
                let ok = cmd_verify(out, if *full { 20 } else { *seeds }, *full)?;
                Ok(if ok { 0 } else { 1 })
            }
        }
    };
    let result = match threads {
        Some(t) if t >= 1 => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(body),
            Err(e) => {
                eprintln!("error: cannot build thread pool: {e}");
                return 2;
            }
        },
        Some(_) => {
            eprintln!("error: --threads must be >= 1");
            return 2;
        }
        None => body(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>, csv: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let mut spec = cfg.dataset.swiss_roll.clone().ok_or_else(|| {
        Error::Config("gen-data requires a dataset.swiss_roll section".into())
    })?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = sample_swiss_roll(&spec)?;
    ensure_dir(out)?;
    save_dataset(&ds, &out.join("dataset.bin"))?;
    if csv {
        export_csv(&ds, &out.join("dataset.csv"))?;
    }
    println!(
        "wrote {} points to {}",
        ds.len(),
        out.join("dataset.bin").display()
    );
    Ok(())
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<RunSummary> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    let summary = train_from_config(&cfg, config.parent(), Some(out))?;
    Ok(summary)
}

/// Run one training job; when `out` is given, write metrics.csv,
/// checkpoint.bin(+.json), summary.json and config_echo.json there.
pub fn train_from_config(
    cfg: &ConfigFile,
    base_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<RunSummary> {
    let data = resolve_dataset(&cfg.dataset, base_dir)?;
    let energy = build_energy(&cfg.model.energy)?;
    let decoder = build_decoder(&cfg.model.decoder)?;
    let theta0 = init_theta(&cfg.model, energy.as_ref(), decoder.as_ref())?;
    let theta_star = theta_star_for(&cfg.model, &data);
    let ctx = crate::trainer::TrainContext {
        model: energy.as_ref(),
        decoder: decoder.as_ref(),
        data: &data,
        theta_star,
    };
    let output = run(&cfg.run, &ctx, theta0)?;
    let mut summary = summarize(&cfg.run, data.len(), &output);
    if let Some(out_dir) = out {
        ensure_dir(out_dir)?;
        write_text(&out_dir.join("metrics.csv"), &metrics_to_csv(&output.metrics))?;
        let ckpt = out_dir.join("checkpoint.bin");
        save_checkpoint(
            &ckpt,
            &output.state.theta,
            output.state.iteration,
            layout_json(&cfg.model),
        )?;
        summary.checkpoint = Some("checkpoint.bin".into());
        write_text(
            &out_dir.join("summary.json"),
            &serde_json::to_string_pretty(&summary)?,
        )?;
        write_text(
            &out_dir.join("config_echo.json"),
            &serde_json::to_string_pretty(cfg)?,
        )?;
    }
    Ok(summary)
}

pub fn cmd_eval_mmd(p: &Path, q: &Path, bandwidth: f64) -> Result<f64> {
    let dp = load_dataset(p)?;
    let dq = load_dataset(q)?;
    if dp.dim() != dq.dim() {
        return Err(Error::Dimension {
            axis: "sample_dim",
            expected: dp.dim(),
            got: dq.dim(),
        });
    }
    mmd_unbiased(dp.values(), dq.values(), dp.dim(), &MmdConfig { bandwidth })
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct CellResult {
    key: String,
    runs: usize,
    mmd: Vec<f64>,
    param_error: Vec<f64>,
    error: Option<String>,
}

fn mean_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn cmd_sweep(config: &Path, out: &Path) -> Result<bool> {
    let cfg = load_config(config)?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("sweep requires a `sweep` section".into()))?;
    sweep.validate()?;
    let cells = sweep.cells();
    let total_runs = cells * sweep.seeds.len();
    println!(
        "sweep: {cells} cells x {} seeds = {total_runs} runs",
        sweep.seeds.len()
    );

    let base_value = serde_json::to_value(&cfg)?;
    let mut results: Vec<CellResult> = Vec::with_capacity(cells);
    for cell_idx in 0..cells {
        let mut rem = cell_idx;
        let mut value = base_value.clone();
        let mut key_parts = Vec::new();
        for axis in &sweep.grid {
            let i = rem % axis.values.len();
            rem /= axis.values.len();
            set_config_path(&mut value, &axis.path, axis.values[i].clone())?;
            key_parts.push(format!("{}={}", axis.path, axis.values[i]));
        }
        let mut cell = CellResult {
            key: key_parts.join(";"),
            runs: 0,
            mmd: Vec::new(),
            param_error: Vec::new(),
            error: None,
        };
        for &seed in &sweep.seeds {
            let mut v = value.clone();
            set_config_path(&mut v, "run.seed", serde_json::json!(seed))?;
            let run_result = serde_json::from_value::<ConfigFile>(v)
                .map_err(|e| Error::Config(format!("sweep cell config invalid: {e}")))
                .and_then(|c| train_from_config(&c, config.parent(), None));
            match run_result {
                Ok(summary) => {
                    cell.runs += 1;
                    if let Some(m) = summary.final_mmd {
                        cell.mmd.push(m);
                    }
                    if let Some(p) = summary.final_param_error {
                        cell.param_error.push(p);
                    }
                }
                Err(e) => {
                    cell.error = Some(e.to_string());
                }
            }
        }
        results.push(cell);
    }

    results.sort_by(|a, b| a.key.cmp(&b.key));
    let mut csv = String::from(
        "cell,runs,mmd_mean,mmd_stderr,param_error_mean,param_error_stderr,error\n",
    );
    let mut all_ok = true;
    for cell in &results {
        let (mm, ms) = mean_stderr(&cell.mmd);
        let (pm, ps) = mean_stderr(&cell.param_error);
        if cell.error.is_some() {
            all_ok = false;
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.key,
            cell.runs,
            fmt_opt(mm),
            fmt_opt(ms),
            fmt_opt(pm),
            fmt_opt(ps),
            cell.error.clone().unwrap_or_default()
        ));
    }
    ensure_dir(out)?;
    write_text(&out.join("sweep_results.csv"), &csv)?;
    println!("sweep results in {}", out.join("sweep_results.csv").display());
    Ok(all_ok)
}

// ---------------------------------------------------------------------------
// verify-bound
// ---------------------------------------------------------------------------

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

pub fn cmd_verify(out: &Path, seeds: usize, full: bool) -> Result<bool> {
    ensure_dir(out)?;
    let mut checks: Vec<Check> = Vec::new();

    // Step restriction is enforced by the bound evaluator.
    {
        let profile = gaussian_location_profile(1, 1.0, 1.0, 100, 16)?;
        let bad = bound_exact(&profile, profile.h_max() * 1.01, 10, 1.0);
        let good = bound_exact(&profile, profile.h_max(), 10, 1.0);
        checks.push(Check {
            name: "step_restriction",
            pass: bad.is_err() && good.is_ok(),
            detail: format!("h_max = {:.6}", profile.h_max()),
        });
    }

    // Rescaled and original systems coincide under shared noise.
    {
        let data = location_testbed_data(5, 1, 0.5, 101);
        let model = GaussianLocationModel::new(1);
        let decoder = IdentityDecoder::new(1, 1.0);
        let theta0 = Theta::new(vec![1.0], vec![])?;
        let div = rescaling_equivalence_check(
            &model, &decoder, &data, 4, 0.1, 100, 11, &theta0, false,
        )?;
        checks.push(Check {
            name: "rescaling_equivalence",
            pass: div < 1e-10,
            detail: format!("max divergence {div:.3e} (tolerance 1e-10)"),
        });
        let desync = rescaling_equivalence_check(
            &model, &decoder, &data, 4, 0.1, 20, 11, &theta0, true,
        )?;
        checks.push(Check {
            name: "rescaling_sensitivity",
            pass: desync > 0.0,
            detail: format!("desynchronized divergence {desync:.3e} > 0"),
        });
    }

    // ULA prior-estimate bias shrinks with the chain length.
    {
        let model = GaussianScaleModel::new(2);
        let alpha = [2.0f64.ln()];
        let stream = NoiseStream::new(505);
        let reps = if full { 10_000 } else { 2_000 };
        let mut biases = Vec::new();
        let mut detail = String::new();
        for &j in &[5usize, 50, 200] {
            let stats = measure_zeta_bias(&model, &alpha, 0.01, j, 8, reps, &stream)?;
            detail.push_str(&format!(
                "J={j}: |E zeta| = {:.4}, var = {:.4}; ",
                stats.bias_norm, stats.variance
            ));
            if !stats.variance.is_finite() {
                biases.clear();
                break;
            }
            biases.push(stats.bias_norm);
        }
        let monotone = biases.len() == 3 && biases[0] > biases[1] && biases[1] > biases[2];
        checks.push(Check {
            name: "zeta_bias_monotone_in_chain_length",
            pass: monotone,
            detail,
        });
    }

    // Theorem-style inequality and N-scaling on the location testbed.
    {
        let data = location_testbed_data(100, 1, 0.5, 2024);
        let cfg = ConcentrationConfig {
            seeds: (0..seeds as u64).collect(),
            ..ConcentrationConfig::default()
        };
        let cells = concentration_check(&data, &cfg)?;
        let mut csv = String::from("n,h,empirical_error,bound,envelope,w2_init\n");
        for c in &cells {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.n, c.h, c.rms_error, c.bound, c.envelope, c.w2_init
            ));
        }
        write_text(&out.join("bound_check.csv"), &csv)?;

        let inequality = cells.iter().all(|c| c.rms_error <= c.bound);
        checks.push(Check {
            name: "theorem1_inequality",
            pass: inequality,
            detail: format!("{} grid cells, bound respected: {inequality}", cells.len()),
        });

        let at_h: Vec<&_> = cells.iter().filter(|c| (c.h - 0.1).abs() < 1e-12).collect();
        let decreasing = at_h.windows(2).all(|w| w[1].rms_error < w[0].rms_error);
        let ratio = at_h.last().map(|c| c.rms_error).unwrap_or(f64::NAN)
            / at_h.first().map(|c| c.rms_error).unwrap_or(f64::NAN);
        checks.push(Check {
            name: "n_scaling",
            pass: decreasing && ratio <= 0.35,
            detail: format!("error(N=max)/error(N=min) = {ratio:.3} (<= 0.35)"),
        });
    }

    let mut all_ok = true;
    for c in &checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", c.name, c.detail);
        all_ok &= c.pass;
    }
    println!(
        "bound grid written to {}",
        out.join("bound_check.csv").display()
    );
    Ok(all_ok)
}
