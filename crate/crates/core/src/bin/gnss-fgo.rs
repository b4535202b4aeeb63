use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use gnss_fgo::io::{self, EpochFileHeader, Frame, StatsSummary, TrajectoryRow};
use gnss_fgo::pipeline::{
    run_example1, run_example2, run_recipe, AmbiguityMode, EpochEstimate, Example1Config,
    Example2Config, Example2Model, GraphRecipe, Masks, RunOutput,
};
use gnss_fgo::scenario::{generate, ScenarioConfig};
use gnss_fgo::stats::{compute_error_stats, ErrorMetric};
use gnss_fgo::{Error, Result, RobustKernel};

const CONFIG_DIR_ENV: &str = "GNSS_FGO_CONFIG_DIR";

#[derive(Parser)]
#[command(
    name = "gnss-fgo",
    version,
    about = "Factor graph optimization for GNSS positioning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Urban,
    Rtk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Robust {
    Huber,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Horizontal,
    #[value(name = "3d")]
    ThreeD,
}

impl From<Metric> for ErrorMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Horizontal => ErrorMetric::Horizontal,
            Metric::ThreeD => ErrorMetric::ThreeD,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Ambiguity {
    PerEpoch,
    PerArc,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: epoch file plus ground truth.
    Simulate {
        /// Scenario TOML file (relative paths also searched in $GNSS_FGO_CONFIG_DIR).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Overrides the seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Switch off all noise, outliers and anchor errors.
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Solve an epoch file with a graph recipe.
    Solve {
        #[arg(long)]
        epochs: PathBuf,
        /// Graph recipe TOML file (relative paths also searched in $GNSS_FGO_CONFIG_DIR).
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Robust single-point positioning on a synthetic urban scenario.
    Example1 {
        #[arg(long, value_enum, default_value = "huber")]
        robust: Robust,
        #[arg(long, default_value_t = gnss_fgo::robust::DEFAULT_HUBER_K)]
        huber_k: f64,
        /// Minimum carrier-to-noise density, dB-Hz.
        #[arg(long, default_value_t = 35.0)]
        snr_mask: f64,
        /// Minimum elevation, degrees.
        #[arg(long, default_value_t = 15.0)]
        el_mask: f64,
        /// Keep every observation regardless of signal strength and elevation.
        #[arg(long)]
        no_mask: bool,
        /// Sigma of the clock-constancy factor, meters.
        #[arg(long, default_value_t = 0.1)]
        clock_sigma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Carrier-phase positioning with integer ambiguity resolution.
    Example2 {
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        model: u8,
        #[arg(long, default_value_t = gnss_fgo::ambiguity::DEFAULT_RATIO_THRESHOLD)]
        ratio_threshold: f64,
        #[arg(long, value_enum, default_value = "per-epoch")]
        ambiguity: Ambiguity,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Error statistics of estimated positions against truth.
    Stats {
        /// Trajectory CSV (epoch,time,x,y,z).
        #[arg(long)]
        estimates: PathBuf,
        /// Trajectory CSV or ground-truth JSON.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "3d")]
        metric: Metric,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cdf: Option<PathBuf>,
    },
}

fn config_path(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Ok(dir) = std::env::var(CONFIG_DIR_ENV) {
            let candidate = Path::new(&dir).join(p);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    p.to_path_buf()
}

fn rows(est: &[EpochEstimate]) -> Vec<TrajectoryRow> {
    est.iter()
        .map(|e| TrajectoryRow {
            epoch: e.epoch,
            time: e.time,
            x: e.position[0],
            y: e.position[1],
            z: e.position[2],
        })
        .collect()
}

fn write_outputs(
    out: &RunOutput,
    dir: &Path,
    name: &str,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_trajectory(
        dir.join(format!("{name}_trajectory.csv")),
        &rows(&out.positions),
    )?;
    if let Some(res) = &out.resolution {
        let text = serde_json::to_string_pretty(&json!({
            "fixed_rate": res.fixed_rate,
            "float_trace": res.float_trace,
            "blocks": res.blocks,
        }))?;
        std::fs::write(dir.join(format!("{name}_ambiguities.json")), text + "\n")?;
    }
    if let Some(stats) = &out.stats {
        let mut summary = StatsSummary::from(stats);
        summary.extra = extra;
        io::write_stats(dir.join(format!("{name}_stats.json")), &summary)?;
        io::write_cdf(dir.join(format!("{name}_cdf.csv")), stats)?;
        println!(
            "{name}: rms {:.3} m, p50 {:.3} m, p95 {:.3} m, score {:.3} m over {} epochs",
            stats.rms, stats.p50, stats.p95, stats.sdc_score, stats.count
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            preset,
            seed,
            noiseless,
            out,
            truth,
        } => {
            let mut cfg = match (config, preset) {
                (Some(path), _) => io::load_scenario_config(config_path(&path))?,
                (None, Some(Preset::Urban)) => ScenarioConfig::urban_example1(seed.unwrap_or(1)),
                (None, Some(Preset::Rtk)) => ScenarioConfig::rtk_example2(seed.unwrap_or(1)),
                (None, None) => {
                    return Err(Error::Config(
                        "either --config or --preset is required".into(),
                    ))
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if noiseless {
                cfg = cfg.noiseless();
            }
            let (records, gt) = generate(&cfg)?;
            let header = EpochFileHeader::new(
                Frame::Enu,
                gt.layout.clone(),
                json!({"seed": cfg.seed, "n_epochs": cfg.n_epochs, "dt": cfg.dt}),
            );
            io::write_epochs(&out, &header, &records)?;
            io::write_truth(&truth, &gt)?;
            println!("wrote {} epochs to {}", records.len(), out.display());
        }
        Command::Solve {
            epochs,
            recipe,
            truth,
            out_dir,
        } => {
            let records = io::load_epochs(&epochs)?;
            let recipe = GraphRecipe::from_toml(&std::fs::read_to_string(config_path(&recipe))?)?;
            let gt = truth.map(io::read_truth).transpose()?;
            let out = run_recipe(&records, &recipe, gt.as_ref())?;
            info!("solved in {} iterations", out.float.iterations);
            write_outputs(&out, &out_dir, "solution", serde_json::Map::new())?;
            if let Some(r) = &out.resolution {
                println!("fixed rate {:.1}%", 100.0 * r.fixed_rate);
            }
        }
        Command::Example1 {
            robust,
            huber_k,
            snr_mask,
            el_mask,
            no_mask,
            clock_sigma,
            seed,
            out_dir,
        } => {
            let kernel = match robust {
                Robust::Huber => RobustKernel::huber(huber_k),
                Robust::None => RobustKernel::None,
            };
            if !kernel.is_valid() {
                return Err(Error::Config(format!("invalid Huber threshold {huber_k}")));
            }
            let (records, gt) = generate(&ScenarioConfig::urban_example1(seed))?;
            let cfg = Example1Config {
                kernel,
                clock_sigma,
                masks: if no_mask {
                    Masks::default()
                } else {
                    Masks::new(snr_mask, el_mask)
                },
            };
            let out = run_example1(&records, Some(&gt), &cfg)?;
            let name = match robust {
                Robust::Huber => "example1_huber",
                Robust::None => "example1_none",
            };
            let mut extra = serde_json::Map::new();
            extra.insert("seed".into(), json!(seed));
            extra.insert(
                "removed_observations".into(),
                json!(out.built.removed_observations),
            );
            write_outputs(&out, &out_dir, name, extra)?;
        }
        Command::Example2 {
            model,
            ratio_threshold,
            ambiguity,
            seed,
            out_dir,
        } => {
            let (records, gt) = generate(&ScenarioConfig::rtk_example2(seed))?;
            let cfg = Example2Config {
                model: if model == 1 {
                    Example2Model::Model1
                } else {
                    Example2Model::Model2
                },
                ratio_threshold,
                ambiguity: match ambiguity {
                    Ambiguity::PerEpoch => AmbiguityMode::PerEpoch,
                    Ambiguity::PerArc => AmbiguityMode::PerArc,
                },
            };
            let out = run_example2(&records, Some(&gt), &cfg)?;
            let res = out.resolution.as_ref();
            let fixed_rate = res.map_or(0.0, |r| r.fixed_rate);
            let mut extra = serde_json::Map::new();
            extra.insert("seed".into(), json!(seed));
            extra.insert("fixed_rate".into(), json!(fixed_rate));
            extra.insert(
                "float_trace".into(),
                json!(res.map_or(0.0, |r| r.float_trace)),
            );
            write_outputs(&out, &out_dir, &format!("example2_model{model}"), extra)?;
            println!("model {model}: fixed rate {:.1}%", 100.0 * fixed_rate);
        }
        Command::Stats {
            estimates,
            truth,
            metric,
            out,
            cdf,
        } => {
            let est = io::read_trajectory(&estimates)?;
            let tru = io::read_trajectory(&truth)?;
            let by_epoch: std::collections::BTreeMap<usize, [f64; 3]> =
                tru.iter().map(|r| (r.epoch, r.position())).collect();
            let mut e = Vec::new();
            let mut t = Vec::new();
            for r in &est {
                let p = by_epoch.get(&r.epoch).ok_or_else(|| {
                    Error::InvalidInput(format!("truth has no epoch {}", r.epoch))
                })?;
                e.push(r.position());
                t.push(*p);
            }
            let stats = compute_error_stats(&e, &t, metric.into())?;
            let summary = StatsSummary::from(&stats);
            match out {
                Some(p) => io::write_stats(p, &summary)?,
                None => println!("{}", serde_json::to_string_pretty(&summary)?),
            }
            if let Some(p) = cdf {
                io::write_cdf(p, &stats)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
