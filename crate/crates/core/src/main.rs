//! `regionstitch` command-line driver.
//!
//! Exit codes: 0 success, 2 usage error, 3 config error, 4 run failure,
//! 5 validation outside tolerance, 6 I/O error.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use regionstitch::analysis::{
    mask_latency_study, model_divergence_study, quality_proxy, switch_step_study, write_divergence_csv,
    write_divergence_summary_csv, write_mask_latency_csv, write_mask_latency_dat, write_switch_csv,
};
use regionstitch::config::{load_config, RunConfig};
use regionstitch::cost::{validate_trace, CostModelParams};
use regionstitch::stitcher::{run_generation, sig6, switch_steps, write_trace_csv, Generation, LatencyMode, Variant};
use regionstitch::tensor::write_grid;
use regionstitch::tinydit::Denoiser;
use regionstitch::Error;

const EXIT_CONFIG: u8 = 3;
const EXIT_RUN: u8 = 4;
const EXIT_VALIDATION: u8 = 5;
const EXIT_IO: u8 = 6;

#[derive(Parser)]
#[command(name = "regionstitch", version, about = "Region-aware large/small denoiser stitching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run generations and write latents, traces and a summary.
    Generate(Common),
    /// Run the divergence, switch-step and mask-latency studies.
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Which::All)]
        which: Which,
    },
    /// Check measured latencies against the analytical model.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.25)]
        tolerance: f64,
    },
    /// Print the validated config, with overrides applied, as canonical JSON.
    DumpConfig(Common),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    All,
    Divergence,
    Switch,
    MaskLatency,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    /// Replaces the configured noise seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    simulated_latency: bool,
    /// Comma-separated threshold ladder, e.g. `0.3,0.25` or `inf,0.1`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    thresholds: Option<Vec<String>>,
    /// Comma-separated mask ratios, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    mask_ratios: Option<Vec<f64>>,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::ConfigParse { .. } | Error::Config(_) => EXIT_CONFIG,
            Error::Io(_) => EXIT_IO,
            _ => EXIT_RUN,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn config_failure(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_CONFIG, msg: msg.into() }
}

fn parse_threshold(s: &str) -> Result<f64, Failure> {
    match s.trim() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        v => v.parse().map_err(|_| config_failure(format!("bad threshold {v:?}"))),
    }
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(&common.config).map_err(|e| match e {
        Error::Io(io) => config_failure(format!("{}: {io}", common.config.display())),
        other => other.into(),
    })?;
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    if let Some(s) = common.seed {
        cfg.noise_seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if common.simulated_latency {
        cfg.simulated_latency = true;
    }
    if let Some(t) = &common.thresholds {
        cfg.thresholds = t.iter().map(|s| parse_threshold(s)).collect::<Result<_, _>>()?;
    }
    if let Some(m) = &common.mask_ratios {
        cfg.mask_ratios = m.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn latency_mode(cfg: &RunConfig) -> LatencyMode {
    if cfg.simulated_latency {
        LatencyMode::Simulated { large: cfg.sim_large_latency, small: cfg.sim_small_latency }
    } else {
        LatencyMode::WallClock
    }
}

fn build_models(cfg: &RunConfig) -> Result<(Denoiser, Denoiser), Failure> {
    Ok((Denoiser::build(cfg.large.clone())?, Denoiser::build(cfg.small.clone())?))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(dir.join(name)).map_err(Error::from)?))
}

fn total_time(g: &Generation) -> f64 {
    g.traces.iter().map(|t| t.wall_time_large + t.wall_time_small).sum()
}

fn cmd_generate(cfg: &RunConfig) -> Result<(), Failure> {
    let (large, small) = build_models(cfg)?;
    let schedule = cfg.schedule()?;
    let lat = latency_mode(cfg);
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(Error::from)?;

    for &seed in &cfg.noise_seeds {
        let g = run_generation(&large, &small, &schedule, seed, cfg.variant, lat)?;
        let reference = if cfg.variant == Variant::PureLarge {
            g.clone()
        } else {
            run_generation(&large, &small, &schedule, seed, Variant::PureLarge, lat)?
        };
        write_grid(create(dir, &format!("latent_seed{seed}.sgrd"))?, &g.final_latent.data)?;
        write_trace_csv(create(dir, &format!("trace_seed{seed}.csv"))?, &g.traces)?;

        let q = quality_proxy(&g.final_latent, &reference.final_latent)?;
        let (total, ref_total) = (total_time(&g), total_time(&reference));
        let sw: Vec<String> = switch_steps(&g.traces).iter().map(|s| s.to_string()).collect();
        let summary = format!(
            "variant={}\nseed={seed}\nsteps={}\nswitch_steps={}\nfinal_stage={}\ndegenerate_tokens={}\n\
             rel_l1_vs_large={}\nmax_abs_dev={}\ntotal_wall_s={}\nreference_wall_s={}\nspeedup_vs_pure_large={}\n",
            cfg.variant,
            g.traces.len(),
            sw.join(","),
            g.traces.last().map_or(0, |t| t.stage),
            g.degenerate_tokens,
            sig6(q.rel_l1_vs_large),
            sig6(q.max_abs_dev),
            sig6(total),
            sig6(ref_total),
            sig6(ref_total / total),
        );
        fs::write(dir.join(format!("summary_seed{seed}.txt")), &summary).map_err(Error::from)?;
        print!("{summary}");
    }
    Ok(())
}

fn cmd_study(cfg: &RunConfig, which: Which) -> Result<(), Failure> {
    let (large, small) = build_models(cfg)?;
    let schedule = cfg.schedule()?;
    let st = &cfg.study;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(Error::from)?;

    if matches!(which, Which::All | Which::Divergence) {
        let probes =
            if st.probe_steps.is_empty() { vec![0, cfg.steps / 2, cfg.steps - 1] } else { st.probe_steps.clone() };
        let hists = model_divergence_study(
            &large,
            &small,
            &st.seeds,
            &probes,
            schedule.sigma_schedule(),
            st.bins,
            st.near_zero_cutoff,
            cfg.workers,
        )?;
        write_divergence_csv(create(dir, "divergence.csv")?, &hists)?;
        write_divergence_summary_csv(create(dir, "divergence_summary.csv")?, &hists)?;
        for h in &hists {
            println!("divergence seed={} step={} fraction_near_zero={}", h.seed, h.step, sig6(h.fraction_near_zero));
        }
    }
    if matches!(which, Which::All | Which::Switch) {
        let recs = switch_step_study(&large, &small, &schedule, &st.switch_variants, &st.seeds, cfg.workers);
        write_switch_csv(create(dir, "switch_steps.csv")?, &recs)?;
        println!("switch records={}", recs.len());
    }
    if matches!(which, Which::All | Which::MaskLatency) {
        let seed = cfg.noise_seeds[0];
        let rows = mask_latency_study(&large, &st.mask_latency_ratios, st.mask_latency_runs, seed)?;
        write_mask_latency_csv(create(dir, "mask_latency.csv")?, &rows)?;
        write_mask_latency_dat(create(dir, "mask_latency.dat")?, &rows)?;
        for r in &rows {
            let ratio = r.ratio.map_or("full".into(), sig6);
            println!("mask_latency ratio={ratio} mean_ms={}", sig6(r.mean_s * 1e3));
        }
    }
    Ok(())
}

fn mean_step_time(g: &Generation) -> f64 {
    total_time(g) / g.traces.len() as f64
}

fn cmd_validate(cfg: &RunConfig, tolerance: f64) -> Result<(), Failure> {
    if matches!(cfg.variant, Variant::FullLarge) {
        return Err(config_failure(
            "validate: full-large does full-image large passes; the latency model does not cover it",
        ));
    }
    let (large, small) = build_models(cfg)?;
    let schedule = cfg.schedule()?;
    let lat = latency_mode(cfg);
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(Error::from)?;

    let mut all_pass = true;
    for &seed in &cfg.noise_seeds {
        let g = run_generation(&large, &small, &schedule, seed, cfg.variant, lat)?;
        let (l_l, l_s) = match lat {
            LatencyMode::Simulated { large, small } => (large, small),
            LatencyMode::WallClock => {
                let pl = run_generation(&large, &small, &schedule, seed, Variant::PureLarge, lat)?;
                let ps = run_generation(&large, &small, &schedule, seed, Variant::PureSmall, lat)?;
                (mean_step_time(&pl), mean_step_time(&ps))
            }
        };
        let params = CostModelParams::from_trace(&g.traces, l_l, l_s)?;
        let report = validate_trace(&g.traces, &params, tolerance)?;
        let text = format!("variant={}\nseed={seed}\n{}", cfg.variant, report.to_kv_text());
        fs::write(dir.join(format!("validation_seed{seed}.txt")), &text).map_err(Error::from)?;
        print!("{text}");
        all_pass &= report.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure { code: EXIT_VALIDATION, msg: format!("measured latency outside tolerance {tolerance}") })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate(c) => cmd_generate(&load(&c)?),
        Command::Study { common, which } => cmd_study(&load(&common)?, which),
        Command::Validate { common, tolerance } => cmd_validate(&load(&common)?, tolerance),
        Command::DumpConfig(c) => {
            print!("{}", load(&c)?.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
