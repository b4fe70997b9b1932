//! Toy-scale reproductions of the large/small divergence, switch-step and
//! mask-latency analyses, plus a quality proxy against the pure-large output.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::stitcher::{
    diff_metric, run_generation, sig6, switch_steps, update_latent, LatencyMode, LatentGrid, ThresholdSchedule, Variant,
};
use crate::tensor::{topk_indices, SeededRng};
use crate::tinydit::{Denoiser, LayerKV};

/// Per-token relative difference below which the two models count as agreeing on a token.
pub const NEAR_ZERO_CUTOFF: f64 = 1e-3;
pub const TIMING_WARMUP: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffHistogram {
    pub seed: u64,
    pub step: usize,
    /// `bins + 1` contiguous edges spanning `[0, max]`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub near_zero_cutoff: f64,
    pub fraction_near_zero: f64,
}

impl DiffHistogram {
    pub fn from_values(seed: u64, step: usize, values: &[f64], bins: usize, near_zero_cutoff: f64) -> Self {
        let bins = bins.max(1);
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        let bin_edges: Vec<f64> = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = if max > 0.0 { ((v / max) * bins as f64) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
        let near = values.iter().filter(|&&v| v < near_zero_cutoff).count();
        Self {
            seed,
            step,
            bin_edges,
            counts,
            near_zero_cutoff,
            fraction_near_zero: near as f64 / values.len().max(1) as f64,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool")
}

/// Both models predict from the same latent each step; the large model's
/// prediction drives the next step. Records the per-token relative L1
/// difference between the two predictions at each probe step, one histogram
/// per `(seed, step)`.
#[allow(clippy::too_many_arguments)]
pub fn model_divergence_study(
    large: &Denoiser,
    small: &Denoiser,
    seeds: &[u64],
    probe_steps: &[usize],
    sigma_schedule: &[f64],
    bins: usize,
    near_zero_cutoff: f64,
    workers: usize,
) -> Result<Vec<DiffHistogram>> {
    let (lc, sc) = (large.config(), small.config());
    if lc.tokens != sc.tokens || lc.channels != sc.channels {
        return shape_err("model_divergence_study", "models disagree on tokens or channels");
    }
    let per_seed: Vec<Result<Vec<DiffHistogram>>> = pool(workers).install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let mut latent = LatentGrid::noise(lc.side(), lc.channels, seed);
                let mut out = Vec::new();
                for (t, &sigma) in sigma_schedule.iter().enumerate() {
                    let (nl, _) = large.forward_full(&latent.data, t)?;
                    if probe_steps.contains(&t) {
                        let (ns, _) = small.forward_full(&latent.data, t)?;
                        let diff = diff_metric(&nl, &ns)?;
                        out.push(DiffHistogram::from_values(seed, t, &diff.per_token, bins, near_zero_cutoff));
                    }
                    latent = update_latent(&latent, &nl, sigma)?;
                }
                Ok(out)
            })
            .collect()
    });
    let mut all = Vec::new();
    for r in per_seed {
        all.extend(r?);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchRecord {
    pub variant: Variant,
    pub seed: u64,
    pub first_switch: Option<usize>,
    pub second_switch: Option<usize>,
    pub error: Option<String>,
}

/// Step indices where each run first entered stage 1 and stage 2.
pub fn switch_step_study(
    large: &Denoiser,
    small: &Denoiser,
    schedule: &ThresholdSchedule,
    variants: &[Variant],
    seeds: &[u64],
    workers: usize,
) -> Vec<SwitchRecord> {
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    pool(workers).install(|| {
        jobs.par_iter()
            .map(|&(variant, seed)| {
                // steps only; simulated latency keeps runs off the clock
                let lat = LatencyMode::Simulated { large: 1.0, small: 0.1 };
                match run_generation(large, small, schedule, seed, variant, lat) {
                    Ok(g) => {
                        let sw = switch_steps(&g.traces);
                        SwitchRecord {
                            variant,
                            seed,
                            first_switch: sw.first().copied(),
                            second_switch: if variant == Variant::NaiveSwitch { None } else { sw.get(1).copied() },
                            error: None,
                        }
                    }
                    Err(e) => SwitchRecord {
                        variant,
                        seed,
                        first_switch: None,
                        second_switch: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLatency {
    /// `None` for the full-context reference forward.
    pub ratio: Option<f64>,
    pub mean_s: f64,
    pub median_s: f64,
    pub runs: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wall time of the large model's masked forward at each ratio, plus the
/// full forward as the last row. The mask and cache come from a seeded latent
/// one step into denoising; [`TIMING_WARMUP`] untimed passes precede each
/// measured batch.
pub fn mask_latency_study(large: &Denoiser, ratios: &[f64], runs: usize, seed: u64) -> Result<Vec<MaskLatency>> {
    let c = large.config();
    let latent = LatentGrid::noise(c.side(), c.channels, seed);
    let (noise, cache) = large.forward_full(&latent.data, 0)?;
    let next = update_latent(&latent, &noise, 0.05)?;
    let diff = diff_metric(&latent.data, &next.data)?;
    let runs = runs.max(1);

    let time = |f: &dyn Fn() -> Result<()>| -> Result<(f64, f64)> {
        for _ in 0..TIMING_WARMUP {
            f()?;
        }
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            f()?;
            samples.push(start.elapsed().as_secs_f64());
        }
        let mean = samples.iter().sum::<f64>() / runs as f64;
        Ok((mean, median(&mut samples)))
    };

    let mut out = Vec::with_capacity(ratios.len() + 1);
    for &ratio in ratios {
        let k = crate::stitcher::mask_size(ratio, c.tokens);
        let idx = topk_indices(&diff.per_token, k)?;
        let rows = next.data.gather_rows(&idx)?;
        let kv: &[LayerKV] = &cache;
        let (mean_s, median_s) = time(&|| large.forward_masked(&rows, &idx, kv, 1).map(|_| ()))?;
        out.push(MaskLatency { ratio: Some(ratio), mean_s, median_s, runs });
    }
    let (mean_s, median_s) = time(&|| large.forward_full(&next.data, 1).map(|_| ()))?;
    out.push(MaskLatency { ratio: None, mean_s, median_s, runs });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityProxy {
    pub rel_l1_vs_large: f64,
    pub max_abs_dev: f64,
}

pub fn quality_proxy(hybrid: &LatentGrid, pure_large: &LatentGrid) -> Result<QualityProxy> {
    let m = diff_metric(&pure_large.data, &hybrid.data)?;
    let max_abs_dev = pure_large
        .data
        .data()
        .iter()
        .zip(hybrid.data.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .fold(0.0, f64::max);
    Ok(QualityProxy { rel_l1_vs_large: m.d_t, max_abs_dev })
}

pub fn write_divergence_csv(mut w: impl Write, hists: &[DiffHistogram]) -> Result<()> {
    let mut s = String::from("seed,step,bin_lo,bin_hi,count\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{},{},{}\n", h.seed, h.step, sig6(h.bin_edges[i]), sig6(h.bin_edges[i + 1]), c));
        }
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_divergence_summary_csv(mut w: impl Write, hists: &[DiffHistogram]) -> Result<()> {
    let mut s = String::from("seed,step,near_zero_cutoff,fraction_near_zero,max_diff\n");
    for h in hists {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            h.seed,
            h.step,
            sig6(h.near_zero_cutoff),
            sig6(h.fraction_near_zero),
            sig6(*h.bin_edges.last().unwrap_or(&0.0))
        ));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_switch_csv(mut w: impl Write, records: &[SwitchRecord]) -> Result<()> {
    let opt = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
    let mut s = String::from("variant,seed,first_switch,second_switch,status\n");
    for r in records {
        let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("\"error: {}\"", e.replace('"', "'")));
        s.push_str(&format!("{},{},{},{},{}\n", r.variant, r.seed, opt(r.first_switch), opt(r.second_switch), status));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_mask_latency_csv(mut w: impl Write, rows: &[MaskLatency]) -> Result<()> {
    let mut s = String::from("ratio,runs,mean_ms,median_ms\n");
    for r in rows {
        let ratio = r.ratio.map_or("full".to_string(), sig6);
        s.push_str(&format!("{},{},{},{}\n", ratio, r.runs, sig6(r.mean_s * 1e3), sig6(r.median_s * 1e3)));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// gnuplot-friendly `ratio mean_ms median_ms`; the full forward is plotted at ratio 1.
pub fn write_mask_latency_dat(mut w: impl Write, rows: &[MaskLatency]) -> Result<()> {
    let mut s = String::from("# ratio mean_ms median_ms (full forward at ratio 1)\n");
    for r in rows {
        s.push_str(&format!("{} {} {}\n", sig6(r.ratio.unwrap_or(1.0)), sig6(r.mean_s * 1e3), sig6(r.median_s * 1e3)));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Seeds `base, base + 1, …`.
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Deterministic random subset of `k` distinct tokens, ascending.
pub fn random_mask_indices(rng: &mut SeededRng, tokens: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..tokens).collect();
    for i in 0..k.min(tokens) {
        let j = i + rng.below(tokens - i);
        all.swap(i, j);
    }
    let mut out = all[..k.min(tokens)].to_vec();
    out.sort_unstable();
    out
}
