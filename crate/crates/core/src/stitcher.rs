//! Region-aware stitching of a large and a small denoiser.
//!
//! A run walks through stages:
//!
//! - stage 0: the large model denoises the whole latent;
//! - stages `1..=n`: the small model drafts the whole latent while the large
//!   model refines only the masked tokens, padding its attention context
//!   with the previous step's K/V cache;
//! - stage `n + 1`: the small model alone.
//!
//! After every step the switch metric `D_t` (mean per-token relative L1
//! change of the latent) is compared against the current stage's threshold;
//! dropping strictly below it advances exactly one stage. The same per-token
//! change picks the top-K tokens for the mask.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::feasible_mask_bound;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gaussian, topk_indices, Grid2D, SeededRng};
use crate::tinydit::{refresh_kv_cache, Denoiser, LayerKV};

/// Denominator floor for the per-token relative change.
pub const DIFF_EPS: f64 = 1e-8;

/// The evolving latent `X_t`: `side² × channels` tokens plus the step index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub side: usize,
    pub channels: usize,
    pub data: Grid2D,
    pub step: usize,
}

impl LatentGrid {
    pub fn new(side: usize, data: Grid2D) -> Result<Self> {
        if data.rows() != side * side {
            return shape_err("LatentGrid::new", format!("{} rows for side {side}", data.rows()));
        }
        Ok(Self { side, channels: data.cols(), data, step: 0 })
    }

    /// Standard normal latent drawn from `seed`.
    pub fn noise(side: usize, channels: usize, seed: u64) -> Self {
        let data = gaussian(&mut SeededRng::new(seed), side * side, channels);
        Self { side, channels, data, step: 0 }
    }

    pub fn tokens(&self) -> usize {
        self.side * self.side
    }
}

/// Token indices refined by the large model, ascending, with the ratio that sized them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    indices: Vec<usize>,
    ratio: f64,
}

impl Mask {
    pub fn new(indices: Vec<usize>, ratio: f64, tokens: usize) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Schedule(format!("mask ratio {ratio} outside (0, 1]")));
        }
        if indices.is_empty() {
            return Err(Error::EmptyMask);
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return shape_err("Mask::new", "indices must be strictly ascending");
        }
        if let Some(&last) = indices.last() {
            if last >= tokens {
                return Err(Error::IndexOutOfRange { index: last, len: tokens });
            }
        }
        Ok(Self { indices, ratio })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Number of tokens a mask of `ratio` selects: `round(ratio · tokens)`, at least one.
pub fn mask_size(ratio: f64, tokens: usize) -> usize {
    ((ratio * tokens as f64).round() as usize).clamp(1, tokens)
}

/// Top-K tokens by per-token change, `K = max(1, round(ratio · tokens))`.
pub fn update_mask(per_token_diff: &[f64], ratio: f64) -> Result<Mask> {
    let tokens = per_token_diff.len();
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Schedule(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let k = mask_size(ratio, tokens);
    Mask::new(topk_indices(per_token_diff, k)?, ratio, tokens)
}

/// Threshold ladder, mask-ratio ladder and per-step Euler step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    thresholds: Vec<f64>,
    mask_ratios: Vec<f64>,
    sigma_schedule: Vec<f64>,
}

impl ThresholdSchedule {
    pub fn new(thresholds: Vec<f64>, mask_ratios: Vec<f64>, sigma_schedule: Vec<f64>) -> Result<Self> {
        if thresholds.len() != mask_ratios.len() + 1 {
            return Err(Error::Schedule(format!(
                "thresholds list length {} must equal mask_ratios length {} + 1",
                thresholds.len(),
                mask_ratios.len()
            )));
        }
        if let Some(t) = thresholds.iter().find(|t| t.is_nan()) {
            return Err(Error::Schedule(format!("threshold {t} is not a number")));
        }
        if let Some(m) = mask_ratios.iter().find(|m| !(**m > 0.0 && **m <= 1.0)) {
            return Err(Error::Schedule(format!("mask ratio {m} outside (0, 1]")));
        }
        if mask_ratios.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Schedule(format!("mask ratios must be strictly decreasing, got {mask_ratios:?}")));
        }
        if sigma_schedule.is_empty() {
            return Err(Error::Schedule("sigma schedule needs at least one step".into()));
        }
        if let Some(s) = sigma_schedule.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Schedule(format!("step size {s} must be finite and > 0")));
        }
        Ok(Self { thresholds, mask_ratios, sigma_schedule })
    }

    /// Like [`ThresholdSchedule::new`], additionally requiring the first mask
    /// ratio to stay below `1 − L_s/L_l`.
    pub fn with_latencies(
        thresholds: Vec<f64>,
        mask_ratios: Vec<f64>,
        sigma_schedule: Vec<f64>,
        large_latency: f64,
        small_latency: f64,
    ) -> Result<Self> {
        let s = Self::new(thresholds, mask_ratios, sigma_schedule)?;
        s.check_mask_bound(large_latency, small_latency)?;
        Ok(s)
    }

    pub fn check_mask_bound(&self, large_latency: f64, small_latency: f64) -> Result<()> {
        let bound = feasible_mask_bound(large_latency, small_latency).map_err(|e| Error::Schedule(e.to_string()))?;
        match self.mask_ratios.first() {
            Some(&m1) if m1 >= bound => {
                Err(Error::Schedule(format!("first mask ratio {m1} must be below 1 - L_s/L_l = {bound:.6}")))
            }
            _ => Ok(()),
        }
    }

    /// `σ_t = 1/T` for every step.
    pub fn uniform_sigma(steps: usize) -> Vec<f64> {
        vec![1.0 / steps as f64; steps]
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn mask_ratios(&self) -> &[f64] {
        &self.mask_ratios
    }

    pub fn sigma_schedule(&self) -> &[f64] {
        &self.sigma_schedule
    }

    pub fn steps(&self) -> usize {
        self.sigma_schedule.len()
    }

    /// Number of masked stages, `n`.
    pub fn masked_stages(&self) -> usize {
        self.mask_ratios.len()
    }
}

/// Scheduling variants: the full method, the two ablations and the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Hybrid,
    StaticMask,
    FullLarge,
    PureLarge,
    PureSmall,
    NaiveSwitch,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Hybrid,
        Variant::StaticMask,
        Variant::FullLarge,
        Variant::PureLarge,
        Variant::PureSmall,
        Variant::NaiveSwitch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hybrid => "hybrid",
            Variant::StaticMask => "static-mask",
            Variant::FullLarge => "full-large",
            Variant::PureLarge => "pure-large",
            Variant::PureSmall => "pure-small",
            Variant::NaiveSwitch => "naive-switch",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            format!("unknown variant {s:?}, expected one of {}", names.join(", "))
        })
    }
}

/// Where per-step latencies in the trace come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatencyMode {
    WallClock,
    /// Each step is charged `L_l · M` for the large model and `L_s` for the small one.
    Simulated {
        large: f64,
        small: f64,
    },
}

/// One record per denoising step. Latencies are in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    /// Stage the step was computed in.
    pub stage: usize,
    pub d_t: f64,
    /// Configured ratio of the mask used this step, 0 when no mask was used.
    pub mask_ratio: f64,
    pub wall_time_large: f64,
    pub wall_time_small: f64,
    /// Oldest cached K/V row (in steps) the large model attended to this step.
    pub cache_staleness_max: usize,
}

#[derive(Debug, Clone)]
pub struct DiffMetric {
    pub d_t: f64,
    pub per_token: Vec<f64>,
    /// Tokens whose previous-latent L1 norm fell below [`DIFF_EPS`].
    pub degenerate_tokens: usize,
}

/// Per-token `‖prev_i − curr_i‖₁ / max(‖prev_i‖₁, ε)` and its mean over tokens.
pub fn diff_metric(prev: &Grid2D, curr: &Grid2D) -> Result<DiffMetric> {
    if prev.shape() != curr.shape() {
        return shape_err("diff_metric", format!("{:?} vs {:?}", prev.shape(), curr.shape()));
    }
    let mut degenerate_tokens = 0;
    let per_token: Vec<f64> = (0..prev.rows())
        .map(|i| {
            let (p, c) = (prev.row(i), curr.row(i));
            let num: f64 = p.iter().zip(c).map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs()).sum();
            let mut den: f64 = p.iter().map(|&a| f64::from(a).abs()).sum();
            if den < DIFF_EPS {
                degenerate_tokens += 1;
                den = DIFF_EPS;
            }
            num / den
        })
        .collect();
    let d_t = per_token.iter().sum::<f64>() / per_token.len() as f64;
    Ok(DiffMetric { d_t, per_token, degenerate_tokens })
}

/// `latent − σ · noise`, advancing the step index.
pub fn update_latent(latent: &LatentGrid, noise: &Grid2D, sigma: f64) -> Result<LatentGrid> {
    if latent.data.shape() != noise.shape() {
        return shape_err("update_latent", format!("latent {:?} vs noise {:?}", latent.data.shape(), noise.shape()));
    }
    let s = sigma as f32;
    let data: Vec<f32> = latent.data.data().iter().zip(noise.data()).map(|(&x, &n)| x - s * n).collect();
    Ok(LatentGrid {
        side: latent.side,
        channels: latent.channels,
        data: Grid2D::new(noise.rows(), noise.cols(), data)?,
        step: latent.step + 1,
    })
}

/// Small-model noise with the masked rows replaced by the large model's rows.
pub fn combine_noise(noise_small: &Grid2D, noise_large_masked: &Grid2D, mask: &Mask) -> Result<Grid2D> {
    if noise_large_masked.rows() != mask.len() {
        return shape_err(
            "combine_noise",
            format!("{} large rows for a mask of {}", noise_large_masked.rows(), mask.len()),
        );
    }
    let mut out = noise_small.clone();
    out.scatter_rows(mask.indices(), noise_large_masked)?;
    Ok(out)
}

/// Scheduler state for one run.
#[derive(Debug, Clone)]
pub struct StitchState {
    pub stage: usize,
    pub current_mask: Option<Mask>,
    pub prev_latent: LatentGrid,
    pub prev_kv: Option<Vec<LayerKV>>,
    /// `(step, D_t, stage)` for every completed step.
    pub diff_history: Vec<(usize, f64, usize)>,
    thresholds: Vec<f64>,
    mask_ratios: Vec<f64>,
    last_refresh: Vec<usize>,
}

impl StitchState {
    /// Fresh state for `variant`. NaiveSwitch runs a ladder with no masked
    /// stages on `thresholds[0]`; PureSmall starts in that ladder's final
    /// stage; PureLarge never advances.
    pub fn new(schedule: &ThresholdSchedule, variant: Variant, latent: LatentGrid) -> Self {
        let (stage, thresholds, mask_ratios) = match variant {
            Variant::Hybrid | Variant::StaticMask | Variant::FullLarge => {
                (0, schedule.thresholds.clone(), schedule.mask_ratios.clone())
            }
            Variant::PureLarge => (0, Vec::new(), schedule.mask_ratios.clone()),
            Variant::NaiveSwitch => (0, vec![schedule.thresholds[0]], Vec::new()),
            Variant::PureSmall => (1, Vec::new(), Vec::new()),
        };
        let tokens = latent.tokens();
        Self {
            stage,
            current_mask: None,
            prev_latent: latent,
            prev_kv: None,
            diff_history: Vec::new(),
            thresholds,
            mask_ratios,
            last_refresh: vec![0; tokens],
        }
    }

    pub fn final_stage(&self) -> usize {
        self.mask_ratios.len() + 1
    }

    pub fn in_masked_stage(&self) -> bool {
        self.stage >= 1 && self.stage <= self.mask_ratios.len()
    }

    pub fn stage_ratio(&self) -> Option<f64> {
        self.in_masked_stage().then(|| self.mask_ratios[self.stage - 1])
    }

    /// Advances one stage iff `d_t < thresholds[stage]`. Entering a masked
    /// stage builds its mask from `per_token_diff`; entering the final stage
    /// drops the mask and the large model's cache.
    pub fn maybe_advance_stage(&mut self, d_t: f64, per_token_diff: &[f64]) -> Result<bool> {
        let Some(&threshold) = self.thresholds.get(self.stage) else {
            return Ok(false);
        };
        // NaN never triggers a transition
        let below = d_t < threshold;
        if !below {
            return Ok(false);
        }
        self.stage += 1;
        match self.stage_ratio() {
            Some(ratio) => self.current_mask = Some(update_mask(per_token_diff, ratio)?),
            None => {
                self.current_mask = None;
                self.prev_kv = None;
            }
        }
        Ok(true)
    }
}

/// Output of [`run_generation`].
#[derive(Debug, Clone)]
pub struct Generation {
    pub variant: Variant,
    pub final_latent: LatentGrid,
    pub traces: Vec<StepTrace>,
    pub degenerate_tokens: usize,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Runs `schedule.steps()` denoising steps from the noise drawn with `noise_seed`.
pub fn run_generation(
    large: &Denoiser,
    small: &Denoiser,
    schedule: &ThresholdSchedule,
    noise_seed: u64,
    variant: Variant,
    latency: LatencyMode,
) -> Result<Generation> {
    let (lc, sc) = (large.config(), small.config());
    if lc.tokens != sc.tokens || lc.channels != sc.channels {
        return shape_err(
            "run_generation",
            format!(
                "large model is {}x{}, small model is {}x{} (tokens x channels)",
                lc.tokens, lc.channels, sc.tokens, sc.channels
            ),
        );
    }
    let side = lc.side();
    let mut latent = LatentGrid::noise(side, lc.channels, noise_seed);
    let mut state = StitchState::new(schedule, variant, latent.clone());
    let mut traces = Vec::with_capacity(schedule.steps());
    let mut degenerate_tokens = 0;

    for (t, &sigma) in schedule.sigma_schedule.iter().enumerate() {
        let stage = state.stage;
        let mut staleness = 0;
        let mut mask_ratio = 0.0;
        let (noise, mut wall_large, mut wall_small);

        if stage == 0 {
            let ((n, kv), w) = timed(|| large.forward_full(&latent.data, t))?;
            state.prev_kv = Some(kv);
            state.last_refresh.fill(t);
            (noise, wall_large, wall_small) = (n, w, 0.0);
        } else if let Some(mask) = state.current_mask.clone() {
            mask_ratio = mask.ratio();
            let noise_large;
            if variant == Variant::FullLarge {
                let ((n, kv), w) = timed(|| large.forward_full(&latent.data, t))?;
                noise_large = n.gather_rows(mask.indices())?;
                state.prev_kv = Some(kv);
                state.last_refresh.fill(t);
                wall_large = w;
            } else {
                let cache = state.prev_kv.as_ref().expect("masked stage always follows stage 0");
                let rows = latent.data.gather_rows(mask.indices())?;
                let ((n, fresh), w) = timed(|| large.forward_masked(&rows, mask.indices(), cache, t))?;
                let mut in_mask = vec![false; latent.tokens()];
                for &i in mask.indices() {
                    in_mask[i] = true;
                }
                staleness =
                    (0..latent.tokens()).filter(|&i| !in_mask[i]).map(|i| t - state.last_refresh[i]).max().unwrap_or(0);
                state.prev_kv = Some(refresh_kv_cache(cache, &fresh, mask.indices())?);
                for &i in mask.indices() {
                    state.last_refresh[i] = t;
                }
                noise_large = n;
                wall_large = w;
            }
            let (ns, w) = timed(|| small.forward_full(&latent.data, t).map(|(n, _)| n))?;
            wall_small = w;
            noise = combine_noise(&ns, &noise_large, &mask)?;
        } else {
            let (ns, w) = timed(|| small.forward_full(&latent.data, t).map(|(n, _)| n))?;
            (noise, wall_large, wall_small) = (ns, 0.0, w);
        }

        if let LatencyMode::Simulated { large: l_l, small: l_s } = latency {
            let large_share = match (stage, variant) {
                (0, _) => 1.0,
                (_, Variant::FullLarge) if mask_ratio > 0.0 => 1.0,
                _ => mask_ratio,
            };
            wall_large = l_l * large_share;
            wall_small = if stage == 0 { 0.0 } else { l_s };
        }

        let next = update_latent(&latent, &noise, sigma)?;
        if !next.data.is_finite() {
            return Err(Error::NonFinite { step: t });
        }
        let diff = diff_metric(&latent.data, &next.data)?;
        degenerate_tokens += diff.degenerate_tokens;
        traces.push(StepTrace {
            step: t,
            stage,
            d_t: diff.d_t,
            mask_ratio,
            wall_time_large: wall_large,
            wall_time_small: wall_small,
            cache_staleness_max: staleness,
        });
        state.diff_history.push((t, diff.d_t, stage));

        let advanced = state.maybe_advance_stage(diff.d_t, &diff.per_token)?;
        let refreshes_mask = matches!(variant, Variant::Hybrid | Variant::FullLarge);
        if !advanced && refreshes_mask {
            if let Some(ratio) = state.stage_ratio() {
                state.current_mask = Some(update_mask(&diff.per_token, ratio)?);
            }
        }
        state.prev_latent = next.clone();
        latent = next;
    }

    Ok(Generation { variant, final_latent: latent, traces, degenerate_tokens })
}

/// Step index at which each stage `1, 2, …` was first used, for every stage the run reached.
pub fn switch_steps(traces: &[StepTrace]) -> Vec<usize> {
    let mut out = Vec::new();
    for tr in traces {
        while out.len() < tr.stage {
            out.push(tr.step);
        }
    }
    out
}

/// Formats like C's `%.6g`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = format!("{x:.5e}");
    let (mantissa, e) = exp.split_once('e').expect("exponent form");
    let e: i32 = e.parse().expect("integer exponent");
    if !(-4..6).contains(&e) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{m}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs());
    }
    let decimals = (5 - e).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub const TRACE_HEADER: &str = "step,stage,d_t,mask_ratio,wall_ms_large,wall_ms_small,cache_staleness_max";

pub fn write_trace_csv(mut w: impl Write, traces: &[StepTrace]) -> Result<()> {
    let mut out = String::with_capacity(64 * (traces.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for t in traces {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.step,
            t.stage,
            sig6(t.d_t),
            sig6(t.mask_ratio),
            sig6(t.wall_time_large * 1e3),
            sig6(t.wall_time_small * 1e3),
            t.cache_staleness_max
        ));
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}
