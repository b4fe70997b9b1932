//! Analytical latency model for hybrid large/small denoising.
//!
//! With per-step latencies `L_l > L_s`, `T` steps, switch steps
//! `T_1 < … < T_{n+1}` and mask ratios `M_1 > … > M_n` (and `T_0 = 0`,
//! `M_0 = 1`):
//!
//! ```text
//! large  = Σ_{i=1}^{n+1} (T_i − T_{i−1}) · L_l · M_{i−1}
//! small  = L_s · (T − T_1)
//! saving = L_l · T − (large + small)
//! ```
//!
//! A masked step beats a pure large step iff `L_l · M + L_s < L_l`, i.e.
//! `M < 1 − L_s / L_l`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::stitcher::{sig6, switch_steps, StepTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct CostModelParams {
    pub large_latency: f64,
    pub small_latency: f64,
    pub steps: usize,
    /// `T_1 … T_{n+1}`.
    pub switch_steps: Vec<usize>,
    /// `M_1 … M_n`.
    pub mask_ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub hybrid_large: f64,
    pub hybrid_small: f64,
    pub total: f64,
    pub savings: f64,
    pub speedup_vs_large: f64,
}

/// Largest first mask ratio that still saves time per step: `1 − L_s/L_l`.
pub fn feasible_mask_bound(large_latency: f64, small_latency: f64) -> Result<f64> {
    if !(small_latency > 0.0 && small_latency < large_latency && large_latency.is_finite()) {
        return Err(Error::CostModel(format!("need 0 < L_s < L_l, got L_s = {small_latency}, L_l = {large_latency}")));
    }
    Ok(1.0 - small_latency / large_latency)
}

impl CostModelParams {
    pub fn new(
        large_latency: f64,
        small_latency: f64,
        steps: usize,
        switch_steps: Vec<usize>,
        mask_ratios: Vec<f64>,
    ) -> Result<Self> {
        let p = Self { large_latency, small_latency, steps, switch_steps, mask_ratios };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::CostModel(msg));
        let bound = feasible_mask_bound(self.large_latency, self.small_latency)?;
        if self.switch_steps.len() != self.mask_ratios.len() + 1 {
            return bad(format!(
                "{} switch steps for {} mask ratios; need exactly one more switch step than ratios",
                self.switch_steps.len(),
                self.mask_ratios.len()
            ));
        }
        if self.switch_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("switch steps must be strictly increasing, got {:?}", self.switch_steps));
        }
        if let Some(&last) = self.switch_steps.last() {
            if last > self.steps {
                return bad(format!("switch step {last} exceeds T = {}", self.steps));
            }
        }
        if let Some(m) = self.mask_ratios.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
            return bad(format!("mask ratio {m} outside (0, 1)"));
        }
        if self.mask_ratios.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!("mask ratios must be strictly decreasing, got {:?}", self.mask_ratios));
        }
        if let Some(&m1) = self.mask_ratios.first() {
            if m1 >= bound {
                return bad(format!("M_1 = {m1} violates M_1 < 1 - L_s/L_l = {bound:.6}"));
            }
        }
        Ok(())
    }

    /// Switch steps and mask ratios observed in a trace. Stages the run never
    /// reached are dropped, and the last reached ladder rung closes at `T`.
    pub fn from_trace(traces: &[StepTrace], large_latency: f64, small_latency: f64) -> Result<Self> {
        let (switch_steps, mask_ratios) = observed_structure(traces)?;
        Self::new(large_latency, small_latency, traces.len(), switch_steps, mask_ratios)
    }

    /// `M_{i}` with `M_0 = 1`.
    fn ratio(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.mask_ratios[i - 1]
        }
    }

    /// `T_i` with `T_0 = 0`.
    fn switch(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.switch_steps[i - 1]
        }
    }

    /// Predicted time spent in each stage `0..=n+1`.
    pub fn stage_costs(&self) -> Vec<f64> {
        let n = self.mask_ratios.len();
        let mut out = Vec::with_capacity(n + 2);
        for i in 0..=n {
            let span = (self.switch(i + 1) - self.switch(i)) as f64;
            let small = if i == 0 { 0.0 } else { self.small_latency };
            out.push(span * (self.large_latency * self.ratio(i) + small));
        }
        out.push((self.steps - self.switch(n + 1)) as f64 * self.small_latency);
        out
    }
}

/// `(T_1 … T_{k+1}, M_1 … M_k)` as executed in `traces`.
pub fn observed_structure(traces: &[StepTrace]) -> Result<(Vec<usize>, Vec<f64>)> {
    if traces.is_empty() {
        return Err(Error::TraceMismatch("empty trace".into()));
    }
    for (i, t) in traces.iter().enumerate() {
        if t.step != i {
            return Err(Error::TraceMismatch(format!("record {i} has step {}", t.step)));
        }
    }
    let mut switches = switch_steps(traces);
    let max_stage = switches.len();
    let mut ratios = Vec::new();
    for stage in 1..max_stage {
        let r = traces.iter().find(|t| t.stage == stage).map(|t| t.mask_ratio);
        match r {
            Some(r) if r > 0.0 => ratios.push(r),
            _ => {
                return Err(Error::TraceMismatch(format!("stage {stage} has no recorded mask ratio")));
            }
        }
    }
    if max_stage == 0 {
        // never left stage 0: one rung closing at T
        switches.push(traces.len());
    } else if traces.last().is_some_and(|t| t.mask_ratio > 0.0) {
        // ended inside a masked stage: its rung closes at T
        let last = traces.last().unwrap();
        ratios.push(last.mask_ratio);
        switches.push(traces.len());
    }
    Ok((switches, ratios))
}

pub fn predict(params: &CostModelParams) -> Result<CostBreakdown> {
    params.validate()?;
    let n = params.mask_ratios.len();
    let hybrid_large: f64 = (1..=n + 1)
        .map(|i| (params.switch(i) - params.switch(i - 1)) as f64 * params.large_latency * params.ratio(i - 1))
        .sum();
    let hybrid_small = params.small_latency * (params.steps - params.switch(1)) as f64;
    let total = hybrid_large + hybrid_small;
    let pure_large = params.large_latency * params.steps as f64;
    Ok(CostBreakdown {
        hybrid_large,
        hybrid_small,
        total,
        savings: pure_large - total,
        speedup_vs_large: pure_large / total,
    })
}

/// Measured vs predicted latency for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub params: CostModelParams,
    pub measured_total: f64,
    pub predicted_total: f64,
    pub relative_error: f64,
    pub stage_measured: Vec<f64>,
    pub stage_predicted: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

fn rel_err(measured: f64, predicted: f64) -> f64 {
    if predicted == 0.0 {
        if measured == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (measured - predicted).abs() / predicted.abs()
    }
}

impl ValidationReport {
    pub fn stage_relative_errors(&self) -> Vec<f64> {
        self.stage_measured.iter().zip(&self.stage_predicted).map(|(&m, &p)| rel_err(m, p)).collect()
    }

    /// One `metric=value` per line.
    pub fn to_kv_text(&self) -> String {
        let p = &self.params;
        let list = |v: Vec<String>| v.join(",");
        let mut s = String::new();
        let _ = writeln!(s, "large_latency_s={}", sig6(p.large_latency));
        let _ = writeln!(s, "small_latency_s={}", sig6(p.small_latency));
        let _ = writeln!(s, "steps={}", p.steps);
        let _ = writeln!(s, "switch_steps={}", list(p.switch_steps.iter().map(|x| x.to_string()).collect()));
        let _ = writeln!(s, "mask_ratios={}", list(p.mask_ratios.iter().map(|&x| sig6(x)).collect()));
        let _ = writeln!(s, "measured_total_s={}", sig6(self.measured_total));
        let _ = writeln!(s, "predicted_total_s={}", sig6(self.predicted_total));
        let _ = writeln!(s, "relative_error={:e}", self.relative_error);
        for (i, ((m, pr), e)) in
            self.stage_measured.iter().zip(&self.stage_predicted).zip(self.stage_relative_errors()).enumerate()
        {
            let _ = writeln!(s, "stage{i}_measured_s={}", sig6(*m));
            let _ = writeln!(s, "stage{i}_predicted_s={}", sig6(*pr));
            let _ = writeln!(s, "stage{i}_relative_error={e:e}");
        }
        let _ = writeln!(s, "tolerance={}", sig6(self.tolerance));
        let _ = writeln!(s, "pass={}", self.pass);
        s
    }
}

/// Compares a run's per-step latencies against [`predict`]. `params` must
/// describe the ladder the trace actually executed. Passes iff the total
/// relative error is within `tolerance`; per-stage errors are reported only.
pub fn validate_trace(traces: &[StepTrace], params: &CostModelParams, tolerance: f64) -> Result<ValidationReport> {
    params.validate()?;
    let (switches, ratios) = observed_structure(traces)?;
    if traces.len() != params.steps {
        return Err(Error::TraceMismatch(format!("{} records for T = {}", traces.len(), params.steps)));
    }
    if switches != params.switch_steps {
        return Err(Error::TraceMismatch(format!(
            "trace switches at {switches:?}, params say {:?}",
            params.switch_steps
        )));
    }
    if ratios.len() != params.mask_ratios.len()
        || ratios.iter().zip(&params.mask_ratios).any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::TraceMismatch(format!("trace mask ratios {ratios:?}, params say {:?}", params.mask_ratios)));
    }

    let n = params.mask_ratios.len();
    let mut stage_measured = vec![0.0; n + 2];
    for (i, t) in traces.iter().enumerate() {
        // stage index in the reduced ladder: rungs passed by step i
        let stage = params.switch_steps.iter().filter(|&&s| s <= i).count();
        stage_measured[stage] += t.wall_time_large + t.wall_time_small;
    }
    let stage_predicted = params.stage_costs();
    let measured_total: f64 = stage_measured.iter().sum();
    let predicted_total = predict(params)?.total;
    let relative_error = rel_err(measured_total, predicted_total);
    Ok(ValidationReport {
        params: params.clone(),
        measured_total,
        predicted_total,
        relative_error,
        stage_measured,
        stage_predicted,
        tolerance,
        pass: relative_error <= tolerance,
    })
}
