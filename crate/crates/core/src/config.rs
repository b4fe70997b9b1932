//! Run configuration: a JSON object, unknown keys rejected.
//!
//! Infinite thresholds are written as the strings `"inf"` / `"-inf"` since
//! JSON has no infinity literal.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::stitcher::{ThresholdSchedule, Variant};
use crate::tinydit::DenoiserConfig;

fn default_workers() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "StudyConfig::default_seeds")]
    pub seeds: Vec<u64>,
    /// Step indices at which the divergence study records histograms.
    #[serde(default)]
    pub probe_steps: Vec<usize>,
    #[serde(default = "StudyConfig::default_bins")]
    pub bins: usize,
    #[serde(default = "StudyConfig::default_cutoff")]
    pub near_zero_cutoff: f64,
    #[serde(default = "StudyConfig::default_ratios")]
    pub mask_latency_ratios: Vec<f64>,
    #[serde(default = "StudyConfig::default_runs")]
    pub mask_latency_runs: usize,
    #[serde(default = "StudyConfig::default_variants")]
    pub switch_variants: Vec<Variant>,
}

impl StudyConfig {
    fn default_seeds() -> Vec<u64> {
        (0..8).collect()
    }
    fn default_bins() -> usize {
        20
    }
    fn default_cutoff() -> f64 {
        crate::analysis::NEAR_ZERO_CUTOFF
    }
    fn default_ratios() -> Vec<f64> {
        vec![0.1, 0.2, 0.3, 0.4]
    }
    fn default_runs() -> usize {
        50
    }
    fn default_variants() -> Vec<Variant> {
        vec![Variant::Hybrid, Variant::NaiveSwitch]
    }
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: Self::default_seeds(),
            probe_steps: Vec::new(),
            bins: Self::default_bins(),
            near_zero_cutoff: Self::default_cutoff(),
            mask_latency_ratios: Self::default_ratios(),
            mask_latency_runs: Self::default_runs(),
            switch_variants: Self::default_variants(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub large: DenoiserConfig,
    pub small: DenoiserConfig,
    pub steps: usize,
    #[serde(serialize_with = "ser_thresholds", deserialize_with = "de_thresholds")]
    pub thresholds: Vec<f64>,
    pub mask_ratios: Vec<f64>,
    /// Per-step Euler step sizes; `1/steps` each when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_schedule: Option<Vec<f64>>,
    pub variant: Variant,
    pub noise_seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub simulated_latency: bool,
    /// Seconds per step charged to the large model in simulated mode.
    #[serde(default)]
    pub sim_large_latency: f64,
    #[serde(default)]
    pub sim_small_latency: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub study: StudyConfig,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Threshold {
    Num(f64),
    Text(String),
}

fn de_thresholds<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let raw = Vec::<Threshold>::deserialize(d)?;
    raw.into_iter()
        .map(|t| match t {
            Threshold::Num(v) => Ok(v),
            Threshold::Text(s) => match s.as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("threshold {other:?} is not a number or \"inf\""))),
            },
        })
        .collect()
}

fn ser_thresholds<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for &x in v {
        if x == f64::INFINITY {
            seq.serialize_element("inf")?;
        } else if x == f64::NEG_INFINITY {
            seq.serialize_element("-inf")?;
        } else {
            seq.serialize_element(&x)?;
        }
    }
    seq.end()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn schedule(&self) -> Result<ThresholdSchedule> {
        let sigma = self.sigma_schedule.clone().unwrap_or_else(|| ThresholdSchedule::uniform_sigma(self.steps));
        let s = ThresholdSchedule::new(self.thresholds.clone(), self.mask_ratios.clone(), sigma)?;
        if self.simulated_latency {
            s.check_mask_bound(self.sim_large_latency, self.sim_small_latency)?;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::Config(m));
        for (name, c) in [("large", &self.large), ("small", &self.small)] {
            c.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.large.tokens != self.small.tokens || self.large.channels != self.small.channels {
            return invalid("large and small models must share tokens and channels".into());
        }
        if self.steps == 0 {
            return invalid("steps must be at least 1".into());
        }
        if let Some(s) = &self.sigma_schedule {
            if s.len() != self.steps {
                return invalid(format!("sigma_schedule has {} entries for {} steps", s.len(), self.steps));
            }
        }
        if self.noise_seeds.is_empty() {
            return invalid("noise_seeds must not be empty".into());
        }
        if self.workers == 0 {
            return invalid("workers must be at least 1".into());
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        let st = &self.study;
        if st.probe_steps.iter().any(|&p| p >= self.steps) {
            return invalid(format!("study.probe_steps {:?} must be below steps = {}", st.probe_steps, self.steps));
        }
        if st.mask_latency_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return invalid("study.mask_latency_ratios must lie in (0, 1]".into());
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_json(&std::fs::read_to_string(path)?)
}
