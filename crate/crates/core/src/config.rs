//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamgr::DataConfig;
use crate::error::{ConfigError, SimError};
use crate::memory::MemoryConfig;
use crate::power::{PowerConfig, PowerTrace};
use crate::recovery::RecoveryCosts;
use crate::sim::{parse_crash_schedule, CrashPoint, Micros, DEFAULT_TICK_US};
use crate::workload::{builtin_workloads, load_workload_file, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Ours,
    Sys,
    Log,
    NaiveRerun,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Ours, Scheme::Sys, Scheme::Log, Scheme::NaiveRerun];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ours => "ours",
            Scheme::Sys => "sys",
            Scheme::Log => "log",
            Scheme::NaiveRerun => "naive_rerun",
        }
    }

    pub fn checkpoints(self) -> bool {
        matches!(self, Scheme::Sys | Scheme::Log)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ours" => Ok(Scheme::Ours),
            "sys" => Ok(Scheme::Sys),
            "log" => Ok(Scheme::Log),
            "naive" | "naive_rerun" => Ok(Scheme::NaiveRerun),
            other => Err(ConfigError::Invalid(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointConfig {
    pub period_ms: u64,
    /// Defaults: 7.5 ms for SYS, 3.2 ms for LOG.
    pub suspension_cost_ms: Option<f64>,
    /// Defaults: 7.6 ms for SYS, 7 ms for LOG.
    pub recovery_cost_ms: Option<f64>,
    /// Scale LOG recovery with the number of log records instead.
    pub proportional_recovery: bool,
    pub recovery_base_us: Micros,
    pub recovery_per_record_us: Micros,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            period_ms: 20,
            suspension_cost_ms: None,
            recovery_cost_ms: None,
            proportional_recovery: false,
            recovery_base_us: 500,
            recovery_per_record_us: 50,
        }
    }
}

fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round() as Micros
}

impl CheckpointConfig {
    pub fn period_us(&self) -> Micros {
        self.period_ms * 1000
    }

    pub fn suspension_us(&self, scheme: Scheme) -> Micros {
        let default = match scheme {
            Scheme::Sys => 7.5,
            Scheme::Log => 3.2,
            _ => 0.0,
        };
        ms_to_us(self.suspension_cost_ms.unwrap_or(default))
    }

    pub fn recovery_us(&self, scheme: Scheme) -> Micros {
        let default = match scheme {
            Scheme::Sys => 7.6,
            Scheme::Log => 7.0,
            _ => 0.0,
        };
        ms_to_us(self.recovery_cost_ms.unwrap_or(default))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub tick_us: Micros,
    pub stack_size: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            tick_us: DEFAULT_TICK_US,
            stack_size: 256,
        }
    }
}

/// Device power outside workload execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrawConfig {
    pub idle_w: f64,
    /// Draw while recovering or checkpointing.
    pub system_w: f64,
}

impl Default for DrawConfig {
    fn default() -> Self {
        Self {
            idle_w: 0.0,
            system_w: 4.0e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    /// Builtin trace name or a trace file path.
    pub trace: String,
    pub duration_ms: u64,
    pub seed: u64,
    /// Subset of builtin workloads by name; empty means all five.
    pub workloads: Vec<String>,
    pub workload_file: Option<PathBuf>,
    pub crash_schedule: Option<PathBuf>,
    /// Workloads longer than this (VM time) count as the lengthy class.
    pub lengthy_class_ms: u64,
    /// Starting capacitor voltage; drawn from the seed when absent.
    pub initial_voltage: Option<f64>,
    pub power: PowerConfig,
    pub memory: MemoryConfig,
    pub data: DataConfig,
    pub kernel: KernelConfig,
    pub recovery: RecoveryCosts,
    pub checkpoint: CheckpointConfig,
    pub draw: DrawConfig,

    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
    #[serde(skip)]
    pub workload_override: Option<Vec<Workload>>,
    #[serde(skip)]
    pub trace_override: Option<PowerTrace>,
    #[serde(skip)]
    pub crash_points: Vec<CrashPoint>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Ours,
            trace: "strong".into(),
            duration_ms: 100_000,
            seed: 1,
            workloads: Vec::new(),
            workload_file: None,
            crash_schedule: None,
            lengthy_class_ms: 50,
            initial_voltage: None,
            power: PowerConfig::default(),
            memory: MemoryConfig::default(),
            data: DataConfig::default(),
            kernel: KernelConfig::default(),
            recovery: RecoveryCosts::default(),
            checkpoint: CheckpointConfig::default(),
            draw: DrawConfig::default(),
            base_dir: None,
            workload_override: None,
            trace_override: None,
            crash_points: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn power_trace(&self) -> Result<PowerTrace, SimError> {
        if let Some(t) = &self.trace_override {
            return Ok(t.clone());
        }
        if let Some(t) = PowerTrace::builtin(&self.trace) {
            return Ok(t);
        }
        let path = self.resolve(Path::new(&self.trace));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            ConfigError::Invalid(format!("trace `{}` is neither builtin nor readable: {e}", self.trace))
        })?;
        Ok(PowerTrace::parse(&self.trace, &text)?)
    }

    pub fn workload_set(&self) -> Result<Vec<Workload>, SimError> {
        if let Some(w) = &self.workload_override {
            return Ok(w.clone());
        }
        if let Some(f) = &self.workload_file {
            return load_workload_file(&self.resolve(f));
        }
        let all = builtin_workloads();
        if self.workloads.is_empty() {
            return Ok(all);
        }
        self.workloads
            .iter()
            .map(|n| {
                all.iter()
                    .find(|w| w.name.eq_ignore_ascii_case(n))
                    .cloned()
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown workload `{n}`")).into())
            })
            .collect()
    }

    pub fn crash_schedule_points(&self) -> Result<Vec<CrashPoint>, SimError> {
        let mut pts = self.crash_points.clone();
        if let Some(f) = &self.crash_schedule {
            let text = std::fs::read_to_string(self.resolve(f))?;
            pts.extend(parse_crash_schedule(&text)?);
        }
        Ok(pts)
    }

    /// Checks everything and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs: Vec<String> = Vec::new();
        if let Err(e) = self.power.validate() {
            match e {
                ConfigError::Many(v) => errs.extend(v),
                other => errs.push(other.to_string()),
            }
        }
        if self.kernel.tick_us == 0 {
            errs.push("kernel.tick_us must be positive".into());
        }
        if self.scheme.checkpoints() && self.checkpoint.period_ms == 0 {
            errs.push("checkpoint.period_ms must be positive".into());
        }
        for (k, v) in [
            ("checkpoint.suspension_cost_ms", self.checkpoint.suspension_cost_ms),
            ("checkpoint.recovery_cost_ms", self.checkpoint.recovery_cost_ms),
        ] {
            if v.is_some_and(|x| x.is_nan() || x < 0.0) {
                errs.push(format!("{k} must be non-negative"));
            }
        }
        if self.data.object_count as usize > self.data.map_width {
            errs.push(
                ConfigError::TooManyObjects {
                    count: self.data.object_count as usize,
                    width: self.data.map_width,
                }
                .to_string(),
            );
        }
        for o in 0..self.data.object_count {
            if let Err(e) = self.data.initial_value(o) {
                errs.push(e.to_string());
            }
        }
        if let Some(v) = self.initial_voltage {
            if v.is_nan() || v < 0.0 {
                errs.push("initial_voltage must be non-negative".into());
            }
        }
        if self.draw.idle_w < 0.0 || self.draw.system_w < 0.0 {
            errs.push("draw figures must be non-negative".into());
        }
        match self.power_trace() {
            Ok(_) => {}
            Err(e) => errs.push(e.to_string()),
        }
        match self.workload_set() {
            Ok(ws) => {
                if ws.is_empty() {
                    errs.push("no workloads selected".into());
                }
                for w in &ws {
                    if let Err(e) = w.validate() {
                        errs.push(e.to_string());
                    }
                    if let Some(o) = w.objects().find(|o| *o >= self.data.object_count) {
                        errs.push(format!("workload {} touches unregistered object {o}", w.name));
                    }
                }
            }
            Err(e) => errs.push(e.to_string()),
        }
        if let Err(e) = self.crash_schedule_points() {
            errs.push(e.to_string());
        }
        match errs.len() {
            0 => Ok(()),
            1 => Err(ConfigError::Invalid(errs.remove(0))),
            _ => Err(ConfigError::Many(errs)),
        }
    }
}
