//! Energy-harvesting power supply: a storage capacitor charged by a harvest
//! trace, an on/off hysteresis switch, and a low-voltage interrupt.
//!
//! Net power is piecewise constant between trace boundaries, so capacitor
//! energy is integrated in closed form. Threshold crossings are reported at
//! the first whole microsecond at or past the crossing.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::sim::Micros;

/// Energy stored in a capacitor, `C·V²/2`.
pub fn capacitor_energy(capacitance_f: f64, volts: f64) -> Result<f64, ConfigError> {
    if capacitance_f.is_nan() || capacitance_f <= 0.0 {
        return Err(ConfigError::Invalid(format!(
            "capacitance must be positive, got {capacitance_f}"
        )));
    }
    if volts < 0.0 {
        return Err(ConfigError::Invalid(format!("negative voltage {volts}")));
    }
    Ok(0.5 * capacitance_f * volts * volts)
}

fn voltage_of(capacitance_f: f64, energy_j: f64) -> f64 {
    (2.0 * energy_j.max(0.0) / capacitance_f).sqrt()
}

/// Smallest voltage at which the capacitor still holds enough energy above
/// `v_op` to run at `p_max_w` for one context-switch period `t_cs_s`.
pub fn low_voltage_threshold(p_max_w: f64, t_cs_s: f64, capacitance_f: f64, v_op: f64) -> f64 {
    (2.0 * p_max_w * t_cs_s / capacitance_f + v_op * v_op).sqrt()
}

/// Rounds `v` up to a multiple of `granularity`.
pub fn round_up_volts(v: f64, granularity: f64) -> f64 {
    if granularity <= 0.0 {
        return v;
    }
    // guard against 2.42 / 0.01 landing on 241.99999
    let steps = (v / granularity - 1e-9).ceil();
    steps * granularity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConfig {
    pub capacitance_f: f64,
    pub v_on: f64,
    pub v_off: f64,
    pub v_op: f64,
    pub v_th: f64,
    pub v_max: f64,
    pub efficiency: f64,
}

/// Peak device draw used to size the low-voltage threshold.
pub const PLATFORM_PEAK_DRAW_W: f64 = 5.25e-3;

impl Default for PowerConfig {
    fn default() -> Self {
        let capacitance_f = 200e-6;
        let v_op = 2.4;
        let v_th = round_up_volts(
            low_voltage_threshold(PLATFORM_PEAK_DRAW_W, 1e-3, capacitance_f, v_op),
            0.01,
        );
        Self {
            capacitance_f,
            v_on: 2.8,
            v_off: 2.4,
            v_op,
            v_th,
            v_max: 3.3,
            efficiency: 1.0,
        }
    }
}

impl PowerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.capacitance_f.is_nan() || self.capacitance_f <= 0.0 {
            errs.push("capacitance must be positive".to_string());
        }
        if !(self.v_off <= self.v_th && self.v_th < self.v_on) {
            errs.push(format!(
                "need v_off <= v_th < v_on, got {} / {} / {}",
                self.v_off, self.v_th, self.v_on
            ));
        }
        if self.v_max < self.v_on {
            errs.push("v_max must be at least v_on".into());
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            errs.push("efficiency must lie in (0, 1]".into());
        }
        match errs.len() {
            0 => Ok(()),
            1 => Err(ConfigError::Invalid(errs.remove(0))),
            _ => Err(ConfigError::Many(errs)),
        }
    }

    fn energy(&self, v: f64) -> f64 {
        0.5 * self.capacitance_f * v * v
    }

    /// Energy released between the switch-on and switch-off voltages.
    pub fn usable_energy(&self) -> f64 {
        self.energy(self.v_on) - self.energy(self.v_off)
    }
}

/// Piecewise-constant harvested power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    pub name: String,
    /// `(duration_us, harvest_power_w)` pairs in order.
    pub segments: Vec<(Micros, f64)>,
}

pub const BUILTIN_TRACES: [(&str, f64, &str); 3] = [
    ("strong", 3.0e-3, "3 mW for 100 s"),
    ("weak", 1.5e-3, "1.5 mW for 100 s"),
    ("stable", 10.0e-3, "10 mW for 100 s (never browns out under the builtin workloads)"),
];

impl PowerTrace {
    pub fn constant(name: &str, duration_us: Micros, harvest_w: f64) -> Self {
        Self {
            name: name.to_string(),
            segments: vec![(duration_us, harvest_w)],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_TRACES
            .iter()
            .find(|(n, _, _)| *n == name)
            .map(|(n, w, _)| Self::constant(n, 100_000_000, *w))
    }

    pub fn duration_us(&self) -> Micros {
        self.segments.iter().map(|(d, _)| d).sum()
    }

    /// Parses `duration_ms harvest_mw` lines.
    pub fn parse(name: &str, text: &str) -> Result<Self, ConfigError> {
        let mut segments = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| ConfigError::Parse {
                line: idx + 1,
                msg: msg.to_string(),
            };
            let nums: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err("expected `duration_ms harvest_mw`"))?;
            let [ms, mw] = nums[..] else {
                return Err(err("expected `duration_ms harvest_mw`"));
            };
            if ms.is_nan() || mw.is_nan() || ms < 0.0 || mw < 0.0 {
                return Err(err("durations and harvest power must be non-negative"));
            }
            segments.push(((ms * 1000.0).round() as Micros, mw * 1e-3));
        }
        if segments.is_empty() {
            return Err(ConfigError::Parse {
                line: 0,
                msg: "power trace has no segments".into(),
            });
        }
        Ok(Self {
            name: name.to_string(),
            segments,
        })
    }

    pub fn to_text(&self) -> String {
        self.segments
            .iter()
            .map(|(us, w)| format!("{} {}\n", *us as f64 / 1000.0, w * 1e3))
            .collect()
    }

    /// Harvest at absolute time `t` and the time until it next changes.
    fn harvest_at(&self, t: Micros) -> (f64, Option<Micros>) {
        let mut start = 0;
        for &(d, w) in &self.segments {
            if t < start + d {
                return (w, Some(start + d - t));
            }
            start += d;
        }
        (0.0, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerEventKind {
    PowerOn,
    PowerOff,
    LowVoltage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PowerEvent {
    pub offset_us: Micros,
    pub kind: PowerEventKind,
}

/// Live state of the capacitor and the power switch.
#[derive(Debug, Clone)]
pub struct PowerState {
    cfg: PowerConfig,
    trace: PowerTrace,
    t_us: Micros,
    energy_j: f64,
    device_on: bool,
    lv_flag: bool,
    harvested_j: f64,
    consumed_j: f64,
    clamped_j: f64,
}

fn micros_to_reach(delta_j: f64, rate_w: f64) -> Micros {
    // first whole microsecond at which the crossing has happened
    let us = delta_j / rate_w * 1e6;
    if us <= 0.0 {
        0
    } else {
        us.ceil() as Micros
    }
}

impl PowerState {
    /// Starts with the device off at `initial_v`.
    pub fn new(cfg: PowerConfig, trace: PowerTrace, initial_v: f64) -> Self {
        let energy_j = cfg.energy(initial_v.max(0.0));
        Self {
            cfg,
            trace,
            t_us: 0,
            energy_j,
            device_on: false,
            lv_flag: false,
            harvested_j: 0.0,
            consumed_j: 0.0,
            clamped_j: 0.0,
        }
    }

    pub fn config(&self) -> &PowerConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &PowerTrace {
        &self.trace
    }

    pub fn v_now(&self) -> f64 {
        voltage_of(self.cfg.capacitance_f, self.energy_j)
    }

    pub fn energy_j(&self) -> f64 {
        self.energy_j
    }

    pub fn device_on(&self) -> bool {
        self.device_on
    }

    /// Whether the low-voltage interrupt already fired in this power-on period.
    pub fn lv_flag(&self) -> bool {
        self.lv_flag
    }

    /// Totals of harvested, consumed, and clamp-discarded energy so far.
    pub fn energy_totals(&self) -> (f64, f64, f64) {
        (self.harvested_j, self.consumed_j, self.clamped_j)
    }

    /// Allows the low-voltage interrupt to fire again in this power-on
    /// period.
    pub fn rearm_low_voltage(&mut self) {
        self.lv_flag = false;
    }

    /// Forces the device off (injected crash); the capacitor is drained to
    /// the switch-off level if it held more.
    pub fn force_off(&mut self) {
        self.device_on = false;
        self.lv_flag = false;
        let e_off = self.cfg.energy(self.cfg.v_off);
        if self.energy_j > e_off {
            self.consumed_j += self.energy_j - e_off;
            self.energy_j = e_off;
        }
    }

    /// Integrates `dt_us` of harvest minus `device_draw_w` (only while on)
    /// and reports threshold crossings with their offsets into the step.
    pub fn step_power(&mut self, dt_us: Micros, device_draw_w: f64) -> Vec<PowerEvent> {
        let mut events = Vec::new();
        let e_on = self.cfg.energy(self.cfg.v_on);
        let e_off = self.cfg.energy(self.cfg.v_off);
        let e_th = self.cfg.energy(self.cfg.v_th);
        let e_max = self.cfg.energy(self.cfg.v_max);
        let mut done: Micros = 0;
        while done < dt_us {
            let (harvest_raw, seg_left) = self.trace.harvest_at(self.t_us);
            let harvest = harvest_raw * self.cfg.efficiency;
            let mut span = dt_us - done;
            if let Some(left) = seg_left {
                span = span.min(left);
            }
            let draw = if self.device_on { device_draw_w } else { 0.0 };
            let net = harvest - draw;

            // The earliest state change inside this span, if any.
            let mut cut: Option<(Micros, PowerEventKind)> = None;
            if self.device_on && net < 0.0 {
                if !self.lv_flag && self.energy_j > e_th {
                    let at = micros_to_reach(self.energy_j - e_th, -net);
                    if at <= span {
                        cut = Some((at, PowerEventKind::LowVoltage));
                    }
                }
                let at = micros_to_reach(self.energy_j - e_off, -net).max(1);
                if at <= span && cut.is_none_or(|(c, _)| at < c) {
                    cut = Some((at, PowerEventKind::PowerOff));
                }
                // lv and off at the same microsecond: lv first, then off below
            } else if !self.device_on {
                if self.energy_j >= e_on {
                    cut = Some((0, PowerEventKind::PowerOn));
                } else if net > 0.0 {
                    let at = micros_to_reach(e_on - self.energy_j, net).max(1);
                    if at <= span {
                        cut = Some((at, PowerEventKind::PowerOn));
                    }
                }
            }

            let run = cut.map_or(span, |(at, _)| at);
            self.integrate(run, harvest, draw, e_max);
            done += run;

            if let Some((_, kind)) = cut {
                let offset_us = done;
                match kind {
                    PowerEventKind::LowVoltage => {
                        self.lv_flag = true;
                        events.push(PowerEvent { offset_us, kind });
                    }
                    PowerEventKind::PowerOff => {
                        if !self.lv_flag && self.energy_j <= e_th {
                            // crossed both thresholds within one microsecond
                            self.lv_flag = true;
                            events.push(PowerEvent {
                                offset_us,
                                kind: PowerEventKind::LowVoltage,
                            });
                        }
                        self.device_on = false;
                        self.lv_flag = false;
                        events.push(PowerEvent { offset_us, kind });
                    }
                    PowerEventKind::PowerOn => {
                        self.device_on = true;
                        self.lv_flag = false;
                        events.push(PowerEvent { offset_us, kind });
                    }
                }
            }
        }
        events
    }

    fn integrate(&mut self, span_us: Micros, harvest_w: f64, draw_w: f64, e_max: f64) {
        if span_us == 0 {
            return;
        }
        let secs = span_us as f64 * 1e-6;
        self.t_us += span_us;
        let gained = harvest_w * secs;
        let used = draw_w * secs;
        self.harvested_j += gained;
        self.consumed_j += used;
        let mut e = self.energy_j + gained - used;
        if e > e_max {
            self.clamped_j += e - e_max;
            e = e_max;
        }
        self.energy_j = e.max(0.0);
    }

    /// Time until the switch turns on while the device draws nothing, or
    /// `None` if that does not happen within `limit_us`.
    pub fn time_to_power_on(&self, limit_us: Micros) -> Option<Micros> {
        if self.device_on {
            return Some(0);
        }
        let e_on = self.cfg.energy(self.cfg.v_on);
        let e_max = self.cfg.energy(self.cfg.v_max);
        let mut energy = self.energy_j;
        let mut t = self.t_us;
        let mut elapsed = 0;
        loop {
            if energy >= e_on {
                return Some(elapsed);
            }
            if elapsed >= limit_us {
                return None;
            }
            let (harvest_raw, seg_left) = self.trace.harvest_at(t);
            let harvest = harvest_raw * self.cfg.efficiency;
            let span = seg_left.unwrap_or(Micros::MAX).min(limit_us - elapsed);
            if harvest > 0.0 {
                let at = micros_to_reach(e_on - energy, harvest).max(1);
                if at <= span {
                    return Some(elapsed + at);
                }
            } else if seg_left.is_none() {
                return None;
            }
            energy = (energy + harvest * span as f64 * 1e-6).min(e_max);
            t += span;
            elapsed += span;
        }
    }
}
