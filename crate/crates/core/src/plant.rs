//! Fixed-step power/energy plant: ramp-limited generators tracking their
//! power commands, storage as the bus slack, and the two load models.

use serde::{Deserialize, Serialize};

use crate::dispatch::{DispatchCommand, GeneratorRating, StorageRating};

/// Slack tolerance for flagging a generator as limit-bound, kW.
const LIMIT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlantFlags {
    pub es_power_clamped: bool,
    pub es_energy_clamped: bool,
    pub gen_limit_hit: bool,
}

impl PlantFlags {
    pub fn any(&self) -> bool {
        self.es_power_clamped || self.es_energy_clamped || self.gen_limit_hit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub step_index: u64,
    /// s
    pub t: f64,
    /// Actual generator outputs, kW.
    pub p_gen: Vec<f64>,
    /// Storage power, positive when discharging into the bus, kW.
    pub p_es_bus: f64,
    /// kJ
    pub e_es: f64,
    pub p_pr: f64,
    pub p_ppl: f64,
    pub flags: PlantFlags,
    /// Unserved (positive) or unabsorbed (negative) power after a storage clamp, kW.
    pub imbalance: f64,
}

impl PlantState {
    pub fn p_load(&self) -> f64 {
        self.p_pr + self.p_ppl
    }

    /// `Σp_gen + p_es_bus − p_L`.
    pub fn balance_residual(&self) -> f64 {
        self.p_gen.iter().sum::<f64>() + self.p_es_bus - self.p_load()
    }
}

/// Propulsion demand moving toward `target` at `rate` (magnitude), kW and kW/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Propulsion {
    pub power: f64,
    pub target: f64,
    pub rate: f64,
}

impl Propulsion {
    pub fn steady(power: f64) -> Self {
        Self { power, target: power, rate: 1.0 }
    }

    pub fn at_target(&self) -> bool {
        self.power == self.target
    }
}

/// Trapezoidal pulse repeated `count` times every `period` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseTrain {
    pub t_start: f64,
    pub count: u32,
    pub period: f64,
    /// kW
    pub peak: f64,
    /// Rise and fall rate magnitude, kW/s.
    pub rate: f64,
    /// Time at peak, s.
    pub hold: f64,
}

impl PulseTrain {
    pub fn edge_time(&self) -> f64 {
        self.peak / self.rate
    }

    /// Single pulse length: rise + hold + fall.
    pub fn pulse_duration(&self) -> f64 {
        2.0 * self.edge_time() + self.hold
    }

    /// Analytic energy of one pulse, kJ.
    pub fn pulse_energy(&self) -> f64 {
        self.peak * (self.hold + self.edge_time())
    }

    pub fn end_time(&self) -> f64 {
        self.t_start + (self.count.saturating_sub(1)) as f64 * self.period + self.pulse_duration()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.peak > 0.0 && self.rate > 0.0 && self.hold >= 0.0) {
            return Err("pulse needs peak > 0, rate > 0 and hold >= 0".into());
        }
        if self.count == 0 {
            return Err("pulse count must be at least 1".into());
        }
        if self.count > 1 && !(self.period > self.pulse_duration()) {
            return Err(format!(
                "period {} must exceed the pulse length {}",
                self.period,
                self.pulse_duration()
            ));
        }
        Ok(())
    }

    /// Demand at absolute time `t`.
    pub fn power_at(&self, t: f64) -> f64 {
        let since = t - self.t_start;
        if since < 0.0 {
            return 0.0;
        }
        let n = if self.count > 1 { (since / self.period).floor() } else { 0.0 };
        if n >= self.count as f64 {
            return 0.0;
        }
        trapezoid(since - n * self.period, self.peak, self.rate, self.hold)
    }
}

fn trapezoid(tau: f64, peak: f64, rate: f64, hold: f64) -> f64 {
    let edge = peak / rate;
    if tau <= 0.0 {
        0.0
    } else if tau < edge {
        rate * tau
    } else if tau <= edge + hold {
        peak
    } else if tau < 2.0 * edge + hold {
        rate * (2.0 * edge + hold - tau)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadModel {
    pub propulsion: Propulsion,
    pub pulse: Option<PulseTrain>,
}

impl LoadModel {
    pub fn pulse_active(&self, t: f64) -> bool {
        self.pulse.is_some_and(|p| t < p.end_time())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadStep {
    pub p_pr: f64,
    pub p_ppl: f64,
    pub delta_p_pr: f64,
    pub delta_p_ppl: f64,
}

impl LoadStep {
    pub fn p_load(&self) -> f64 {
        self.p_pr + self.p_ppl
    }
}

/// Moves the loads from their values at `t` to their values at `t + step`.
/// The returned deltas are what the load managers broadcast.
pub fn advance_loads(loads: &mut LoadModel, t: f64, step: f64) -> LoadStep {
    let pr = &mut loads.propulsion;
    let before_pr = pr.power;
    let max_move = pr.rate * step;
    let gap = pr.target - pr.power;
    // exact arrival on the final partial step
    pr.power = if gap.abs() <= max_move { pr.target } else { pr.power + max_move.copysign(gap) };

    let (before_ppl, p_ppl) = match &loads.pulse {
        Some(p) => (p.power_at(t), p.power_at(t + step)),
        None => (0.0, 0.0),
    };
    if loads.pulse.is_some_and(|p| t + step >= p.end_time()) {
        loads.pulse = None;
    }

    LoadStep { p_pr: pr.power, p_ppl, delta_p_pr: pr.power - before_pr, delta_p_ppl: p_ppl - before_ppl }
}

/// Ratings the plant enforces.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub generators: Vec<GeneratorRating>,
    pub storage: StorageRating,
    /// s
    pub step: f64,
}

/// Advances the plant one step under `cmd` with this step's load powers.
pub fn step_plant(state: &PlantState, cmd: &DispatchCommand, loads: &LoadStep, cfg: &PlantConfig) -> PlantState {
    let step = cfg.step;
    let mut flags = PlantFlags::default();

    let p_gen: Vec<f64> = state
        .p_gen
        .iter()
        .zip(&cmd.p_gen_cmd)
        .zip(&cfg.generators)
        .map(|((&p, &target), g)| {
            let (lo, hi) = (step * g.r_min, step * g.r_max);
            let want = target - p;
            let next = if want >= lo && want <= hi {
                target
            } else {
                if want < lo - LIMIT_EPS || want > hi + LIMIT_EPS {
                    flags.gen_limit_hit = true;
                }
                p + want.clamp(lo, hi)
            };
            let bounded = next.clamp(g.p_min, g.p_max);
            if bounded != next {
                flags.gen_limit_hit = true;
            }
            bounded
        })
        .collect();

    let p_load = loads.p_load();
    let slack = p_load - p_gen.iter().sum::<f64>();
    let limit = cfg.storage.p_abs_max;
    let p_es_bus = slack.clamp(-limit, limit);
    let mut imbalance = 0.0;
    if p_es_bus != slack {
        flags.es_power_clamped = true;
        imbalance = slack - p_es_bus;
    }

    let raw_e = state.e_es - step * p_es_bus;
    let e_es = raw_e.clamp(0.0, cfg.storage.e_capacity);
    if e_es != raw_e {
        flags.es_energy_clamped = true;
    }

    let step_index = state.step_index + 1;
    PlantState {
        step_index,
        t: step_index as f64 * step,
        p_gen,
        p_es_bus,
        e_es,
        p_pr: loads.p_pr,
        p_ppl: loads.p_ppl,
        flags,
        imbalance,
    }
}
