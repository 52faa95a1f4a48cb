//! Fixed-step mission loop: exchange → dispatch → plant → telemetry.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{
    generator_weights, DeviceId, Direction, DispatchError, DispatchMode, Dispatcher, ExchangeBus, ExchangeRecord,
    GeneratorRating, StorageSnapshot,
};
use crate::mpc::{MpcError, PredictionModel};
use crate::plant::{advance_loads, step_plant, LoadModel, PlantConfig, PlantFlags, PlantState, Propulsion};
use crate::qp::QpSettings;
use crate::scenario::{Action, Scenario};
use crate::telemetry::{to_telemetry, FrameFlags, TelemetryFrame};

pub const PROPULSION_ID: &str = "Pr";
pub const PULSED_LOAD_ID: &str = "PPL";

/// Default tolerance for in-memory metric checks, kW.
pub const METRIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MissionError {
    #[error("invalid scenario: {0}")]
    Setup(String),
    #[error("infeasible at t = {t:.2} s (step {step}): {source}")]
    Infeasible { t: f64, step: u64, source: DispatchError },
    #[error("event at t = {t:.2} s rejected: {source}")]
    Event { t: f64, source: ActionError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("a pulse train is already active")]
    Busy,
    #[error("mission already finished")]
    Finished,
}

/// Owns all mutable mission state; one instance per running mission.
#[derive(Debug, Clone)]
pub struct MissionRunner {
    scenario: Scenario,
    plant: PlantConfig,
    dispatcher: Dispatcher,
    loads: LoadModel,
    bus: ExchangeBus,
    state: PlantState,
    prev_e: f64,
    prev_p_es: f64,
    next_event: usize,
    total_steps: u64,
}

impl MissionRunner {
    pub fn new(scenario: &Scenario) -> Result<Self, MissionError> {
        scenario.validate().map_err(|(p, m)| MissionError::Setup(format!("{p}: {m}")))?;
        let c = &scenario.controller;
        let setup = |e: String| MissionError::Setup(e);
        let model = PredictionModel::new(c.sample_time, c.np, c.nc).map_err(|e: MpcError| setup(e.to_string()))?;
        let settings = QpSettings { tol: c.qp_tol, max_iter: c.qp_max_iter, fast_path: true };

        let weights = generator_weights(&scenario.generators, Direction::Up).map_err(|e| setup(e.to_string()))?;
        let p_gen: Vec<f64> = weights.iter().map(|w| w * scenario.initial_propulsion).collect();
        for (g, p) in scenario.generators.iter().zip(&p_gen) {
            if *p < g.p_min || *p > g.p_max {
                return Err(setup(format!("initial load puts {} at {p} kW, outside its rating", g.id)));
            }
        }
        let dispatcher = Dispatcher::new(
            scenario.generators.clone(),
            scenario.storage.clone(),
            model,
            settings,
            p_gen.clone(),
        )
        .map_err(|e| setup(e.to_string()))?;

        let state = PlantState {
            step_index: 0,
            t: 0.0,
            p_gen,
            p_es_bus: 0.0,
            e_es: scenario.storage.e_initial,
            p_pr: scenario.initial_propulsion,
            p_ppl: 0.0,
            flags: PlantFlags::default(),
            imbalance: 0.0,
        };
        let bus = ExchangeBus::new(
            c.sample_time,
            [(DeviceId::new(PROPULSION_ID), scenario.initial_propulsion), (DeviceId::new(PULSED_LOAD_ID), 0.0)],
            state.e_es,
        );
        Ok(Self {
            plant: PlantConfig {
                generators: scenario.generators.clone(),
                storage: scenario.storage.clone(),
                step: c.sample_time,
            },
            loads: LoadModel { propulsion: Propulsion::steady(scenario.initial_propulsion), pulse: None },
            prev_e: state.e_es,
            prev_p_es: 0.0,
            state,
            bus,
            dispatcher,
            next_event: 0,
            total_steps: scenario.step_count(),
            scenario: scenario.clone(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn soc_reference(&self) -> Option<f64> {
        self.dispatcher.soc_reference()
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.state.step_index >= self.total_steps
    }

    pub fn pulse_active(&self) -> bool {
        self.loads.pulse_active(self.state.t)
    }

    pub fn generators(&self) -> &[GeneratorRating] {
        &self.plant.generators
    }

    pub fn initial_frame(&self) -> TelemetryFrame {
        self.frame(DispatchMode::Tracking, FrameFlags::default())
    }

    fn frame(&self, mode: DispatchMode, flags: FrameFlags) -> TelemetryFrame {
        to_telemetry(
            &self.state,
            self.scenario.v_bus_nominal,
            self.plant.storage.e_capacity,
            mode,
            flags,
            self.dispatcher.soc_reference(),
        )
    }

    /// Applies an action at the current step boundary.
    pub fn apply_action(&mut self, action: &Action) -> Result<(), ActionError> {
        if self.is_finished() {
            return Err(ActionError::Finished);
        }
        match *action {
            Action::SetPropulsion { target, rate } => {
                let pr = &mut self.loads.propulsion;
                pr.target = target;
                pr.rate = rate;
            }
            Action::FirePulseTrain { .. } => {
                if self.pulse_active() {
                    return Err(ActionError::Busy);
                }
                self.loads.pulse = action.pulse_train(self.state.t);
            }
            Action::SetSocRef { e_ref } => self.dispatcher.set_soc_reference(e_ref),
        }
        Ok(())
    }

    fn apply_due_events(&mut self) -> Result<(), MissionError> {
        let half = 0.5 * self.plant.step;
        while let Some(ev) = self.scenario.events.get(self.next_event) {
            if ev.t > self.state.t + half {
                break;
            }
            let (t, action) = (ev.t, ev.action.clone());
            self.next_event += 1;
            self.apply_action(&action).map_err(|source| MissionError::Event { t, source })?;
        }
        Ok(())
    }

    /// Advances one control period and returns the frame at its end.
    pub fn step(&mut self) -> Result<TelemetryFrame, MissionError> {
        self.apply_due_events()?;
        let step = self.plant.step;
        let loads = advance_loads(&mut self.loads, self.state.t, step);

        let mut records: Vec<ExchangeRecord> = self
            .plant
            .generators
            .iter()
            .zip(&self.state.p_gen)
            .map(|(g, &p)| ExchangeRecord::generator(g.id.clone(), p))
            .collect();
        records.push(ExchangeRecord::storage(
            self.plant.storage.id.clone(),
            self.state.e_es,
            self.state.p_es_bus,
            self.state.p_es_bus - self.prev_p_es,
        ));
        if loads.delta_p_pr != 0.0 {
            records.push(ExchangeRecord::load(DeviceId::new(PROPULSION_ID), loads.delta_p_pr));
        }
        if loads.delta_p_ppl != 0.0 {
            records.push(ExchangeRecord::load(DeviceId::new(PULSED_LOAD_ID), loads.delta_p_ppl));
        }
        let infeasible = |source, s: &PlantState| MissionError::Infeasible { t: s.t, step: s.step_index, source };
        let view = self.bus.collect(&records).map_err(|e| infeasible(e, &self.state))?;

        let snap = StorageSnapshot {
            e_es: self.state.e_es,
            delta_e: self.state.e_es - self.prev_e,
            p_chg: -self.state.p_es_bus,
        };
        let cmd = self.dispatcher.dispatch_step(view.r_l, view.p_l, &snap).map_err(|e| infeasible(e, &self.state))?;
        let next = step_plant(&self.state, &cmd, &loads, &self.plant);

        self.prev_e = self.state.e_es;
        self.prev_p_es = self.state.p_es_bus;
        self.state = next;
        let flags = FrameFlags {
            plant: self.state.flags,
            mpc_relaxed: cmd.diagnostics.energy_rows_relaxed,
            mpc_not_converged: !cmd.diagnostics.mpc_converged,
        };
        Ok(self.frame(cmd.mode, flags))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionMetrics {
    pub final_e_es: f64,
    pub min_e_es: f64,
    pub max_e_es: f64,
    pub soc_tracking_rmse: f64,
    pub ramp_violations: u64,
    pub balance_violations: u64,
    pub clamp_events: u64,
    pub wall_time: f64,
}

/// What the metrics need beyond the frames themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsContext {
    pub step: f64,
    pub generators: Vec<GeneratorRating>,
    /// Slack before a ramp or balance deviation counts as a violation, kW.
    pub tolerance: f64,
}

impl MetricsContext {
    pub fn for_scenario(scenario: &Scenario, tolerance: f64) -> Self {
        Self { step: scenario.controller.sample_time, generators: scenario.generators.clone(), tolerance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("trace is empty")]
    EmptyTrace,
}

pub fn compute_metrics(trace: &[TelemetryFrame], ctx: &MetricsContext) -> Result<MissionMetrics, MetricsError> {
    let last = trace.last().ok_or(MetricsError::EmptyTrace)?;
    let mut m = MissionMetrics {
        final_e_es: last.e_es,
        min_e_es: f64::INFINITY,
        max_e_es: f64::NEG_INFINITY,
        soc_tracking_rmse: 0.0,
        ramp_violations: 0,
        balance_violations: 0,
        clamp_events: 0,
        wall_time: 0.0,
    };
    let mut sq = 0.0;
    let mut tracked = 0usize;
    for (i, f) in trace.iter().enumerate() {
        m.min_e_es = m.min_e_es.min(f.e_es);
        m.max_e_es = m.max_e_es.max(f.e_es);
        if let Some(r) = f.e_ref {
            sq += (f.e_es - r).powi(2);
            tracked += 1;
        }
        if f.flags.plant.any() {
            m.clamp_events += 1;
        }
        if !f.flags.plant.es_power_clamped && f.balance_residual().abs() > ctx.tolerance {
            m.balance_violations += 1;
        }
        if i > 0 {
            let prev = &trace[i - 1];
            for ((&p, &q), g) in f.p_gen.iter().zip(&prev.p_gen).zip(&ctx.generators) {
                let d = p - q;
                if d > ctx.step * g.r_max + ctx.tolerance || d < ctx.step * g.r_min - ctx.tolerance {
                    m.ramp_violations += 1;
                }
            }
        }
    }
    if tracked > 0 {
        m.soc_tracking_rmse = (sq / tracked as f64).sqrt();
    }
    Ok(m)
}

/// Fills `e_ref` on frames read back from a CSV trace, following the
/// scenario's `set_soc_ref` events the same way the runner applies them.
pub fn attach_references(trace: &mut [TelemetryFrame], scenario: &Scenario) {
    let step = scenario.controller.sample_time;
    let refs: Vec<(f64, f64)> = scenario
        .events
        .iter()
        .filter_map(|e| match e.action {
            Action::SetSocRef { e_ref } => Some((e.t, e_ref)),
            _ => None,
        })
        .collect();
    for f in trace {
        // an event applied before step k first shows in the frame ending step k
        f.e_ref = refs.iter().rev().find(|(t, _)| f.t > *t + 0.5 * step).map(|&(_, r)| r);
    }
}

#[derive(Debug, Clone)]
pub struct MissionOutput {
    pub trace: Vec<TelemetryFrame>,
    pub metrics: MissionMetrics,
}

/// Runs the scenario from `t = 0` to `t_end`; the trace includes the initial frame.
pub fn run_mission(scenario: &Scenario) -> Result<MissionOutput, MissionError> {
    let started = Instant::now();
    let mut runner = MissionRunner::new(scenario)?;
    let mut trace = Vec::with_capacity(runner.total_steps() as usize + 1);
    trace.push(runner.initial_frame());
    while !runner.is_finished() {
        trace.push(runner.step()?);
    }
    let mut metrics =
        compute_metrics(&trace, &MetricsContext::for_scenario(scenario, METRIC_TOL)).expect("trace has the initial frame");
    metrics.wall_time = started.elapsed().as_secs_f64();
    Ok(MissionOutput { trace, metrics })
}
