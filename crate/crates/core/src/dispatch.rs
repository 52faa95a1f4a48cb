//! Energy-manager layer: per-step ramp allocation between the generators and
//! the energy storage.
//!
//! Sign conventions: `p_es_bus` / `r_es_bus` are bus-frame quantities,
//! positive when the storage discharges into the bus, so that
//! `Σp_gen + p_es_bus = p_L` holds literally. The MPC works in the
//! charge-positive frame (`p_chg = −p_es_bus`); [`Dispatcher::dispatch_step`]
//! is the only place the two frames meet.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{mpc_step, AugmentedState, MpcError, PredictionModel, StorageEnvelope};
use crate::qp::{QpSettings, QpSolution};

/// Ramp balance tolerance, kW/s.
pub const RAMP_BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl DeviceId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DispatchError {
    #[error("generator {id}: {reason}")]
    InvalidGenerator { id: DeviceId, reason: String },
    #[error("storage rating: {0}")]
    InvalidStorage(String),
    #[error("no generators configured")]
    NoGenerators,
    #[error("aggregate {0} ramp limit is zero")]
    ZeroAggregateLimit(Direction),
    #[error("storage envelope is empty: {0}")]
    InfeasibleEnvelope(String),
    #[error("device {0} sent more than one record this step")]
    DuplicateSender(DeviceId),
    #[error("record from unknown device {0}")]
    UnknownSender(DeviceId),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRating {
    pub id: DeviceId,
    /// kW
    pub p_min: f64,
    pub p_max: f64,
    /// kW/s
    pub r_min: f64,
    pub r_max: f64,
}

impl GeneratorRating {
    pub fn validate(&self) -> Result<(), DispatchError> {
        let bad = |reason: &str| Err(DispatchError::InvalidGenerator { id: self.id.clone(), reason: reason.into() });
        let vals = [self.p_min, self.p_max, self.r_min, self.r_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return bad("ratings must be finite");
        }
        if self.p_min > self.p_max {
            return bad("p_min exceeds p_max");
        }
        if !(self.r_min < 0.0 && 0.0 < self.r_max) {
            return bad("ramp limits must satisfy r_min < 0 < r_max");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageRating {
    #[serde(default = "default_storage_id")]
    pub id: DeviceId,
    /// kJ
    pub e_capacity: f64,
    /// Device power magnitude limit, kW.
    pub p_abs_max: f64,
    /// kJ
    pub e_ref: f64,
    /// kJ
    pub e_initial: f64,
}

fn default_storage_id() -> DeviceId {
    DeviceId::new("ES")
}

impl StorageRating {
    pub fn validate(&self) -> Result<(), DispatchError> {
        let bad = |m: String| Err(DispatchError::InvalidStorage(m));
        if !(self.e_capacity.is_finite() && self.e_capacity > 0.0) {
            return bad(format!("capacity {} must be positive", self.e_capacity));
        }
        if !(self.e_ref > 0.0 && self.e_ref <= self.e_capacity) {
            return bad(format!("e_ref {} outside (0, {}]", self.e_ref, self.e_capacity));
        }
        if !(self.e_initial >= 0.0 && self.e_initial <= self.e_capacity) {
            return bad(format!("e_initial {} outside [0, {}]", self.e_initial, self.e_capacity));
        }
        if !(self.p_abs_max.is_finite() && self.p_abs_max > 0.0) {
            return bad(format!("p_abs_max {} must be positive", self.p_abs_max));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DispatchMode {
    SaturatedUp,
    SaturatedDown,
    Tracking,
}

impl DispatchMode {
    pub fn token(self) -> &'static str {
        match self {
            Self::SaturatedUp => "SaturatedUp",
            Self::SaturatedDown => "SaturatedDown",
            Self::Tracking => "Tracking",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "SaturatedUp" => Some(Self::SaturatedUp),
            "SaturatedDown" => Some(Self::SaturatedDown),
            "Tracking" => Some(Self::Tracking),
            _ => None,
        }
    }
}

impl fmt::Display for DispatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Up => "up",
            Self::Down => "down",
        })
    }
}

fn sum_r_max(gens: &[GeneratorRating]) -> f64 {
    gens.iter().map(|g| g.r_max).sum()
}

fn sum_r_min(gens: &[GeneratorRating]) -> f64 {
    gens.iter().map(|g| g.r_min).sum()
}

/// Closed interval `[Σr_min, Σr_max]` is Tracking; outside it the generators saturate.
pub fn classify_mode(r_l: f64, gens: &[GeneratorRating]) -> DispatchMode {
    if r_l > sum_r_max(gens) {
        DispatchMode::SaturatedUp
    } else if r_l < sum_r_min(gens) {
        DispatchMode::SaturatedDown
    } else {
        DispatchMode::Tracking
    }
}

/// Split weights proportional to each generator's ramp limit in `direction`.
pub fn generator_weights(gens: &[GeneratorRating], direction: Direction) -> Result<Vec<f64>, DispatchError> {
    if gens.is_empty() {
        return Err(DispatchError::NoGenerators);
    }
    let limits: Vec<f64> = gens
        .iter()
        .map(|g| match direction {
            Direction::Up => g.r_max,
            Direction::Down => g.r_min.abs(),
        })
        .collect();
    let total: f64 = limits.iter().sum();
    if !(total > 0.0) {
        return Err(DispatchError::ZeroAggregateLimit(direction));
    }
    Ok(limits.into_iter().map(|l| l / total).collect())
}

/// Charge-positive MPC envelope from bus balance.
///
/// With `p_gen = p_L + p_chg` and `r_gen = r_L + r_chg`, generator
/// feasibility gives `r_chg ∈ [Σr_min − r_L, Σr_max − r_L]` and
/// `p_chg ∈ [Σp_min − p_L, Σp_max − p_L] ∩ [−p_abs_max, p_abs_max]`.
pub fn storage_envelope(
    r_l: f64,
    p_l: f64,
    gens: &[GeneratorRating],
    storage: &StorageRating,
    p_chg_now: f64,
) -> Result<StorageEnvelope<f64>, DispatchError> {
    let p_min: f64 = gens.iter().map(|g| g.p_min).sum();
    let p_max: f64 = gens.iter().map(|g| g.p_max).sum();
    let env = StorageEnvelope {
        p_chg_min: (p_min - p_l).max(-storage.p_abs_max),
        p_chg_max: (p_max - p_l).min(storage.p_abs_max),
        r_chg_min: sum_r_min(gens) - r_l,
        r_chg_max: sum_r_max(gens) - r_l,
        e_min: 0.0,
        e_max: storage.e_capacity,
        e_ref: storage.e_ref,
        p_chg_now,
    };
    if env.p_chg_min > env.p_chg_max {
        return Err(DispatchError::InfeasibleEnvelope(format!(
            "load {p_l:.6} kW needs storage power in [{:.6}, {:.6}] kW (charge-positive)",
            p_min - p_l,
            p_max - p_l
        )));
    }
    if env.r_chg_min > env.r_chg_max {
        return Err(DispatchError::InfeasibleEnvelope("generator ramp limits cross".into()));
    }
    Ok(env)
}

/// One Table-I style message. Each sender kind carries only its own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub sender: DeviceId,
    pub payload: ExchangePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangePayload {
    /// Generator output, kW.
    Generator { p_gen: f64 },
    /// Storage energy (kJ), bus-frame power and last power change (kW).
    Storage { e_es: f64, p_es: f64, delta_p_es: f64 },
    /// A load's commanded power change this step, kW.
    Load { delta_p_load: f64 },
}

impl ExchangeRecord {
    pub fn generator(sender: DeviceId, p_gen: f64) -> Self {
        Self { sender, payload: ExchangePayload::Generator { p_gen } }
    }

    pub fn storage(sender: DeviceId, e_es: f64, p_es: f64, delta_p_es: f64) -> Self {
        Self { sender, payload: ExchangePayload::Storage { e_es, p_es, delta_p_es } }
    }

    pub fn load(sender: DeviceId, delta_p_load: f64) -> Self {
        Self { sender, payload: ExchangePayload::Load { delta_p_load } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeView {
    /// Aggregate load ramp, kW/s.
    pub r_l: f64,
    /// Aggregate load power, kW.
    pub p_l: f64,
    pub e_es: f64,
    pub p_es: f64,
    pub p_gen: BTreeMap<DeviceId, f64>,
}

/// Last-known values of everything broadcast between energy managers.
/// Devices that stay silent keep their previous value; a silent load
/// contributes no power change.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeBus {
    step: f64,
    loads: BTreeMap<DeviceId, f64>,
    p_gen: BTreeMap<DeviceId, f64>,
    e_es: f64,
    p_es: f64,
}

impl ExchangeBus {
    pub fn new(step: f64, initial_loads: impl IntoIterator<Item = (DeviceId, f64)>, e_es: f64) -> Self {
        Self { step, loads: initial_loads.into_iter().collect(), p_gen: BTreeMap::new(), e_es, p_es: 0.0 }
    }

    pub fn collect(&mut self, records: &[ExchangeRecord]) -> Result<ExchangeView, DispatchError> {
        let mut seen = std::collections::BTreeSet::new();
        for r in records {
            if !seen.insert(&r.sender) {
                return Err(DispatchError::DuplicateSender(r.sender.clone()));
            }
        }
        let mut delta_sum = 0.0;
        for r in records {
            match r.payload {
                ExchangePayload::Generator { p_gen } => {
                    self.p_gen.insert(r.sender.clone(), p_gen);
                }
                ExchangePayload::Storage { e_es, p_es, .. } => {
                    self.e_es = e_es;
                    self.p_es = p_es;
                }
                ExchangePayload::Load { delta_p_load } => {
                    *self.loads.entry(r.sender.clone()).or_insert(0.0) += delta_p_load;
                    delta_sum += delta_p_load;
                }
            }
        }
        Ok(ExchangeView {
            r_l: delta_sum / self.step,
            p_l: self.loads.values().sum(),
            e_es: self.e_es,
            p_es: self.p_es,
            p_gen: self.p_gen.clone(),
        })
    }
}

/// Aggregates one step's records against a bus with the given load powers.
pub fn collect_exchange(records: &[ExchangeRecord], bus: &mut ExchangeBus) -> Result<ExchangeView, DispatchError> {
    bus.collect(records)
}

/// Measured storage state the dispatcher needs each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageSnapshot {
    /// kJ
    pub e_es: f64,
    /// `E_k − E_{k−1}`, kJ.
    pub delta_e: f64,
    /// Storage power over the previous step, charge-positive, kW.
    pub p_chg: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DispatchDiagnostics {
    pub mpc: Option<QpSolution<f64>>,
    pub mpc_converged: bool,
    pub energy_rows_relaxed: bool,
    /// Ramp moved from the generators to the storage because a power command
    /// hit a generator limit, kW/s.
    pub clamp_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchCommand {
    /// Per-generator ramp, kW/s.
    pub r_gen: Vec<f64>,
    /// Storage ramp, bus frame, kW/s.
    pub r_es_bus: f64,
    /// Per-generator integrated power commands, kW.
    pub p_gen_cmd: Vec<f64>,
    /// `p_L − Σp_gen_cmd`, bus frame, kW.
    pub p_es_expected: f64,
    pub mode: DispatchMode,
    pub diagnostics: DispatchDiagnostics,
}

/// Stateful energy manager for a fixed set of generators and one storage.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    gens: Vec<GeneratorRating>,
    storage: StorageRating,
    model: PredictionModel<f64>,
    settings: QpSettings<f64>,
    weights_up: Vec<f64>,
    weights_down: Vec<f64>,
    p_gen_cmd: Vec<f64>,
    e_ref: Option<f64>,
}

impl Dispatcher {
    /// `p_gen_initial` seeds the power-command integrators.
    pub fn new(
        gens: Vec<GeneratorRating>,
        storage: StorageRating,
        model: PredictionModel<f64>,
        settings: QpSettings<f64>,
        p_gen_initial: Vec<f64>,
    ) -> Result<Self, DispatchError> {
        if gens.is_empty() {
            return Err(DispatchError::NoGenerators);
        }
        for g in &gens {
            g.validate()?;
        }
        storage.validate()?;
        assert_eq!(p_gen_initial.len(), gens.len(), "one initial power per generator");
        Ok(Self {
            weights_up: generator_weights(&gens, Direction::Up)?,
            weights_down: generator_weights(&gens, Direction::Down)?,
            gens,
            storage,
            model,
            settings,
            p_gen_cmd: p_gen_initial,
            e_ref: None,
        })
    }

    pub fn generators(&self) -> &[GeneratorRating] {
        &self.gens
    }

    pub fn step(&self) -> f64 {
        self.model.step
    }

    pub fn p_gen_cmd(&self) -> &[f64] {
        &self.p_gen_cmd
    }

    /// Active SOC reference; `None` until tracking is enabled.
    pub fn soc_reference(&self) -> Option<f64> {
        self.e_ref
    }

    /// Sets the reference and enables SOC tracking.
    pub fn set_soc_reference(&mut self, e_ref: f64) {
        self.e_ref = Some(e_ref);
    }

    /// One control step for load ramp `r_l` and load power `p_l` (this step's values).
    pub fn dispatch_step(&mut self, r_l: f64, p_l: f64, snap: &StorageSnapshot) -> Result<DispatchCommand, DispatchError> {
        let step = self.model.step;
        let mut env = storage_envelope(r_l, p_l, &self.gens, &self.storage, snap.p_chg)?;
        let mode = classify_mode(r_l, &self.gens);
        let mut diagnostics = DispatchDiagnostics { mpc_converged: true, ..Default::default() };

        let (r_gen_total, mut r_es_bus) = match mode {
            DispatchMode::SaturatedUp => {
                let total = sum_r_max(&self.gens);
                (total, r_l - total)
            }
            DispatchMode::SaturatedDown => {
                let total = sum_r_min(&self.gens);
                (total, r_l - total)
            }
            DispatchMode::Tracking => {
                let r_chg = match self.e_ref {
                    Some(e_ref) => {
                        env.e_ref = e_ref;
                        let x = AugmentedState::new(snap.delta_e, snap.e_es);
                        let out = mpc_step(&self.model, &x, &env, &self.settings)?;
                        diagnostics.mpc_converged = out.solution.converged;
                        diagnostics.energy_rows_relaxed = out.energy_rows_relaxed;
                        diagnostics.mpc = Some(out.solution);
                        out.r_chg
                    }
                    None => 0.0,
                };
                let r_es_bus = -r_chg;
                (r_l - r_es_bus, r_es_bus)
            }
        };

        let weights = if r_gen_total >= 0.0 { &self.weights_up } else { &self.weights_down };
        let mut r_gen: Vec<f64> = weights.iter().map(|w| w * r_gen_total).collect();
        let mut residual = 0.0;
        for ((cmd, r), g) in self.p_gen_cmd.iter_mut().zip(r_gen.iter_mut()).zip(&self.gens) {
            let target = *cmd + step * *r;
            let clamped = target.clamp(g.p_min, g.p_max);
            if clamped != target {
                let applied = (clamped - *cmd) / step;
                residual += *r - applied;
                log::debug!("generator {} power command clamped at {clamped:.6} kW", g.id);
                *r = applied;
            }
            *cmd = clamped;
        }
        r_es_bus += residual;
        diagnostics.clamp_residual = residual;

        Ok(DispatchCommand {
            p_es_expected: p_l - self.p_gen_cmd.iter().sum::<f64>(),
            p_gen_cmd: self.p_gen_cmd.clone(),
            r_gen,
            r_es_bus,
            mode,
            diagnostics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_ii() -> Vec<GeneratorRating> {
        vec![
            GeneratorRating { id: DeviceId::new("GEN1"), p_min: 0.0, p_max: 4.0, r_min: -0.2, r_max: 0.2 },
            GeneratorRating { id: DeviceId::new("GEN2"), p_min: 0.0, p_max: 2.0, r_min: -0.1, r_max: 0.1 },
        ]
    }

    fn storage() -> StorageRating {
        StorageRating { id: DeviceId::new("ES"), e_capacity: 10.0, p_abs_max: 8.0, e_ref: 8.0, e_initial: 3.0 }
    }

    fn dispatcher(p_gen: Vec<f64>) -> Dispatcher {
        let model = PredictionModel::new(0.01, 500, 1).unwrap();
        Dispatcher::new(table_ii(), storage(), model, QpSettings::default(), p_gen).unwrap()
    }

    #[test]
    fn mode_examples() {
        assert_eq!(classify_mode(0.375, &table_ii()), DispatchMode::SaturatedUp);
        assert_eq!(classify_mode(-0.5, &table_ii()), DispatchMode::SaturatedDown);
        assert_eq!(classify_mode(0.0, &table_ii()), DispatchMode::Tracking);
        let edge = sum_r_max(&table_ii());
        assert_eq!(classify_mode(edge, &table_ii()), DispatchMode::Tracking);
        assert_eq!(classify_mode(sum_r_min(&table_ii()), &table_ii()), DispatchMode::Tracking);
    }

    #[test]
    fn weight_examples() {
        let up = generator_weights(&table_ii(), Direction::Up).unwrap();
        assert!((up[0] - 2.0 / 3.0).abs() < 1e-15 && (up[1] - 1.0 / 3.0).abs() < 1e-15);
        let down = generator_weights(&table_ii(), Direction::Down).unwrap();
        assert!((down[0] - 2.0 / 3.0).abs() < 1e-15 && (down[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(generator_weights(&table_ii()[..1], Direction::Up).unwrap(), vec![1.0]);
        assert_eq!(generator_weights(&[], Direction::Up), Err(DispatchError::NoGenerators));
        let mut flat = table_ii();
        flat.iter_mut().for_each(|g| g.r_max = 0.0);
        assert_eq!(generator_weights(&flat, Direction::Up), Err(DispatchError::ZeroAggregateLimit(Direction::Up)));
    }

    #[test]
    fn envelope_examples() {
        let env = storage_envelope(0.0, 1.0, &table_ii(), &storage(), 0.0).unwrap();
        assert!((env.r_chg_min + 0.3).abs() < 1e-15 && (env.r_chg_max - 0.3).abs() < 1e-15);
        assert_eq!((env.p_chg_min, env.p_chg_max), (-1.0, 5.0));
        assert_eq!((env.e_min, env.e_max, env.e_ref), (0.0, 10.0, 8.0));

        let env = storage_envelope(0.0, 0.0, &table_ii(), &storage(), 0.0).unwrap();
        assert_eq!((env.p_chg_min, env.p_chg_max), (0.0, 6.0));

        let env = storage_envelope(0.0, 7.0, &table_ii(), &storage(), 0.0).unwrap();
        assert_eq!((env.p_chg_min, env.p_chg_max), (-7.0, -1.0));

        assert!(matches!(
            storage_envelope(0.0, 14.5, &table_ii(), &storage(), 0.0),
            Err(DispatchError::InfeasibleEnvelope(_))
        ));
    }

    #[test]
    fn exchange_examples() {
        let pr = DeviceId::new("Pr");
        let mut bus = ExchangeBus::new(0.01, [(pr.clone(), 1.0)], 3.0);
        let view = bus.collect(&[ExchangeRecord::load(pr.clone(), 0.00375)]).unwrap();
        assert!((view.r_l - 0.375).abs() < 1e-12);
        assert!((view.p_l - 1.00375).abs() < 1e-15);

        let view = bus.collect(&[]).unwrap();
        assert_eq!(view.r_l, 0.0);
        assert!((view.p_l - 1.00375).abs() < 1e-15);

        let dup = [ExchangeRecord::load(pr.clone(), 0.1), ExchangeRecord::load(pr.clone(), 0.1)];
        assert_eq!(bus.collect(&dup), Err(DispatchError::DuplicateSender(pr)));
    }

    #[test]
    fn exchange_keeps_table_one_fields() {
        let mut bus = ExchangeBus::new(0.01, [], 0.0);
        let records = [
            ExchangeRecord::generator(DeviceId::new("GEN1"), 0.7),
            ExchangeRecord::storage(DeviceId::new("ES"), 5.5, -0.2, 0.003),
            ExchangeRecord::load(DeviceId::new("PPL"), 0.1),
        ];
        let view = collect_exchange(&records, &mut bus).unwrap();
        assert_eq!(view.p_gen[&DeviceId::new("GEN1")], 0.7);
        assert_eq!((view.e_es, view.p_es), (5.5, -0.2));
        assert!((view.r_l - 10.0).abs() < 1e-12);
        let json = serde_json::to_value(&records[1]).unwrap();
        assert_eq!(json["payload"]["storage"].as_object().unwrap().len(), 3);
    }

    #[test]
    fn saturated_up_pulse_rise() {
        let mut d = dispatcher(vec![2.0 / 3.0, 1.0 / 3.0]);
        let snap = StorageSnapshot { e_es: 8.0, delta_e: 0.0, p_chg: 0.0 };
        let cmd = d.dispatch_step(10.0, 1.1, &snap).unwrap();
        assert_eq!(cmd.mode, DispatchMode::SaturatedUp);
        assert!((cmd.r_gen[0] - 0.2).abs() < 1e-15 && (cmd.r_gen[1] - 0.1).abs() < 1e-15);
        assert!((cmd.r_es_bus - 9.7).abs() < 1e-12);
        assert!((cmd.r_gen.iter().sum::<f64>() + cmd.r_es_bus - 10.0).abs() < RAMP_BALANCE_TOL);
    }

    #[test]
    fn tracking_recharges_at_generator_limit() {
        let mut d = dispatcher(vec![2.0 / 3.0, 1.0 / 3.0]);
        d.set_soc_reference(8.0);
        let snap = StorageSnapshot { e_es: 3.0, delta_e: 0.0, p_chg: 0.0 };
        let cmd = d.dispatch_step(0.0, 1.0, &snap).unwrap();
        assert_eq!(cmd.mode, DispatchMode::Tracking);
        assert!((cmd.r_es_bus + 0.3).abs() < 1e-12);
        assert!((cmd.r_gen[0] - 0.2).abs() < 1e-12 && (cmd.r_gen[1] - 0.1).abs() < 1e-12);
        assert!((cmd.p_gen_cmd[0] - (2.0 / 3.0 + 0.002)).abs() < 1e-12);
    }

    #[test]
    fn tracking_equilibrium_is_still() {
        let mut d = dispatcher(vec![2.0 / 3.0, 1.0 / 3.0]);
        d.set_soc_reference(8.0);
        let snap = StorageSnapshot { e_es: 8.0, delta_e: 0.0, p_chg: 0.0 };
        let cmd = d.dispatch_step(0.0, 1.0, &snap).unwrap();
        assert_eq!(cmd.r_gen, vec![0.0, 0.0]);
        assert_eq!(cmd.r_es_bus, 0.0);
    }

    #[test]
    fn tracking_holds_storage_until_enabled() {
        let mut d = dispatcher(vec![2.0 / 3.0, 1.0 / 3.0]);
        let snap = StorageSnapshot { e_es: 3.0, delta_e: 0.0, p_chg: 0.0 };
        let cmd = d.dispatch_step(0.1, 1.0, &snap).unwrap();
        assert_eq!(cmd.r_es_bus, 0.0);
        assert!((cmd.r_gen.iter().sum::<f64>() - 0.1).abs() < 1e-15);
        assert!(cmd.diagnostics.mpc.is_none());
    }

    #[test]
    fn clamp_residual_moves_to_storage() {
        // GEN2 already at its 2 kW ceiling
        let mut d = dispatcher(vec![3.0, 2.0]);
        let snap = StorageSnapshot { e_es: 8.0, delta_e: 0.0, p_chg: 0.0 };
        let cmd = d.dispatch_step(10.0, 5.1, &snap).unwrap();
        assert_eq!(cmd.p_gen_cmd[1], 2.0);
        assert_eq!(cmd.r_gen[1], 0.0);
        assert!((cmd.diagnostics.clamp_residual - 0.1).abs() < 1e-12);
        assert!((cmd.r_gen.iter().sum::<f64>() + cmd.r_es_bus - 10.0).abs() < RAMP_BALANCE_TOL);
    }

    #[test]
    fn infeasible_load_is_reported() {
        let mut d = dispatcher(vec![4.0, 2.0]);
        let snap = StorageSnapshot { e_es: 8.0, delta_e: 0.0, p_chg: 0.0 };
        assert!(matches!(d.dispatch_step(0.0, 15.0, &snap), Err(DispatchError::InfeasibleEnvelope(_))));
    }

    #[test]
    fn rating_validation() {
        let mut g = table_ii()[0].clone();
        g.r_min = 0.1;
        assert!(g.validate().is_err());
        let mut s = storage();
        s.e_ref = 12.0;
        assert!(s.validate().is_err());
        s.e_ref = 8.0;
        s.e_initial = -1.0;
        assert!(s.validate().is_err());
    }
}
