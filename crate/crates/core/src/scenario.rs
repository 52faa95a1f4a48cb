//! Mission scenario documents (JSON) and their validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{GeneratorRating, StorageRating};
use crate::plant::PulseTrain;

const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema error at {path} (line {line}): {message}")]
    Schema { path: String, line: usize, message: String },
    #[error("validation error at {path}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Validation { path: String, line: Option<usize>, message: String },
    #[error("cannot read scenario: {0}")]
    Io(String),
}

impl ScenarioError {
    pub fn path(&self) -> Option<&str> {
        match self {
            Self::Schema { path, .. } | Self::Validation { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSettings {
    /// Control period T, s.
    pub sample_time: f64,
    pub np: usize,
    pub nc: usize,
    pub qp_tol: f64,
    pub qp_max_iter: Option<usize>,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self { sample_time: 0.01, np: 500, nc: 1, qp_tol: crate::qp::DEFAULT_TOLERANCE, qp_max_iter: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Ramp propulsion demand to `target` kW at `rate` kW/s (magnitude).
    SetPropulsion { target: f64, rate: f64 },
    FirePulseTrain { count: u32, period: f64, peak: f64, rate: f64, hold: f64 },
    /// Sets the SOC reference and enables tracking.
    SetSocRef { e_ref: f64 },
}

impl Action {
    pub fn pulse_train(&self, t_start: f64) -> Option<PulseTrain> {
        match *self {
            Self::FirePulseTrain { count, period, peak, rate, hold } => {
                Some(PulseTrain { t_start, count, period, peak, rate, hold })
            }
            _ => None,
        }
    }

    /// Parameter checks against the storage rating; returns the offending
    /// field name and a message.
    pub fn validate(&self, storage: &StorageRating) -> Result<(), (&'static str, String)> {
        match *self {
            Self::SetPropulsion { target, rate } => {
                if !(target.is_finite() && target >= 0.0) {
                    return Err(("target", format!("propulsion target {target} must be >= 0")));
                }
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(("rate", format!("propulsion rate {rate} must be > 0")));
                }
            }
            Self::FirePulseTrain { .. } => {
                self.pulse_train(0.0).expect("pulse action").validate().map_err(|m| ("fire_pulse_train", m))?;
            }
            Self::SetSocRef { e_ref } => {
                if !(e_ref > 0.0 && e_ref <= storage.e_capacity) {
                    return Err(("e_ref", format!("reference {e_ref} outside (0, {}]", storage.e_capacity)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionEvent {
    pub t: f64,
    pub action: Action,
}

fn default_v_bus() -> f64 {
    400.0
}

fn default_t_end() -> f64 {
    180.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub generators: Vec<GeneratorRating>,
    pub storage: StorageRating,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default = "default_v_bus")]
    pub v_bus_nominal: f64,
    /// Propulsion demand at t = 0, kW.
    #[serde(default)]
    pub initial_propulsion: f64,
    #[serde(default)]
    pub events: Vec<MissionEvent>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
}

impl Scenario {
    /// The bundled four-stage mission.
    pub fn default_mission() -> Self {
        parse_scenario(DEFAULT_SCENARIO).expect("bundled scenario is valid")
    }

    pub fn default_mission_json() -> &'static str {
        DEFAULT_SCENARIO
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.as_ref().display())))?;
        parse_scenario(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn step_count(&self) -> u64 {
        (self.t_end / self.controller.sample_time).round() as u64
    }

    /// Checks every invariant; the error carries a JSON-pointer style path.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |p: &str, m: String| Err((p.to_string(), m));
        if self.generators.is_empty() {
            return err("/generators", "at least one generator is required".into());
        }
        for (i, g) in self.generators.iter().enumerate() {
            if let Err(e) = g.validate() {
                return err(&format!("/generators/{i}"), e.to_string());
            }
        }
        if let Err(e) = self.storage.validate() {
            return err("/storage", e.to_string());
        }
        let c = &self.controller;
        if !(c.sample_time.is_finite() && c.sample_time > 0.0) {
            return err("/controller/sample_time", format!("sample time {} must be > 0", c.sample_time));
        }
        if c.nc < 1 || c.nc > c.np {
            return err("/controller/nc", format!("need 1 <= nc <= np, got np={}, nc={}", c.np, c.nc));
        }
        if !(c.qp_tol > 0.0) {
            return err("/controller/qp_tol", "tolerance must be > 0".into());
        }
        if c.qp_max_iter == Some(0) {
            return err("/controller/qp_max_iter", "iteration cap must be >= 1".into());
        }
        if !(self.v_bus_nominal.is_finite() && self.v_bus_nominal > 0.0) {
            return err("/v_bus_nominal", "bus voltage must be > 0".into());
        }
        if !(self.initial_propulsion.is_finite() && self.initial_propulsion >= 0.0) {
            return err("/initial_propulsion", "initial propulsion must be >= 0".into());
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return err("/t_end", format!("t_end {} must be > 0", self.t_end));
        }
        let mut prev = 0.0;
        for (i, ev) in self.events.iter().enumerate() {
            if !(ev.t.is_finite() && ev.t >= 0.0) {
                return err(&format!("/events/{i}/t"), format!("event time {} must be >= 0", ev.t));
            }
            if ev.t < prev {
                return err(&format!("/events/{i}/t"), "events must be sorted by time".into());
            }
            prev = ev.t;
            if let Err((field, m)) = ev.action.validate(&self.storage) {
                let variant = match ev.action {
                    Action::SetPropulsion { .. } => "set_propulsion",
                    Action::FirePulseTrain { .. } => "fire_pulse_train",
                    Action::SetSocRef { .. } => "set_soc_ref",
                };
                let path = if field == variant {
                    format!("/events/{i}/action/{variant}")
                } else {
                    format!("/events/{i}/action/{variant}/{field}")
                };
                return err(&path, m);
            }
        }
        Ok(())
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let scenario: Scenario = match serde_path_to_error::deserialize(de) {
        Ok(s) => s,
        Err(e) => {
            let path = pointer(&e.path().to_string());
            let inner = e.into_inner();
            let (line, column) = (inner.line(), inner.column());
            let message = inner.to_string();
            return Err(match inner.classify() {
                serde_json::error::Category::Data => {
                    let path = match missing_field(&message) {
                        Some(field) if path == "/" => format!("/{field}"),
                        Some(field) => format!("{path}/{field}"),
                        None => path,
                    };
                    ScenarioError::Schema { path, line, message }
                }
                _ => ScenarioError::Parse { line, column, message },
            });
        }
    };
    if let Err((path, message)) = scenario.validate() {
        let line = locate_line(text, &path);
        return Err(ScenarioError::Validation { path, line, message });
    }
    Ok(scenario)
}

/// `generators[0].p_max` → `/generators/0/p_max`; root `.` → `/`.
fn pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return "/".into();
    }
    let mut out = String::new();
    for seg in path.split('.') {
        let mut rest = seg;
        while let Some(open) = rest.find('[') {
            let (name, tail) = rest.split_at(open);
            if !name.is_empty() {
                out.push('/');
                out.push_str(name);
            }
            let close = tail.find(']').unwrap_or(tail.len() - 1);
            out.push('/');
            out.push_str(&tail[1..close]);
            rest = &tail[close + 1..];
        }
        if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

/// 1-based line of the value at JSON-pointer `path`, if it can be found.
fn locate_line(text: &str, path: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut pos = skip_ws(bytes, 0);
    for seg in path.split('/').filter(|s| !s.is_empty()) {
        pos = match bytes.get(pos)? {
            b'{' => find_key(bytes, pos, seg)?,
            b'[' => find_index(bytes, pos, seg.parse().ok()?)?,
            _ => return None,
        };
    }
    Some(text[..pos].matches('\n').count() + 1)
}

fn skip_ws(b: &[u8], mut i: usize) -> usize {
    while i < b.len() && b[i].is_ascii_whitespace() {
        i += 1;
    }
    i
}

/// Index just past the JSON value starting at `i`.
fn skip_value(b: &[u8], i: usize) -> Option<usize> {
    match *b.get(i)? {
        b'"' => {
            let mut j = i + 1;
            while j < b.len() {
                match b[j] {
                    b'\\' => j += 2,
                    b'"' => return Some(j + 1),
                    _ => j += 1,
                }
            }
            None
        }
        b'{' | b'[' => {
            let mut depth = 0usize;
            let mut j = i;
            while j < b.len() {
                match b[j] {
                    b'"' => {
                        j = skip_value(b, j)?;
                        continue;
                    }
                    b'{' | b'[' => depth += 1,
                    b'}' | b']' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some(j + 1);
                        }
                    }
                    _ => {}
                }
                j += 1;
            }
            None
        }
        _ => {
            let mut j = i;
            while j < b.len() && !matches!(b[j], b',' | b'}' | b']') && !b[j].is_ascii_whitespace() {
                j += 1;
            }
            Some(j)
        }
    }
}

fn find_key(b: &[u8], open: usize, key: &str) -> Option<usize> {
    let mut i = skip_ws(b, open + 1);
    while i < b.len() && b[i] != b'}' {
        let key_end = skip_value(b, i)?;
        let name = std::str::from_utf8(&b[i + 1..key_end - 1]).ok()?;
        let colon = skip_ws(b, key_end);
        let val = skip_ws(b, colon + 1);
        if name == key {
            return Some(val);
        }
        i = skip_ws(b, skip_value(b, val)?);
        if b.get(i) == Some(&b',') {
            i = skip_ws(b, i + 1);
        }
    }
    None
}

fn find_index(b: &[u8], open: usize, index: usize) -> Option<usize> {
    let mut i = skip_ws(b, open + 1);
    for _ in 0..index {
        i = skip_ws(b, skip_value(b, i)?);
        if b.get(i) != Some(&b',') {
            return None;
        }
        i = skip_ws(b, i + 1);
    }
    Some(i)
}
