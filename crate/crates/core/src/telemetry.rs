//! Per-step telemetry frames and their CSV / JSON encodings.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::dispatch::DispatchMode;
use crate::plant::{PlantFlags, PlantState};

pub const FLAG_ES_POWER_CLAMPED: &str = "es_power_clamped";
pub const FLAG_ES_ENERGY_CLAMPED: &str = "es_energy_clamped";
pub const FLAG_GEN_LIMIT_HIT: &str = "gen_limit_hit";
pub const FLAG_MPC_RELAXED: &str = "mpc_energy_relaxed";
pub const FLAG_MPC_NOT_CONVERGED: &str = "mpc_not_converged";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameFlags {
    pub plant: PlantFlags,
    pub mpc_relaxed: bool,
    pub mpc_not_converged: bool,
}

impl FrameFlags {
    pub fn tokens(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.plant.es_power_clamped {
            out.push(FLAG_ES_POWER_CLAMPED);
        }
        if self.plant.es_energy_clamped {
            out.push(FLAG_ES_ENERGY_CLAMPED);
        }
        if self.plant.gen_limit_hit {
            out.push(FLAG_GEN_LIMIT_HIT);
        }
        if self.mpc_relaxed {
            out.push(FLAG_MPC_RELAXED);
        }
        if self.mpc_not_converged {
            out.push(FLAG_MPC_NOT_CONVERGED);
        }
        out
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let mut f = Self::default();
        for tok in s.split(';').filter(|t| !t.is_empty()) {
            match tok {
                FLAG_ES_POWER_CLAMPED => f.plant.es_power_clamped = true,
                FLAG_ES_ENERGY_CLAMPED => f.plant.es_energy_clamped = true,
                FLAG_GEN_LIMIT_HIT => f.plant.gen_limit_hit = true,
                FLAG_MPC_RELAXED => f.mpc_relaxed = true,
                FLAG_MPC_NOT_CONVERGED => f.mpc_not_converged = true,
                other => return Err(format!("unknown flag `{other}`")),
            }
        }
        Ok(f)
    }
}

/// One reported step. Currents are `1000·P / V_bus` at the nominal bus voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryFrame {
    pub step: u64,
    pub t: f64,
    pub p_gen: Vec<f64>,
    pub p_es_bus: f64,
    pub e_es: f64,
    pub soc_pct: f64,
    pub p_pr: f64,
    pub p_ppl: f64,
    pub i_gen: Vec<f64>,
    pub i_es: f64,
    pub i_pr: f64,
    pub i_ppl: f64,
    pub mode: DispatchMode,
    pub flags: FrameFlags,
    /// Active SOC reference, if tracking is enabled. Not part of the CSV.
    pub e_ref: Option<f64>,
}

impl TelemetryFrame {
    pub fn p_load(&self) -> f64 {
        self.p_pr + self.p_ppl
    }

    pub fn balance_residual(&self) -> f64 {
        self.p_gen.iter().sum::<f64>() + self.p_es_bus - self.p_load()
    }
}

/// Builds the reporting frame for `state`.
pub fn to_telemetry(
    state: &PlantState,
    v_bus_nominal: f64,
    e_capacity: f64,
    mode: DispatchMode,
    flags: FrameFlags,
    e_ref: Option<f64>,
) -> TelemetryFrame {
    assert!(v_bus_nominal > 0.0, "bus voltage must be positive");
    let amps = |p: f64| 1000.0 * p / v_bus_nominal;
    TelemetryFrame {
        step: state.step_index,
        t: state.t,
        i_gen: state.p_gen.iter().map(|&p| amps(p)).collect(),
        p_gen: state.p_gen.clone(),
        p_es_bus: state.p_es_bus,
        e_es: state.e_es,
        soc_pct: 100.0 * state.e_es / e_capacity,
        p_pr: state.p_pr,
        p_ppl: state.p_ppl,
        i_es: amps(state.p_es_bus),
        i_pr: amps(state.p_pr),
        i_ppl: amps(state.p_ppl),
        mode,
        flags,
        e_ref,
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] io::Error),
    #[error("trace line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub fn csv_header(generators: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=generators).map(|i| format!("p_gen{i}")));
    cols.extend(["p_es_bus", "e_es", "soc_pct", "p_pr", "p_ppl"].map(String::from));
    cols.extend((1..=generators).map(|i| format!("i_gen{i}")));
    cols.extend(["i_es", "i_pr", "i_ppl", "mode", "flags"].map(String::from));
    cols.join(",")
}

/// Six-decimal fixed formatting; values that round to zero print unsigned.
pub fn fmt6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

pub fn csv_row(frame: &TelemetryFrame) -> String {
    let mut row = String::with_capacity(160);
    let mut push = |x: f64| {
        let _ = write!(row, "{},", fmt6(x));
    };
    push(frame.t);
    frame.p_gen.iter().for_each(|&p| push(p));
    push(frame.p_es_bus);
    push(frame.e_es);
    push(frame.soc_pct);
    push(frame.p_pr);
    push(frame.p_ppl);
    frame.i_gen.iter().for_each(|&i| push(i));
    push(frame.i_es);
    push(frame.i_pr);
    push(frame.i_ppl);
    row.push_str(frame.mode.token());
    row.push(',');
    row.push_str(&frame.flags.tokens().join(";"));
    row
}

/// Writes the CSV trace. An empty trace writes the two-generator header only.
pub fn write_trace_to<W: Write>(trace: &[TelemetryFrame], mut out: W) -> io::Result<()> {
    let gens = trace.first().map_or(2, |f| f.p_gen.len());
    writeln!(out, "{}", csv_header(gens))?;
    for frame in trace {
        writeln!(out, "{}", csv_row(frame))?;
    }
    out.flush()
}

pub fn write_trace(trace: &[TelemetryFrame], path: impl AsRef<Path>) -> Result<(), TraceError> {
    let file = std::fs::File::create(path)?;
    write_trace_to(trace, io::BufWriter::new(file))?;
    Ok(())
}

/// Parses a CSV trace back into frames. `step` is the row index and `e_ref`
/// is left empty; both are not part of the file.
pub fn read_trace(text: &str) -> Result<Vec<TelemetryFrame>, TraceError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(TraceError::Malformed { line: 1, message: "missing header".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    let gens = cols.iter().filter(|c| c.starts_with("p_gen")).count();
    if header != csv_header(gens) {
        return Err(TraceError::Malformed { line: 1, message: format!("unexpected header `{header}`") });
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let bad = |message: String| TraceError::Malformed { line: lineno, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad(format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", cols[i])));
        let mut c = 0;
        let mut next = || {
            c += 1;
            num(c - 1)
        };
        let t = next()?;
        let p_gen = (0..gens).map(|_| next()).collect::<Result<Vec<_>, _>>()?;
        let (p_es_bus, e_es, soc_pct, p_pr, p_ppl) = (next()?, next()?, next()?, next()?, next()?);
        let i_gen = (0..gens).map(|_| next()).collect::<Result<Vec<_>, _>>()?;
        let (i_es, i_pr, i_ppl) = (next()?, next()?, next()?);
        let n = fields.len();
        let mode = DispatchMode::from_token(fields[n - 2]).ok_or_else(|| bad(format!("unknown mode `{}`", fields[n - 2])))?;
        let flags = FrameFlags::parse(fields[n - 1]).map_err(bad)?;
        out.push(TelemetryFrame {
            step: idx as u64,
            t,
            p_gen,
            p_es_bus,
            e_es,
            soc_pct,
            p_pr,
            p_ppl,
            i_gen,
            i_es,
            i_pr,
            i_ppl,
            mode,
            flags,
            e_ref: None,
        });
    }
    Ok(out)
}

/// JSON object with the CSV column names (numbers unrounded) plus `step`.
pub fn frame_to_json(frame: &TelemetryFrame) -> Value {
    let mut m = Map::new();
    m.insert("step".into(), frame.step.into());
    m.insert("t".into(), frame.t.into());
    for (i, &p) in frame.p_gen.iter().enumerate() {
        m.insert(format!("p_gen{}", i + 1), p.into());
    }
    m.insert("p_es_bus".into(), frame.p_es_bus.into());
    m.insert("e_es".into(), frame.e_es.into());
    m.insert("soc_pct".into(), frame.soc_pct.into());
    m.insert("p_pr".into(), frame.p_pr.into());
    m.insert("p_ppl".into(), frame.p_ppl.into());
    for (i, &a) in frame.i_gen.iter().enumerate() {
        m.insert(format!("i_gen{}", i + 1), a.into());
    }
    m.insert("i_es".into(), frame.i_es.into());
    m.insert("i_pr".into(), frame.i_pr.into());
    m.insert("i_ppl".into(), frame.i_ppl.into());
    m.insert("mode".into(), frame.mode.token().into());
    m.insert("flags".into(), frame.flags.tokens().join(";").into());
    Value::Object(m)
}
