use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use ems_core::mission::{ActionError, MissionError, MissionRunner};
use ems_core::scenario::Scenario;
use ems_core::telemetry::TelemetryFrame;
use serde::Serialize;
use tokio::sync::{broadcast, oneshot};

use crate::command::{Ack, CommandError, OperatorCommand};

pub const DEFAULT_BUFFER: usize = 4096;
/// Steps averaged for the reported cadence.
pub const CADENCE_WINDOW: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Paused,
    Finished,
    Failed(String),
}

/// Mission state plus operator commands, stepped by the caller.
#[derive(Debug, Clone)]
pub struct SessionCore {
    runner: MissionRunner,
    latest: TelemetryFrame,
    paused: bool,
    failure: Option<String>,
}

impl SessionCore {
    pub fn new(scenario: &Scenario) -> Result<Self, MissionError> {
        let runner = MissionRunner::new(scenario)?;
        Ok(Self { latest: runner.initial_frame(), runner, paused: false, failure: None })
    }

    pub fn step_index(&self) -> u64 {
        self.runner.state().step_index
    }

    pub fn latest(&self) -> &TelemetryFrame {
        &self.latest
    }

    pub fn status(&self) -> SessionStatus {
        if let Some(e) = &self.failure {
            SessionStatus::Failed(e.clone())
        } else if self.runner.is_finished() {
            SessionStatus::Finished
        } else if self.paused {
            SessionStatus::Paused
        } else {
            SessionStatus::Running
        }
    }

    /// Applies `cmd` at the current step boundary.
    pub fn apply(&mut self, cmd: &OperatorCommand) -> Result<Ack, CommandError> {
        cmd.validate(&self.runner.scenario().storage)?;
        if !matches!(self.status(), SessionStatus::Running | SessionStatus::Paused) {
            return Err(CommandError::Finished);
        }
        match cmd {
            OperatorCommand::Pause => self.paused = true,
            OperatorCommand::Resume => self.paused = false,
            _ => {
                let action = cmd.action().expect("load command");
                self.runner.apply_action(&action).map_err(|e| match e {
                    ActionError::Busy => CommandError::Busy,
                    ActionError::Finished => CommandError::Finished,
                })?;
            }
        }
        let step = self.step_index();
        Ok(Ack { step, effective_step: step + 1 })
    }

    /// Advances one step unless paused or done.
    pub fn step(&mut self) -> Option<&TelemetryFrame> {
        if self.status() != SessionStatus::Running {
            return None;
        }
        match self.runner.step() {
            Ok(frame) => {
                self.latest = frame;
                Some(&self.latest)
            }
            Err(e) => {
                self.failure = Some(e.to_string());
                None
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    /// Wall-clock multiplier; 1.0 is real time.
    pub speed: f64,
    /// Publish every n-th frame.
    pub decimation: u64,
    /// Frames a subscriber may fall behind before it is dropped.
    pub buffer: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { speed: 1.0, decimation: 1, buffer: DEFAULT_BUFFER }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), CommandError> {
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(CommandError::Validation(format!("speed {} must be > 0", self.speed)));
        }
        if self.decimation == 0 {
            return Err(CommandError::Validation("decimation must be >= 1".into()));
        }
        if self.buffer == 0 {
            return Err(CommandError::Validation("buffer must be >= 1".into()));
        }
        Ok(())
    }
}

/// What the HTTP state endpoint reports.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub status: SessionStatus,
    pub frame: TelemetryFrame,
    /// Mean wall time per step over the last steps, s.
    pub cadence: Option<f64>,
}

struct Shared {
    snapshot: Snapshot,
    stamps: VecDeque<Instant>,
}

struct Request {
    cmd: OperatorCommand,
    reply: oneshot::Sender<Result<Ack, CommandError>>,
}

pub enum StreamItem {
    Frame(Arc<TelemetryFrame>),
    /// The subscriber fell behind by `missed` frames and is disconnected.
    Overflow { missed: u64 },
}

pub struct Subscription {
    rx: Option<broadcast::Receiver<Arc<TelemetryFrame>>>,
}

impl Subscription {
    /// Next frame; `None` once the session ends or after an overflow.
    pub async fn next(&mut self) -> Option<StreamItem> {
        let rx = self.rx.as_mut()?;
        match rx.recv().await {
            Ok(f) => Some(StreamItem::Frame(f)),
            Err(broadcast::error::RecvError::Lagged(missed)) => {
                self.rx = None;
                Some(StreamItem::Overflow { missed })
            }
            Err(broadcast::error::RecvError::Closed) => {
                self.rx = None;
                None
            }
        }
    }
}

/// A session running on its own control thread.
pub struct SessionHandle {
    config: SessionConfig,
    commands: Mutex<mpsc::Sender<Request>>,
    telemetry: broadcast::Sender<Arc<TelemetryFrame>>,
    shared: Arc<Mutex<Shared>>,
}

impl SessionHandle {
    pub fn start(scenario: &Scenario, config: SessionConfig) -> Result<Self, CommandError> {
        config.validate()?;
        let core = SessionCore::new(scenario).map_err(|e| CommandError::Validation(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        let (telemetry, _) = broadcast::channel(config.buffer);
        let shared = Arc::new(Mutex::new(Shared {
            snapshot: Snapshot { status: core.status(), frame: core.latest().clone(), cadence: None },
            stamps: VecDeque::with_capacity(CADENCE_WINDOW + 1),
        }));
        let period = Duration::from_secs_f64(scenario.controller.sample_time / config.speed);
        let loop_ = ControlLoop { core, rx, telemetry: telemetry.clone(), shared: shared.clone(), period, config };
        thread::Builder::new()
            .name("ems-session".into())
            .spawn(move || loop_.run())
            .map_err(|e| CommandError::Validation(format!("cannot start control thread: {e}")))?;
        Ok(Self { config, commands: Mutex::new(tx), telemetry, shared })
    }

    pub fn config(&self) -> SessionConfig {
        self.config
    }

    pub async fn command(&self, cmd: OperatorCommand) -> Result<Ack, CommandError> {
        let (reply, rx) = oneshot::channel();
        self.commands
            .lock()
            .expect("command lock")
            .send(Request { cmd, reply })
            .map_err(|_| CommandError::Finished)?;
        rx.await.unwrap_or(Err(CommandError::Finished))
    }

    pub fn subscribe(&self) -> Subscription {
        Subscription { rx: Some(self.telemetry.subscribe()) }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.shared.lock().expect("state lock").snapshot.clone()
    }
}

struct ControlLoop {
    core: SessionCore,
    rx: mpsc::Receiver<Request>,
    telemetry: broadcast::Sender<Arc<TelemetryFrame>>,
    shared: Arc<Mutex<Shared>>,
    period: Duration,
    config: SessionConfig,
}

impl ControlLoop {
    fn handle(&mut self, req: Request) {
        let result = self.core.apply(&req.cmd);
        let _ = req.reply.send(result);
    }

    fn publish_status(&self) {
        self.shared.lock().expect("state lock").snapshot.status = self.core.status();
    }

    fn run(mut self) {
        let mut base = Instant::now();
        let mut ticks: u32 = 0;
        loop {
            loop {
                match self.rx.try_recv() {
                    Ok(req) => self.handle(req),
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => return,
                }
            }
            match self.core.status() {
                SessionStatus::Running => {}
                SessionStatus::Paused => {
                    self.publish_status();
                    match self.rx.recv_timeout(Duration::from_millis(50)) {
                        Ok(req) => self.handle(req),
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => return,
                    }
                    if self.core.status() == SessionStatus::Running {
                        base = Instant::now();
                        ticks = 0;
                        self.shared.lock().expect("state lock").stamps.clear();
                    }
                    continue;
                }
                SessionStatus::Finished | SessionStatus::Failed(_) => break,
            }

            let frame = self.core.step().cloned();
            let now = Instant::now();
            {
                let mut sh = self.shared.lock().expect("state lock");
                sh.snapshot.status = self.core.status();
                if let Some(f) = &frame {
                    sh.snapshot.frame = f.clone();
                }
                sh.stamps.push_back(now);
                if sh.stamps.len() > CADENCE_WINDOW + 1 {
                    sh.stamps.pop_front();
                }
                if sh.stamps.len() > 1 {
                    let span = now.duration_since(sh.stamps[0]).as_secs_f64();
                    sh.snapshot.cadence = Some(span / (sh.stamps.len() - 1) as f64);
                }
            }
            if let Some(f) = frame {
                if f.step % self.config.decimation == 0 || self.core.status() != SessionStatus::Running {
                    // no receivers is fine
                    let _ = self.telemetry.send(Arc::new(f));
                }
            }

            ticks += 1;
            let deadline = base + self.period * ticks;
            let now = Instant::now();
            if deadline > now {
                thread::sleep(deadline - now);
            }
        }
        self.publish_status();
        // keep answering so late commands get a clean rejection
        while let Ok(req) = self.rx.recv_timeout(Duration::from_millis(10)) {
            self.handle(req);
        }
    }
}

/// All sessions of one service instance.
#[derive(Default)]
pub struct SessionManager {
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
}

impl SessionManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start(&self, scenario: &Scenario, config: SessionConfig) -> Result<String, CommandError> {
        let handle = SessionHandle::start(scenario, config)?;
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1);
        self.sessions.write().expect("session table").insert(id.clone(), Arc::new(handle));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionHandle>, CommandError> {
        self.sessions
            .read()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| CommandError::UnknownSession(id.to_string()))
    }

    pub async fn command(&self, id: &str, cmd: OperatorCommand) -> Result<Ack, CommandError> {
        self.get(id)?.command(cmd).await
    }
}
