//! Live missions paced against the wall clock, driven over HTTP.

pub mod command;
pub mod http;
pub mod session;

pub use command::{Ack, CommandError, OperatorCommand};
pub use http::{router, serve};
pub use session::{SessionConfig, SessionCore, SessionHandle, SessionManager, SessionStatus, StreamItem, Subscription};
