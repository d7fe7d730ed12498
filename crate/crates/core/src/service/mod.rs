//! Framed protocol, session state machine and the network service.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{decode_frame, encode_frame, Decoded, FrameDecoder, MsgType, ProtocolError, ProtocolFrame};
pub use server::{Client, PipelineDefaults, Server, ServiceConfig, ServiceError};
pub use session::{session_event, session_step, Effect, Session, SessionEvent, SessionState, Step};
