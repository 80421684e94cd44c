//! Message envelopes exchanged between agents and the transport that
//! carries them.

use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::AgentRole;

pub const MESSAGE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub correlation_id: String,
    pub iteration: u32,
    pub sender: AgentRole,
    pub kind: String,
    pub payload: serde_json::Value,
    pub schema_version: u32,
    pub timestamp: DateTime<Utc>,
}

/// Carries envelopes. The in-process bus keeps them in order; a queue-backed
/// transport can replace it without touching payloads.
pub trait Transport: Send + Sync {
    fn send(&self, message: AgentMessage) -> Result<(), String>;
}

#[derive(Debug, Default)]
pub struct InProcessBus {
    log: Mutex<Vec<AgentMessage>>,
}

impl InProcessBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn messages(&self) -> Vec<AgentMessage> {
        self.log.lock().expect("bus lock poisoned").clone()
    }
}

impl Transport for InProcessBus {
    fn send(&self, message: AgentMessage) -> Result<(), String> {
        if message.schema_version < 1 {
            return Err("schema_version must be at least 1".into());
        }
        self.log.lock().expect("bus lock poisoned").push(message);
        Ok(())
    }
}
