//! Optional record of which encoders and syntheses a run touched.

use std::sync::{Arc, Mutex};

use crate::domain::DomainId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    /// A style encoder ran; `key` names its parameter group.
    StyleEncoded {
        key: String,
        image_domain: DomainId,
    },
    Synthesized {
        content_source: String,
        style_source: String,
        content_domain: DomainId,
        style_domain: DomainId,
        training: bool,
    },
    LossComputed {
        domain: DomainId,
        source: String,
    },
}

/// Cheaply cloneable shared event log.
#[derive(Clone, Debug, Default)]
pub struct CallTrace {
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl CallTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, e: TraceEvent) {
        self.events.lock().expect("trace lock").push(e);
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().expect("trace lock").clone()
    }

    pub fn clear(&self) {
        self.events.lock().expect("trace lock").clear();
    }

    pub fn style_keys(&self) -> Vec<String> {
        self.events()
            .into_iter()
            .filter_map(|e| match e {
                TraceEvent::StyleEncoded { key, .. } => Some(key),
                _ => None,
            })
            .collect()
    }
}
