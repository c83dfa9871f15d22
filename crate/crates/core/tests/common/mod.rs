#![allow(dead_code)]

use std::sync::Arc;

use classwatch_core::emotion::{Architecture, ClassifierParams};
use classwatch_core::gateway::{Gateway, GatewayConfig};
use classwatch_core::matcher::MatcherConfig;
use classwatch_core::session::SessionEngine;
use classwatch_core::store::JournalStore;

pub fn untrained() -> Arc<ClassifierParams> {
    Arc::new(ClassifierParams::init(Architecture::default(), 0).unwrap())
}

pub fn engine() -> (Arc<SessionEngine>, Arc<JournalStore>) {
    let store = Arc::new(JournalStore::in_memory());
    let engine = SessionEngine::new(store.clone(), untrained(), MatcherConfig::default());
    (Arc::new(engine), store)
}

pub fn gateway() -> (Gateway, Arc<JournalStore>) {
    let (engine, store) = engine();
    (Gateway::new(engine, GatewayConfig::default()).unwrap(), store)
}
