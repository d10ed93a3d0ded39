//! Desktop agent runtime: a host agent that decomposes requests, per-app
//! agents that observe, plan, and act, and the supporting perception,
//! execution, memory, and session layers.

pub mod appagent;
pub mod blackboard;
pub mod detection;
pub mod domain;
pub mod hostagent;
pub mod knowledge;
pub mod planner;
pub mod puppeteer;
pub mod runtime;
pub mod safeguard;
pub mod session;
pub mod simenv;
pub mod speculative;
