pub mod analytics;
pub mod artifacts;
pub mod blocks;
pub mod config;
pub mod executor;
pub mod llm;
pub mod logmine;
pub mod orchestrator;
pub mod pct;
pub mod prompts;
pub mod stage;
pub mod stages;
pub mod state;
