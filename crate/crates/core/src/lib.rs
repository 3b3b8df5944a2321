//! Hierarchy-annotated dataflow diagrams and their transfer, memory and schedule analysis.

pub mod expr;
pub mod ir;
pub mod stream;
pub mod oracle;
pub mod resources;
pub mod partition;
pub mod models;
pub mod optimize;
pub mod hierarchy;
pub mod config;
pub mod schedule;
pub mod table;
