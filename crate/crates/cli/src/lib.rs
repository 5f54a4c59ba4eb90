//! Command-line front end and demonstration session service.

pub mod commands;
pub mod config;
pub mod protocol;
pub mod provenance;
pub mod session;
