//! Files, configuration and command-line front end for `midlevel-core`.

pub mod commands;
pub mod config;
pub mod container;
pub mod csv;
pub mod manifest;
pub mod persist;
