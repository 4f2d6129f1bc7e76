//! Pipeline driver and HTTP service for lumenforge.

pub mod cli;
pub mod service;
pub mod sweep;
