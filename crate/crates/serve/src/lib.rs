//! Command-line tools and the labeling HTTP service.

pub mod alloc;
pub mod backend;
pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod report;
pub mod work;
