//! Command line tools and the HTTP session API around `memir-core`.

pub mod api;
pub mod cli;
pub mod engine;
pub mod placeholder;
pub mod store;
