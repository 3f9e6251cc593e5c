//! IO, formats and orchestration around `waon-core`.
pub mod cli;
pub mod config;
pub mod emb;
pub mod fetch;
pub mod html;
pub mod images;
pub mod manifest;
pub mod pairs;
pub mod pipeline;
pub mod records;
pub mod robots;
pub mod shards;
pub mod sidecar;
pub mod warc;
