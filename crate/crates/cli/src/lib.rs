//! Pipeline driver and HTTP service.

pub mod pipeline;
pub mod server;
