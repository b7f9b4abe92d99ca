//! Library surface of the monitor CLI: proxy server, wire handling, TLS
//! termination and configuration. The `wpmon` binary is a thin front-end
//! over these modules; integration tests drive them directly.

pub mod config;
pub mod httpwire;
pub mod proxy;
pub mod tls;
