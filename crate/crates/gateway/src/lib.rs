//! Persistence, service endpoints, scenario harness and CLI for the
//! dynaswap core.

pub mod api;
pub mod audit;
pub mod codec;
pub mod config;
pub mod fixture;
pub mod fsio;
pub mod gateway;
pub mod persist;
pub mod ratelimit;
pub mod scanner;
pub mod scenario;
pub mod server;

pub use api::{AdminOp, ErrorKind, Request, Response};
pub use config::{Config, MasterKey};
pub use gateway::{Clock, Gateway, GatewayError};
