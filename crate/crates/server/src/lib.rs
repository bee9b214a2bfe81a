//! HTTP/JSON front end for the identity gateway, plus an in-process adapter
//! that exposes the same operations without a socket.

mod http;
mod inprocess;

pub use http::{router, spawn, start, RunningServer, ServeError};
pub use inprocess::InProcess;
