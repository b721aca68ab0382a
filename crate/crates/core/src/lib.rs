pub mod backends;
pub mod bench;
pub mod control;
pub mod error;
pub mod frame;
pub mod resources;
pub mod inferlib;
pub mod runtime;
pub mod service;
