//! A user-space crash-consistent file system on simulated persistent memory.
//!
//! Crash consistency comes from synchronous soft updates: every system call
//! is durable by the time it returns, and the legal ordering of durable
//! updates is encoded in object typestates so that ordering violations fail
//! to compile. The crate also ships a crash-state enumeration harness and an
//! explicit-state bounded model checker over the same transition system.

pub mod crashcheck;
pub mod error;
pub mod fsops;
pub mod layout;
pub mod model;
pub mod pmem;
pub mod typestate;
pub mod volatile;

pub use error::FsError;
pub use fsops::Fs;
pub use layout::Geometry;
pub use pmem::PmDevice;
