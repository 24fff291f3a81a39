//! Ring AllReduce process group over TCP or in-process channels.

use std::time::Duration;

pub mod coordinator;
pub mod error;
pub mod frame;
pub mod group;
pub mod link;
pub mod oracle;

pub use coordinator::{
    BarrierEvent, Coordinator, CoordinatorOptions, CoordinatorReport, WorkerExit,
};
pub use error::CommError;
pub use group::{
    chunk_range, local_world, rendezvous, CommStats, GroupOptions, LocalWorld, ProcessGroup,
};
pub use oracle::naive_allreduce_oracle;

/// Default bound on rendezvous, barriers and single receives.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
