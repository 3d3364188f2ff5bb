use crate::comm::Comm;
use crate::profiling::Profiler;
use crate::vectors::{Collective, ReductionMode};

/// Everything a task needs to take part in collective solver operations.
pub struct TaskContext<'a> {
    pub coll: Collective<'a>,
    pub prof: Profiler,
}

impl<'a> TaskContext<'a> {
    pub fn new(comm: &'a Comm, mode: ReductionMode) -> Self {
        Self {
            coll: Collective::new(comm, mode),
            prof: Profiler::new(),
        }
    }

    pub fn comm(&self) -> &'a Comm {
        self.coll.comm()
    }

    pub fn fused(&self) -> bool {
        self.coll.mode().fused_ops
    }
}
