//! Dependency-driven list scheduler for operator pipelines.
//!
//! Tasks are issued in insertion order on their resource; a task starts once
//! its dependencies finished and every earlier task on the same resource
//! finished. This models in-order hardware queues (tensor cores, SFE, ring)
//! that can run concurrently with each other.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    TensorCore,
    Sfe,
    Ring,
    Interface,
}

impl Resource {
    const ALL: [Resource; 4] = [
        Resource::TensorCore,
        Resource::Sfe,
        Resource::Ring,
        Resource::Interface,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

pub type TaskId = usize;

#[derive(Debug, Clone)]
struct Task {
    label: &'static str,
    resource: Resource,
    duration: f64,
    deps: Vec<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub label: &'static str,
    pub resource: Resource,
    pub start: f64,
    pub finish: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Schedule {
    tasks: Vec<Task>,
}

impl Schedule {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a task and returns its id. Dependencies must already exist.
    pub fn add(
        &mut self,
        label: &'static str,
        resource: Resource,
        duration: f64,
        deps: &[TaskId],
    ) -> TaskId {
        debug_assert!(deps.iter().all(|&d| d < self.tasks.len()));
        debug_assert!(duration >= 0.0);
        self.tasks.push(Task {
            label,
            resource,
            duration,
            deps: deps.to_vec(),
        });
        self.tasks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn run(&self) -> Timeline {
        let mut free = [0.0f64; Resource::ALL.len()];
        let mut slots: Vec<Slot> = Vec::with_capacity(self.tasks.len());
        for t in &self.tasks {
            let ready = t.deps.iter().map(|&d| slots[d].finish).fold(0.0, f64::max);
            let start = ready.max(free[t.resource.index()]);
            let finish = start + t.duration;
            free[t.resource.index()] = finish;
            slots.push(Slot {
                label: t.label,
                resource: t.resource,
                start,
                finish,
            });
        }
        Timeline { slots }
    }
}

#[derive(Debug, Clone)]
pub struct Timeline {
    pub slots: Vec<Slot>,
}

impl Timeline {
    pub fn makespan(&self) -> f64 {
        self.slots.iter().map(|s| s.finish).fold(0.0, f64::max)
    }

    pub fn finish(&self, id: TaskId) -> f64 {
        self.slots[id].finish
    }

    /// Total busy time of a resource.
    pub fn busy(&self, r: Resource) -> f64 {
        self.slots
            .iter()
            .filter(|s| s.resource == r)
            .map(|s| s.finish - s.start)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_sums_durations() {
        let mut s = Schedule::new();
        let a = s.add("a", Resource::TensorCore, 3.0, &[]);
        let b = s.add("b", Resource::Sfe, 2.0, &[a]);
        s.add("c", Resource::Ring, 1.0, &[b]);
        assert_eq!(s.run().makespan(), 6.0);
    }

    #[test]
    fn independent_resources_overlap() {
        let mut s = Schedule::new();
        let a = s.add("a", Resource::TensorCore, 3.0, &[]);
        s.add("b", Resource::TensorCore, 3.0, &[a]);
        s.add("c", Resource::Sfe, 2.0, &[a]);
        let t = s.run();
        assert_eq!(t.makespan(), 6.0);
        assert_eq!(t.busy(Resource::TensorCore), 6.0);
    }

    #[test]
    fn same_resource_is_in_order() {
        let mut s = Schedule::new();
        let a = s.add("a", Resource::Ring, 5.0, &[]);
        let b = s.add("b", Resource::Sfe, 1.0, &[]);
        let c = s.add("c", Resource::Ring, 1.0, &[b]);
        let t = s.run();
        assert_eq!(t.finish(a), 5.0);
        assert_eq!(t.finish(c), 6.0);
    }

    #[test]
    fn empty_schedule() {
        assert_eq!(Schedule::new().run().makespan(), 0.0);
    }
}
