//! Assignment of each downloaded outer/inner pair to fleet devices.
//!
//! Devices are ranked by [`CapacityScore`], ties broken by name (the
//! lexicographically smaller name ranks higher). Outer videos go to the
//! strongest device a branch allows; inner videos go to the remaining ones.

use std::cmp::{Ordering, Reverse};

use thiserror::Error;

use crate::model::{CapacityScore, Command, HardwareInfo};
use crate::segment::segment_name;

/// Where an assignment runs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    /// The master itself.
    Local,
    /// A worker, by endpoint id.
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceState {
    pub target: Target,
    pub name: String,
    pub hw: HardwareInfo,
    pub busy: bool,
    pub queue_len: usize,
}

impl DeviceState {
    pub fn new(target: Target, name: impl Into<String>, hw: HardwareInfo) -> Self {
        DeviceState { target, name: name.into(), hw, busy: false, queue_len: 0 }
    }

    pub fn rank(&self) -> (CapacityScore, Reverse<&str>) {
        (self.hw.capacity_score(), Reverse(self.name.as_str()))
    }

    fn cmp_rank(&self, other: &DeviceState) -> Ordering {
        self.rank().cmp(&other.rank())
    }

    fn assign(&mut self) {
        self.queue_len += 1;
        self.busy = true;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub video_name: String,
    pub target: Target,
    pub command: Command,
    pub segment_count: usize,
}

impl Assignment {
    fn analyse(video: &str, target: Target) -> Self {
        Assignment { video_name: video.to_string(), target, command: Command::Analyse, segment_count: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulePolicy {
    pub segmentation: bool,
    /// Segments per inner video when segmentation is on.
    pub segment_count: usize,
}

impl Default for SchedulePolicy {
    fn default() -> Self {
        SchedulePolicy { segmentation: false, segment_count: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("no connected device with endpoint id `{0}`")]
    UnknownEndpoint(String),
    #[error("device `{0}` has no outstanding work")]
    NothingOutstanding(String),
}

fn strongest<'a>(devices: impl Iterator<Item = &'a DeviceState>) -> Option<&'a DeviceState> {
    devices.max_by(|a, b| a.cmp_rank(b))
}

/// The no-segmentation, multi-worker decision for one video. For the inner
/// video `outer` is the device already holding the outer one: it is excluded,
/// and so is anything ranked above it.
fn pick(master: &DeviceState, workers: &[DeviceState], outer: Option<&DeviceState>) -> Target {
    let allowed = |d: &&DeviceState| match outer {
        Some(o) => d.target != o.target && d.cmp_rank(o) != Ordering::Greater,
        None => true,
    };
    let master_allowed = allowed(&master);
    let master_strongest = workers.iter().all(|w| master.cmp_rank(w) == Ordering::Greater);
    if master_strongest && master_allowed && !master.busy {
        return Target::Local;
    }
    if let Some(w) = strongest(workers.iter().filter(allowed).filter(|w| !w.busy)) {
        return w.target.clone();
    }
    if master_allowed && !master.busy {
        return Target::Local;
    }
    let candidates: Vec<&DeviceState> = workers.iter().filter(allowed).collect();
    match candidates.iter().map(|w| w.queue_len).min() {
        Some(shortest) => strongest(candidates.into_iter().filter(|w| w.queue_len == shortest))
            .map(|w| w.target.clone())
            .expect("non-empty candidate set"),
        None if master_allowed => Target::Local,
        // the outer went to the weakest device; the inner follows it
        None => outer.map_or(Target::Local, |o| o.target.clone()),
    }
}

fn device_mut<'a>(master: &'a mut DeviceState, workers: &'a mut [DeviceState], t: &Target) -> &'a mut DeviceState {
    if *t == Target::Local {
        master
    } else {
        workers.iter_mut().find(|w| &w.target == t).expect("target chosen from fleet")
    }
}

fn device<'a>(master: &'a DeviceState, workers: &'a [DeviceState], t: &Target) -> &'a DeviceState {
    if *t == Target::Local {
        master
    } else {
        workers.iter().find(|w| &w.target == t).expect("target chosen from fleet")
    }
}

/// Decides where the outer and inner video of a freshly downloaded pair run.
/// Pure: the device table is not modified.
pub fn schedule_pair(
    master: &DeviceState,
    workers: &[DeviceState],
    outer: &str,
    inner: &str,
    policy: SchedulePolicy,
) -> Vec<Assignment> {
    match workers.len() {
        0 => vec![Assignment::analyse(outer, Target::Local), Assignment::analyse(inner, Target::Local)],
        1 => {
            let worker = &workers[0];
            let (strong, weak) = if master.cmp_rank(worker) == Ordering::Greater {
                (Target::Local, worker.target.clone())
            } else {
                (worker.target.clone(), Target::Local)
            };
            vec![Assignment::analyse(outer, strong), Assignment::analyse(inner, weak)]
        }
        _ if policy.segmentation => {
            let mut ranked: Vec<&DeviceState> = std::iter::once(master).chain(workers).collect();
            ranked.sort_by(|a, b| b.cmp_rank(a));
            let count = policy.segment_count.max(1);
            let remaining = &ranked[1..];
            let mut out = vec![Assignment::analyse(outer, ranked[0].target.clone())];
            out.extend((0..count).map(|i| Assignment {
                video_name: segment_name(inner, i),
                target: remaining[i % remaining.len()].target.clone(),
                command: Command::Segment,
                segment_count: count,
            }));
            out
        }
        _ => {
            let mut m = master.clone();
            let mut ws = workers.to_vec();
            let outer_target = pick(&m, &ws, None);
            device_mut(&mut m, &mut ws, &outer_target).assign();
            let inner_target = pick(&m, &ws, Some(device(&m, &ws, &outer_target)));
            vec![Assignment::analyse(outer, outer_target), Assignment::analyse(inner, inner_target)]
        }
    }
}

/// Where a single re-queued video should run, using the no-segmentation rules.
pub fn schedule_single(master: &DeviceState, workers: &[DeviceState]) -> Target {
    match workers.len() {
        0 => Target::Local,
        _ => pick(master, workers, None),
    }
}

/// The master's view of the fleet.
#[derive(Debug, Clone)]
pub struct DeviceTable {
    pub master: DeviceState,
    pub workers: Vec<DeviceState>,
}

impl DeviceTable {
    pub fn new(master: DeviceState) -> Self {
        DeviceTable { master, workers: Vec::new() }
    }

    pub fn add_worker(&mut self, state: DeviceState) {
        self.workers.retain(|w| w.target != state.target);
        self.workers.push(state);
    }

    pub fn remove_worker(&mut self, endpoint: &str) -> Option<DeviceState> {
        let pos = self.workers.iter().position(|w| w.target == Target::Remote(endpoint.to_string()))?;
        Some(self.workers.remove(pos))
    }

    pub fn get(&self, target: &Target) -> Option<&DeviceState> {
        match target {
            Target::Local => Some(&self.master),
            t => self.workers.iter().find(|w| &w.target == t),
        }
    }

    fn get_mut(&mut self, target: &Target) -> Result<&mut DeviceState, SchedulerError> {
        match target {
            Target::Local => Ok(&mut self.master),
            Target::Remote(id) => self
                .workers
                .iter_mut()
                .find(|w| &w.target == target)
                .ok_or_else(|| SchedulerError::UnknownEndpoint(id.clone())),
        }
    }

    pub fn schedule_pair(&self, outer: &str, inner: &str, policy: SchedulePolicy) -> Vec<Assignment> {
        schedule_pair(&self.master, &self.workers, outer, inner, policy)
    }

    pub fn schedule_single(&self) -> Target {
        schedule_single(&self.master, &self.workers)
    }

    pub fn on_assigned(&mut self, target: &Target) -> Result<(), SchedulerError> {
        self.get_mut(target)?.assign();
        Ok(())
    }

    /// A device finished one video: its queue shrinks and it turns idle at zero.
    pub fn on_worker_result(&mut self, target: &Target) -> Result<&DeviceState, SchedulerError> {
        let d = self.get_mut(target)?;
        if d.queue_len == 0 {
            return Err(SchedulerError::NothingOutstanding(d.name.clone()));
        }
        d.queue_len -= 1;
        d.busy = d.queue_len > 0;
        Ok(d)
    }
}
