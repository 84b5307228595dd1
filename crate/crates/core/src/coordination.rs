//! Membership views and the thread-safe handle other services wait on.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::proto::{Endpoint, MemberRecord, NodeId, RejectReason};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ViewError {
    #[error("member {0} already present")]
    DuplicateId(NodeId),
    #[error("external endpoint {0} already belongs to another member")]
    DuplicateEndpoint(Endpoint),
}

/// Members known to a node, ordered by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MembershipView {
    records: Vec<MemberRecord>,
    version: u64,
}

impl MembershipView {
    pub fn new() -> Self {
        MembershipView::default()
    }

    pub fn apply(&mut self, record: MemberRecord) -> Result<(), ViewError> {
        let pos = match self.records.binary_search_by_key(&record.id, |r| r.id) {
            Ok(_) => return Err(ViewError::DuplicateId(record.id)),
            Err(pos) => pos,
        };
        if self.records.iter().any(|r| r.external == record.external) {
            return Err(ViewError::DuplicateEndpoint(record.external));
        }
        self.records.insert(pos, record);
        self.version += 1;
        Ok(())
    }

    pub fn records(&self) -> &[MemberRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of updates applied.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, id: NodeId) -> Option<&MemberRecord> {
        self.records.binary_search_by_key(&id, |r| r.id).ok().map(|i| &self.records[i])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.get(id).is_some()
    }

    pub fn worker_count(&self) -> usize {
        self.records.iter().filter(|r| !r.id.is_seed()).count()
    }

    /// The first `n` non-seed members by id, once at least `n` are known.
    pub fn first_members(&self, n: usize) -> Option<Vec<MemberRecord>> {
        let workers: Vec<MemberRecord> = self.records.iter().filter(|r| !r.id.is_seed()).take(n).copied().collect();
        (workers.len() == n).then_some(workers)
    }

    /// The non-seed member whose external address is `dst`'s address. An
    /// exact endpoint match wins; otherwise the lowest id on that IP.
    pub fn owner_of(&self, dst: Endpoint) -> Option<&MemberRecord> {
        let workers = || self.records.iter().filter(|r| !r.id.is_seed());
        workers()
            .find(|r| r.external == dst)
            .or_else(|| workers().find(|r| r.external.ip() == dst.ip()))
    }

    pub fn on_ip(&self, ip: Ipv4Addr) -> impl Iterator<Item = &MemberRecord> {
        self.records.iter().filter(move |r| r.external.ip() == ip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinStatus {
    Joining,
    Joined { id: NodeId, external: Endpoint },
    Rejected(RejectReason),
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WaitError {
    #[error("deadline exceeded with {have} of {want} members")]
    Timeout { have: usize, want: usize },
    #[error("join rejected: {0}")]
    Rejected(RejectReason),
    #[error("could not reach the seed")]
    JoinFailed,
}

#[derive(Debug, Default)]
struct Shared {
    status: Option<JoinStatus>,
    view: MembershipView,
    watchers: Vec<Sender<MemberRecord>>,
    /// Mirror of the agent's listener registry.
    listeners: BTreeSet<Endpoint>,
}

/// A node's membership state, shared between the agent that updates it and
/// any number of waiting threads.
#[derive(Debug, Clone, Default)]
pub struct MembershipHandle {
    inner: Arc<(Mutex<Shared>, Condvar)>,
}

impl MembershipHandle {
    pub fn new() -> Self {
        MembershipHandle::default()
    }

    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn status(&self) -> JoinStatus {
        self.lock().status.unwrap_or(JoinStatus::Joining)
    }

    pub fn view(&self) -> MembershipView {
        self.lock().view.clone()
    }

    pub fn with_view<R>(&self, f: impl FnOnce(&MembershipView) -> R) -> R {
        f(&self.lock().view)
    }

    /// Receives every record applied after this call, once each, in
    /// application order.
    pub fn subscribe(&self) -> Receiver<MemberRecord> {
        let (tx, rx) = mpsc::channel();
        self.lock().watchers.push(tx);
        rx
    }

    pub(crate) fn set_status(&self, status: JoinStatus) {
        self.lock().status = Some(status);
        self.inner.1.notify_all();
    }

    pub(crate) fn apply(&self, record: MemberRecord) -> Result<(), ViewError> {
        let mut shared = self.lock();
        shared.view.apply(record)?;
        shared.watchers.retain(|w| w.send(record).is_ok());
        drop(shared);
        self.inner.1.notify_all();
        Ok(())
    }

    pub(crate) fn set_listeners(&self, listeners: BTreeSet<Endpoint>) {
        self.lock().listeners = listeners;
        self.inner.1.notify_all();
    }

    /// Endpoints local programs have registered with the agent.
    pub fn listeners(&self) -> BTreeSet<Endpoint> {
        self.lock().listeners.clone()
    }

    /// Blocks until the agent has applied a registration for `ep`.
    /// Registration carries no acknowledgement on the wire, so callers that
    /// must not race a connect against it wait here.
    pub fn await_listener(&self, ep: Endpoint, deadline: Option<Instant>) -> bool {
        let mut shared = self.lock();
        while !shared.listeners.contains(&ep) {
            match self.wait(shared, deadline) {
                Some(g) => shared = g,
                None => return false,
            }
        }
        true
    }

    /// Blocks until the join finishes one way or the other.
    pub fn wait_joined(&self, deadline: Option<Instant>) -> Result<(NodeId, Endpoint), WaitError> {
        let mut shared = self.lock();
        loop {
            match shared.status {
                Some(JoinStatus::Joined { id, external }) => return Ok((id, external)),
                Some(JoinStatus::Rejected(r)) => return Err(WaitError::Rejected(r)),
                Some(JoinStatus::Failed) => return Err(WaitError::JoinFailed),
                _ => {}
            }
            shared = self.wait(shared, deadline).ok_or(WaitError::Timeout { have: 0, want: 1 })?;
        }
    }

    /// Blocks until `n` non-seed members are known and returns the first
    /// `n` of them by id.
    pub fn await_members(&self, n: usize, deadline: Option<Instant>) -> Result<Vec<MemberRecord>, WaitError> {
        assert!(n >= 1, "barrier count must be at least 1");
        let mut shared = self.lock();
        loop {
            if let Some(members) = shared.view.first_members(n) {
                return Ok(members);
            }
            match shared.status {
                Some(JoinStatus::Rejected(r)) => return Err(WaitError::Rejected(r)),
                Some(JoinStatus::Failed) => return Err(WaitError::JoinFailed),
                _ => {}
            }
            let have = shared.view.worker_count();
            shared = self.wait(shared, deadline).ok_or(WaitError::Timeout { have, want: n })?;
        }
    }

    fn wait<'a>(&self, guard: MutexGuard<'a, Shared>, deadline: Option<Instant>) -> Option<MutexGuard<'a, Shared>> {
        let cv = &self.inner.1;
        match deadline {
            None => Some(cv.wait(guard).unwrap_or_else(|p| p.into_inner())),
            Some(d) => {
                let left = d.checked_duration_since(Instant::now()).filter(|l| !l.is_zero())?;
                let (g, _) = cv.wait_timeout(guard, left.min(Duration::from_secs(3600))).unwrap_or_else(|p| p.into_inner());
                Some(g)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u32, ep: &str) -> MemberRecord {
        MemberRecord { id: NodeId(id), external: ep.parse().unwrap() }
    }

    #[test]
    fn ordered_insert_bumps_version() {
        let mut v = MembershipView::new();
        for (id, ep) in [(0, "1.1.1.1:7077"), (2, "54.0.0.2:5000"), (1, "54.0.0.1:5000")] {
            v.apply(rec(id, ep)).unwrap();
        }
        v.apply(rec(4, "54.0.0.4:5000")).unwrap();
        let ids: Vec<u32> = v.records().iter().map(|r| r.id.0).collect();
        assert_eq!(ids, [0, 1, 2, 4]);
        assert_eq!(v.version(), 4);
    }

    #[test]
    fn duplicate_update_leaves_view_unchanged() {
        let mut v = MembershipView::new();
        v.apply(rec(1, "54.0.0.1:5000")).unwrap();
        let before = v.clone();
        assert_eq!(v.apply(rec(1, "54.0.0.1:5000")), Err(ViewError::DuplicateId(NodeId(1))));
        assert_eq!(v.apply(rec(3, "54.0.0.1:5000")), Err(ViewError::DuplicateEndpoint("54.0.0.1:5000".parse().unwrap())));
        assert_eq!(v, before);
    }

    #[test]
    fn first_members_skips_seed() {
        let mut v = MembershipView::new();
        v.apply(rec(0, "1.1.1.1:7077")).unwrap();
        v.apply(rec(1, "54.0.0.1:5000")).unwrap();
        assert_eq!(v.first_members(1), Some(vec![rec(1, "54.0.0.1:5000")]));
        assert_eq!(v.first_members(2), None);
    }

    #[test]
    fn owner_prefers_exact_then_lowest_id() {
        let mut v = MembershipView::new();
        v.apply(rec(0, "54.0.0.9:7077")).unwrap();
        v.apply(rec(3, "54.0.0.1:6000")).unwrap();
        v.apply(rec(5, "54.0.0.1:5000")).unwrap();
        assert_eq!(v.owner_of("54.0.0.1:5000".parse().unwrap()).unwrap().id, NodeId(5));
        assert_eq!(v.owner_of("54.0.0.1:8080".parse().unwrap()).unwrap().id, NodeId(3));
        // The seed never owns application endpoints.
        assert!(v.owner_of("54.0.0.9:80".parse().unwrap()).is_none());
    }

    #[test]
    fn await_members_times_out_with_progress() {
        let h = MembershipHandle::new();
        h.set_status(JoinStatus::Joined { id: NodeId(1), external: "54.0.0.1:5000".parse().unwrap() });
        h.apply(rec(1, "54.0.0.1:5000")).unwrap();
        let err = h.await_members(3, Some(Instant::now() + Duration::from_millis(20))).unwrap_err();
        assert_eq!(err, WaitError::Timeout { have: 1, want: 3 });
    }

    #[test]
    fn await_members_wakes_on_apply() {
        let h = MembershipHandle::new();
        let waiter = {
            let h = h.clone();
            std::thread::spawn(move || h.await_members(2, Some(Instant::now() + Duration::from_secs(5))))
        };
        h.apply(rec(2, "54.0.0.2:5000")).unwrap();
        h.apply(rec(1, "54.0.0.1:5000")).unwrap();
        let got = waiter.join().unwrap().unwrap();
        assert_eq!(got.iter().map(|r| r.id.0).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn subscribers_see_each_update_once() {
        let h = MembershipHandle::new();
        let rx = h.subscribe();
        h.apply(rec(1, "54.0.0.1:5000")).unwrap();
        let _ = h.apply(rec(1, "54.0.0.1:5000"));
        h.apply(rec(2, "54.0.0.2:5000")).unwrap();
        let got: Vec<u32> = rx.try_iter().map(|r| r.id.0).collect();
        assert_eq!(got, [1, 2]);
    }
}
