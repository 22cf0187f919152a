//! Asynchronous invocation: per-agent operation lanes on a thread pool.
//!
//! Operations of one agent run in submission order. Adjacent operations of
//! the same kind queued behind a running batch are taken together as the
//! next batch; operations of different agents run concurrently.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use crossbeam_channel::{bounded, Receiver, Sender};
use parking_lot::Mutex;

use super::{bump, Inner, NewItem, SearchParams, SearchResult, Store};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::vector::{AgentId, ItemId, ScopeId, Vector};

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Search {
        scopes: Vec<ScopeId>,
        query: Vec<f32>,
        params: SearchParams,
    },
    Insert {
        scope: ScopeId,
        items: Vec<NewItem>,
    },
    Update {
        item: ItemId,
        vector: Vector,
        payload: Vec<u8>,
    },
    Delete {
        item: ItemId,
    },
    CompleteRequest,
}

impl Op {
    fn kind(&self) -> u8 {
        match self {
            Op::Search { .. } => 0,
            Op::Insert { .. } => 1,
            Op::Update { .. } => 2,
            Op::Delete { .. } => 3,
            Op::CompleteRequest => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpOutput {
    Search(SearchResult),
    Inserted(Vec<ItemId>),
    Updated(bool),
    Deleted(bool),
    Completed,
}

/// Completion handle of a submitted operation.
#[derive(Debug)]
pub struct Completion {
    rx: Receiver<Result<OpOutput>>,
}

impl Completion {
    /// Blocks until the operation finishes. Operations cancelled by a
    /// shutdown report [`Error::Shutdown`].
    pub fn wait(self) -> Result<OpOutput> {
        self.rx.recv().unwrap_or(Err(Error::Shutdown))
    }

    pub fn try_get(&self) -> Option<Result<OpOutput>> {
        self.rx.try_recv().ok()
    }
}

type Pending = (Op, Sender<Result<OpOutput>>);

#[derive(Default)]
struct Lane {
    queue: VecDeque<Pending>,
    running: bool,
}

#[derive(Default)]
pub(crate) struct Lanes {
    lanes: Mutex<HashMap<AgentId, Lane>>,
}

impl Lanes {
    /// Drops every queued operation; their handles report a shutdown.
    pub(crate) fn cancel_all(&self) {
        let mut lanes = self.lanes.lock();
        for lane in lanes.values_mut() {
            lane.queue.clear();
        }
    }
}

pub(crate) struct Pools {
    pub(crate) ops: rayon::ThreadPool,
    pub(crate) background: rayon::ThreadPool,
}

impl Pools {
    pub(crate) fn new(cfg: &EngineConfig) -> Self {
        let build = |n: usize, name: &'static str| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .thread_name(move |i| format!("{name}-{i}"))
                .build()
                .expect("thread pool")
        };
        Self {
            ops: build(cfg.search_threads, "ops"),
            background: build(cfg.background_threads, "background"),
        }
    }
}

impl Store {
    /// Queues `op` on the agent's lane and returns its completion handle.
    pub fn submit(&self, agent: AgentId, op: Op) -> Completion {
        let (tx, rx) = bounded(1);
        if let Err(e) = self.inner().check_live() {
            let _ = tx.send(Err(e));
            return Completion { rx };
        }
        let start = {
            let mut lanes = self.inner().lanes.lanes.lock();
            let lane = lanes.entry(agent).or_default();
            lane.queue.push_back((op, tx));
            !std::mem::replace(&mut lane.running, true)
        };
        if start {
            let inner = self.inner().clone();
            self.inner().pools().ops.spawn(move || drain(&inner, agent));
        }
        Completion { rx }
    }

    /// Runs `op` synchronously through the agent's lane.
    pub fn run(&self, agent: AgentId, op: Op) -> Result<OpOutput> {
        self.submit(agent, op).wait()
    }
}

fn drain(inner: &Arc<Inner>, agent: AgentId) {
    loop {
        let batch: Vec<Pending> = {
            let mut lanes = inner.lanes.lanes.lock();
            let lane = lanes.entry(agent).or_default();
            let Some(kind) = lane.queue.front().map(|p| p.0.kind()) else {
                lane.running = false;
                return;
            };
            let mut batch = Vec::new();
            while lane.queue.front().is_some_and(|p| p.0.kind() == kind) {
                batch.push(lane.queue.pop_front().expect("front exists"));
            }
            batch
        };
        bump(&inner.counters.batches, 1);
        execute_batch(inner, agent, batch);
    }
}

fn execute_batch(inner: &Arc<Inner>, agent: AgentId, batch: Vec<Pending>) {
    // Inserts into one scope are coalesced into a single call.
    let all_inserts_one_scope = batch.len() > 1
        && batch.windows(2).all(|w| match (&w[0].0, &w[1].0) {
            (Op::Insert { scope: a, .. }, Op::Insert { scope: b, .. }) => a == b,
            _ => false,
        });
    if all_inserts_one_scope {
        let scope = match &batch[0].0 {
            Op::Insert { scope, .. } => *scope,
            _ => unreachable!("checked above"),
        };
        let mut sizes = Vec::with_capacity(batch.len());
        let mut items = Vec::new();
        let mut senders = Vec::with_capacity(batch.len());
        for (op, tx) in batch {
            if let Op::Insert { items: its, .. } = op {
                sizes.push(its.len());
                items.extend(its);
            }
            senders.push(tx);
        }
        match inner.insert(agent, scope, items) {
            Ok(ids) => {
                let mut rest = ids.as_slice();
                for (n, tx) in sizes.into_iter().zip(senders) {
                    let (mine, tail) = rest.split_at(n);
                    rest = tail;
                    let _ = tx.send(Ok(OpOutput::Inserted(mine.to_vec())));
                }
            }
            Err(e) => {
                let msg = e.to_string();
                let mut first = Some(e);
                for tx in senders {
                    let err = first.take().unwrap_or_else(|| Error::Usage(format!("batch failed: {msg}")));
                    let _ = tx.send(Err(err));
                }
            }
        }
        return;
    }
    for (op, tx) in batch {
        let _ = tx.send(execute(inner, agent, op));
    }
}

fn execute(inner: &Arc<Inner>, agent: AgentId, op: Op) -> Result<OpOutput> {
    inner.check_live()?;
    match op {
        Op::Search { scopes, query, params } => inner.search(agent, &scopes, &query, &params).map(OpOutput::Search),
        Op::Insert { scope, items } => inner.insert(agent, scope, items).map(OpOutput::Inserted),
        Op::Update { item, vector, payload } => inner.update(agent, item, vector, payload).map(OpOutput::Updated),
        Op::Delete { item } => inner.delete(agent, item).map(OpOutput::Deleted),
        Op::CompleteRequest => Store { inner: inner.clone() }.complete_request(agent).map(|_| OpOutput::Completed),
    }
}
