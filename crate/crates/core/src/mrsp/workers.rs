//! Simulated sequence-parallel ranks.
//!
//! Each rank is a long-lived OS thread holding a private copy of the frozen
//! encoder. Callers fan work out to every rank and block until all ranks have
//! replied, so every public operation acts as a barrier.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{invalid, Error, Result};
use crate::policy::EncoderParams;

type Job = Box<dyn FnOnce(&WorkerCtx) + Send>;

/// What a rank sees while running a job.
pub struct WorkerCtx {
    pub rank: usize,
    pub encoder: EncoderParams,
    pub(crate) stats: Arc<Counters>,
}

impl WorkerCtx {
    pub(crate) fn count_encoded(&self, frames: usize) {
        self.stats.encoder_invocations.fetch_add(frames as u64, Ordering::Relaxed);
        self.stats.frames_per_rank[self.rank].fetch_add(frames as u64, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub(crate) struct Counters {
    pub(crate) encoder_invocations: AtomicU64,
    pub(crate) gather_bytes: AtomicU64,
    pub(crate) pad_reads: AtomicU64,
    pub(crate) frames_per_rank: Vec<AtomicU64>,
}

/// Snapshot of the group's instrumentation counters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupStats {
    /// Frames pushed through any rank's encoder.
    pub encoder_invocations: u64,
    /// Simulated all-gather traffic.
    pub gather_bytes: u64,
    /// Reads of padding positions during prefill; must stay zero.
    pub pad_reads: u64,
    pub frames_per_rank: Vec<u64>,
}

/// A rank's reply, tagged with its rank and how long it computed.
#[derive(Debug)]
pub struct Reply<T> {
    pub rank: usize,
    pub busy: Duration,
    pub value: T,
}

/// Forces ranks to deliver their replies in a fixed order.
struct Turnstile {
    order: Vec<usize>,
    next: Mutex<usize>,
    turn: Condvar,
}

impl Turnstile {
    fn deliver(&self, rank: usize, send: impl FnOnce()) {
        let mut next = self.next.lock().unwrap();
        while self.order[*next] != rank {
            next = self.turn.wait(next).unwrap();
        }
        send();
        *next += 1;
        self.turn.notify_all();
    }
}

pub struct WorkerGroup {
    senders: Mutex<Vec<Sender<Job>>>,
    handles: Vec<JoinHandle<()>>,
    counters: Arc<Counters>,
    sp_degree: usize,
}

impl std::fmt::Debug for WorkerGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerGroup").field("sp_degree", &self.sp_degree).finish()
    }
}

impl WorkerGroup {
    pub fn new(sp_degree: usize, encoder: &EncoderParams) -> Result<Self> {
        if sp_degree == 0 {
            return Err(invalid!("sp_degree must be at least 1"));
        }
        let counters = Arc::new(Counters {
            encoder_invocations: AtomicU64::new(0),
            gather_bytes: AtomicU64::new(0),
            pad_reads: AtomicU64::new(0),
            frames_per_rank: (0..sp_degree).map(|_| AtomicU64::new(0)).collect(),
        });
        let mut senders = Vec::with_capacity(sp_degree);
        let mut handles = Vec::with_capacity(sp_degree);
        for rank in 0..sp_degree {
            let (tx, rx): (Sender<Job>, Receiver<Job>) = mpsc::channel();
            let ctx = WorkerCtx {
                rank,
                encoder: encoder.clone(),
                stats: Arc::clone(&counters),
            };
            let handle = std::thread::Builder::new()
                .name(format!("sp-rank-{rank}"))
                .spawn(move || {
                    for job in rx {
                        job(&ctx);
                    }
                })
                .map_err(|e| Error::State(format!("failed to spawn rank {rank}: {e}")))?;
            senders.push(tx);
            handles.push(handle);
        }
        Ok(WorkerGroup {
            senders: Mutex::new(senders),
            handles,
            counters,
            sp_degree,
        })
    }

    pub fn sp_degree(&self) -> usize {
        self.sp_degree
    }

    /// Runs `task` on every rank and returns the replies in arrival order.
    ///
    /// With `completion_order`, ranks deliver strictly in that order regardless
    /// of when they finish computing.
    pub fn run<T, F>(&self, task: F, completion_order: Option<&[usize]>) -> Result<Vec<Reply<T>>>
    where
        T: Send + 'static,
        F: Fn(&WorkerCtx) -> T + Send + Sync + 'static,
    {
        let turnstile = match completion_order {
            Some(order) => {
                let mut sorted = order.to_vec();
                sorted.sort_unstable();
                if sorted != (0..self.sp_degree).collect::<Vec<_>>() {
                    return Err(invalid!("completion order {order:?} is not a permutation of 0..{}", self.sp_degree));
                }
                Some(Arc::new(Turnstile {
                    order: order.to_vec(),
                    next: Mutex::new(0),
                    turn: Condvar::new(),
                }))
            }
            None => None,
        };
        let task = Arc::new(task);
        let (reply_tx, reply_rx) = mpsc::channel();
        {
            // Enqueue on all ranks under one lock so concurrent callers see a
            // consistent job order on every rank (required by the turnstile).
            let senders = self.senders.lock().unwrap();
            for tx in senders.iter() {
                let task = Arc::clone(&task);
                let reply_tx = reply_tx.clone();
                let turnstile = turnstile.clone();
                let job: Job = Box::new(move |ctx: &WorkerCtx| {
                    let start = Instant::now();
                    let value = task(ctx);
                    let reply = Reply {
                        rank: ctx.rank,
                        busy: start.elapsed(),
                        value,
                    };
                    match turnstile {
                        Some(t) => t.deliver(ctx.rank, || {
                            let _ = reply_tx.send(reply);
                        }),
                        None => {
                            let _ = reply_tx.send(reply);
                        }
                    }
                });
                tx.send(job)
                    .map_err(|_| Error::State("worker rank has shut down".into()))?;
            }
        }
        drop(reply_tx);
        let replies: Vec<Reply<T>> = reply_rx.iter().take(self.sp_degree).collect();
        if replies.len() != self.sp_degree {
            return Err(Error::State(format!(
                "only {} of {} ranks replied",
                replies.len(),
                self.sp_degree
            )));
        }
        Ok(replies)
    }

    pub fn stats(&self) -> GroupStats {
        let c = &self.counters;
        GroupStats {
            encoder_invocations: c.encoder_invocations.load(Ordering::Relaxed),
            gather_bytes: c.gather_bytes.load(Ordering::Relaxed),
            pad_reads: c.pad_reads.load(Ordering::Relaxed),
            frames_per_rank: c.frames_per_rank.iter().map(|a| a.load(Ordering::Relaxed)).collect(),
        }
    }

    pub(crate) fn counters(&self) -> &Counters {
        &self.counters
    }
}

impl Drop for WorkerGroup {
    fn drop(&mut self) {
        self.senders.lock().unwrap().clear();
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}
