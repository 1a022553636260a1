//! Fixed-shape executor pool with greedy descending batch decomposition.
//!
//! Each profile shape gets `executors_per_shape` executors, built once with
//! their buffers and a bound forward closure. A request's candidates are cut
//! into chunks of those shapes (largest first), each chunk runs on an
//! executor checked out from that shape's queue, and the rows are gathered
//! back in candidate order. The final chunk is padded with zero embeddings
//! when the remainder is below the smallest shape.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::model::{forward_into, AttentionKernel, ModelError, ModelParams, ScoreMatrix, Workspace};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid profile set: {0}")]
    InvalidProfiles(String),
    #[error("no profile of shape {0}")]
    UnknownShape(usize),
    #[error("executor {0} is not checked out")]
    NotCheckedOut(usize),
    #[error("executor pool is shut down")]
    Shutdown,
    #[error("request has no candidates")]
    EmptyBatch,
    #[error("executor task failed: {0}")]
    TaskFailed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// Prebuilt fixed-shape executors.
    Explicit,
    /// Buffers allocated per request at the exact batch size.
    Implicit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub profile_shapes: Vec<usize>,
    #[serde(default = "default_executors")]
    pub executors_per_shape: usize,
    #[serde(default = "default_routing")]
    pub routing: Routing,
}

fn default_executors() -> usize {
    2
}

fn default_routing() -> Routing {
    Routing::Explicit
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self { profile_shapes: vec![128, 256, 512, 1024], executors_per_shape: 2, routing: Routing::Explicit }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileSet {
    shapes: Vec<usize>,
    executors_per_shape: usize,
}

impl ProfileSet {
    pub fn new(shapes: Vec<usize>, executors_per_shape: usize) -> Result<Self, OrchestratorError> {
        if shapes.is_empty() {
            return Err(OrchestratorError::InvalidProfiles("no shapes".into()));
        }
        if shapes[0] == 0 || shapes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OrchestratorError::InvalidProfiles(format!(
                "shapes {shapes:?} must be positive and strictly increasing"
            )));
        }
        if executors_per_shape == 0 {
            return Err(OrchestratorError::InvalidProfiles("executors_per_shape must be positive".into()));
        }
        Ok(Self { shapes, executors_per_shape })
    }

    pub fn shapes(&self) -> &[usize] {
        &self.shapes
    }

    pub fn executors_per_shape(&self) -> usize {
        self.executors_per_shape
    }

    pub fn min_shape(&self) -> usize {
        self.shapes[0]
    }

    pub fn max_shape(&self) -> usize {
        *self.shapes.last().expect("non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub shape: usize,
    pub real_count: usize,
    pub pad_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunks: Vec<Chunk>,
    pub total_real: usize,
}

impl ChunkPlan {
    pub fn total_padding(&self) -> usize {
        self.chunks.iter().map(|c| c.pad_count).sum()
    }
}

/// Greedy largest-fit decomposition; a remainder below the smallest shape
/// becomes one padded chunk of that shape.
pub fn plan_chunks(batch_size: usize, profiles: &ProfileSet) -> ChunkPlan {
    let mut chunks = Vec::new();
    let mut remaining = batch_size;
    for &shape in profiles.shapes.iter().rev() {
        while remaining >= shape {
            chunks.push(Chunk { shape, real_count: shape, pad_count: 0 });
            remaining -= shape;
        }
    }
    if remaining > 0 {
        let shape = profiles.min_shape();
        chunks.push(Chunk { shape, real_count: remaining, pad_count: shape - remaining });
    }
    ChunkPlan { chunks, total_real: batch_size }
}

struct LaneState {
    free: VecDeque<usize>,
    checked_out: HashSet<usize>,
}

struct Lane {
    shape: usize,
    state: Mutex<LaneState>,
    permits: Semaphore,
}

/// Per-shape FIFO of available executor ids.
///
/// Ids `i·k .. (i+1)·k` belong to the `i`-th shape, `k` executors each.
pub struct ExecutorQueue {
    lanes: Vec<Lane>,
    per_shape: usize,
}

impl ExecutorQueue {
    pub fn new(profiles: &ProfileSet) -> Self {
        let k = profiles.executors_per_shape;
        let lanes = profiles
            .shapes
            .iter()
            .enumerate()
            .map(|(i, &shape)| Lane {
                shape,
                state: Mutex::new(LaneState { free: (i * k..(i + 1) * k).collect(), checked_out: HashSet::new() }),
                permits: Semaphore::new(k),
            })
            .collect();
        Self { lanes, per_shape: k }
    }

    fn lane(&self, shape: usize) -> Result<&Lane, OrchestratorError> {
        self.lanes.iter().find(|l| l.shape == shape).ok_or(OrchestratorError::UnknownShape(shape))
    }

    pub fn shape_of(&self, id: usize) -> Option<usize> {
        self.lanes.get(id / self.per_shape).map(|l| l.shape)
    }

    pub fn len(&self) -> usize {
        self.lanes.len() * self.per_shape
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    /// Waits until an executor of `shape` is free and checks it out. Waiters
    /// are served in arrival order.
    pub async fn acquire(&self, shape: usize) -> Result<usize, OrchestratorError> {
        let lane = self.lane(shape)?;
        lane.permits.acquire().await.map_err(|_| OrchestratorError::Shutdown)?.forget();
        Ok(Self::take(lane))
    }

    pub fn try_acquire(&self, shape: usize) -> Result<Option<usize>, OrchestratorError> {
        let lane = self.lane(shape)?;
        match lane.permits.try_acquire() {
            Ok(permit) => {
                permit.forget();
                Ok(Some(Self::take(lane)))
            }
            Err(tokio::sync::TryAcquireError::NoPermits) => Ok(None),
            Err(tokio::sync::TryAcquireError::Closed) => Err(OrchestratorError::Shutdown),
        }
    }

    /// [`acquire`](Self::acquire) for callers outside an async context.
    pub fn acquire_blocking(&self, shape: usize) -> Result<usize, OrchestratorError> {
        futures::executor::block_on(self.acquire(shape))
    }

    fn take(lane: &Lane) -> usize {
        let mut state = lane.state.lock();
        let id = state.free.pop_front().expect("a permit implies a free id");
        state.checked_out.insert(id);
        id
    }

    pub fn release(&self, id: usize) -> Result<(), OrchestratorError> {
        let lane = self.lanes.get(id / self.per_shape).ok_or(OrchestratorError::NotCheckedOut(id))?;
        {
            let mut state = lane.state.lock();
            if !state.checked_out.remove(&id) {
                return Err(OrchestratorError::NotCheckedOut(id));
            }
            state.free.push_back(id);
        }
        lane.permits.add_permits(1);
        Ok(())
    }

    /// Free ids per shape, in shape order.
    pub fn queue_sizes(&self) -> Vec<usize> {
        self.lanes.iter().map(|l| l.state.lock().free.len()).collect()
    }

    pub fn free_ids(&self, shape: usize) -> Result<Vec<usize>, OrchestratorError> {
        Ok(self.lane(shape)?.state.lock().free.iter().copied().collect())
    }

    pub fn checked_out(&self) -> Vec<usize> {
        let mut ids: Vec<usize> =
            self.lanes.iter().flat_map(|l| l.state.lock().checked_out.iter().copied().collect::<Vec<_>>()).collect();
        ids.sort_unstable();
        ids
    }

    /// Fails pending and future acquires.
    pub fn close(&self) {
        self.lanes.iter().for_each(|l| l.permits.close());
    }
}

/// Counts model-buffer allocations (workspaces and executor buffers).
#[derive(Debug, Default)]
pub struct AllocationCounter {
    total: AtomicU64,
    baseline: AtomicU64,
}

impl AllocationCounter {
    pub fn record(&self) {
        self.total.fetch_add(1, Ordering::Relaxed);
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    /// Declares warmup over; later allocations count as steady state.
    pub fn mark_steady(&self) {
        self.baseline.store(self.total(), Ordering::Relaxed);
    }

    pub fn steady_state(&self) -> u64 {
        self.total() - self.baseline.load(Ordering::Relaxed)
    }
}

type BoundRun = Box<dyn FnMut(&[f64], &[f64], &mut [f64]) -> Result<(), ModelError> + Send>;

pub struct Executor {
    id: usize,
    shape: usize,
    history_capacity: usize,
    input: Vec<f64>,
    output: Vec<f64>,
    bound_run: BoundRun,
}

impl Executor {
    fn new(id: usize, shape: usize, params: Arc<ModelParams>, kernel: AttentionKernel) -> Self {
        let config = *params.config();
        let d = config.hidden_dim;
        let history_capacity = config.max_history_len * d;
        let mut ws = Workspace::new(&config, config.block_len(), shape, kernel);
        Self {
            id,
            shape,
            history_capacity,
            input: vec![0.0; history_capacity + shape * d],
            output: vec![0.0; shape * config.num_tasks],
            bound_run: Box::new(move |history, candidates, out| {
                forward_into(&mut ws, &params, history, candidates, out)
            }),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> usize {
        self.shape
    }

    /// Loads `history` and up to `shape` candidates, zero-filling the rest.
    fn load(&mut self, history: &[f64], candidates: &[f64]) {
        self.input[..history.len()].copy_from_slice(history);
        let slot = &mut self.input[self.history_capacity..];
        slot[..candidates.len()].copy_from_slice(candidates);
        slot[candidates.len()..].fill(0.0);
    }

    fn run(&mut self, history_len: usize) -> Result<(), ModelError> {
        let (history, candidates) = self.input.split_at(self.history_capacity);
        (self.bound_run)(&history[..history_len], candidates, &mut self.output)
    }
}

/// Result of one orchestrated request.
#[derive(Clone, Debug)]
pub struct Execution {
    pub scores: ScoreMatrix,
    /// Wall time during which at least one chunk was computing.
    pub compute: Duration,
    pub padded_rows: usize,
    pub chunks: usize,
}

pub struct ExecutorPool {
    params: Arc<ModelParams>,
    kernel: AttentionKernel,
    routing: Routing,
    profiles: ProfileSet,
    queue: ExecutorQueue,
    slots: Vec<Mutex<Option<Executor>>>,
    allocations: AllocationCounter,
}

/// Parks the executor back in its slot and requeues its id on drop. An
/// executor that never came back (its task panicked or was abandoned) is
/// rebuilt, which shows up in the allocation counter.
struct Checkout<'a> {
    pool: &'a ExecutorPool,
    id: usize,
    executor: Option<Executor>,
}

impl Drop for Checkout<'_> {
    fn drop(&mut self) {
        let pool = self.pool;
        let exec = self.executor.take().unwrap_or_else(|| {
            pool.allocations.record();
            let shape = pool.queue.shape_of(self.id).expect("id in range");
            Executor::new(self.id, shape, pool.params.clone(), pool.kernel)
        });
        *pool.slots[self.id].lock() = Some(exec);
        pool.queue.release(self.id).expect("checked out by this guard");
    }
}

impl ExecutorPool {
    /// Builds every executor up front. With implicit routing no executors
    /// are built and each request allocates its own buffers.
    pub fn build(
        profiles: ProfileSet,
        params: Arc<ModelParams>,
        kernel: AttentionKernel,
        routing: Routing,
    ) -> Result<Self, OrchestratorError> {
        params.validate()?;
        let config = params.config();
        if profiles.max_shape() > config.max_candidates && routing == Routing::Explicit {
            return Err(OrchestratorError::InvalidProfiles(format!(
                "shape {} exceeds max_candidates {}",
                profiles.max_shape(),
                config.max_candidates
            )));
        }
        let queue = ExecutorQueue::new(&profiles);
        let allocations = AllocationCounter::default();
        let slots = match routing {
            Routing::Explicit => (0..queue.len())
                .map(|id| {
                    let shape = queue.shape_of(id).expect("id in range");
                    allocations.record();
                    Mutex::new(Some(Executor::new(id, shape, params.clone(), kernel)))
                })
                .collect(),
            Routing::Implicit => Vec::new(),
        };
        if routing == Routing::Implicit {
            queue.close();
        }
        allocations.mark_steady();
        Ok(Self { params, kernel, routing, profiles, queue, slots, allocations })
    }

    pub fn profiles(&self) -> &ProfileSet {
        &self.profiles
    }

    pub fn routing(&self) -> Routing {
        self.routing
    }

    pub fn queue(&self) -> &ExecutorQueue {
        &self.queue
    }

    pub fn allocations(&self) -> &AllocationCounter {
        &self.allocations
    }

    pub fn params(&self) -> &Arc<ModelParams> {
        &self.params
    }

    /// Rejects new work; chunks already holding an executor finish.
    pub fn shutdown(&self) {
        self.queue.close();
    }

    async fn checkout(&self, shape: usize) -> Result<Checkout<'_>, OrchestratorError> {
        let id = self.queue.acquire(shape).await?;
        let executor = self.slots[id].lock().take().expect("queued executor is parked");
        Ok(Checkout { pool: self, id, executor: Some(executor) })
    }

    /// Scores `candidates` (row-major, `hidden_dim` wide) against `history`.
    pub async fn execute_request(
        &self,
        history: Arc<[f64]>,
        candidates: Arc<[f64]>,
    ) -> Result<Execution, OrchestratorError> {
        let config = self.params.config();
        let d = config.hidden_dim;
        if candidates.is_empty() {
            return Err(OrchestratorError::EmptyBatch);
        }
        if !history.len().is_multiple_of(d) || !candidates.len().is_multiple_of(d) {
            return Err(ModelError::Shape(format!("embeddings must be {d} wide")).into());
        }
        if history.len() > config.max_history_len * d {
            return Err(ModelError::Shape(format!(
                "history of {} exceeds max_history_len {}",
                history.len() / d,
                config.max_history_len
            ))
            .into());
        }
        match self.routing {
            Routing::Explicit => self.execute_explicit(history, candidates).await,
            Routing::Implicit => self.execute_implicit(history, candidates).await,
        }
    }

    async fn execute_explicit(
        &self,
        history: Arc<[f64]>,
        candidates: Arc<[f64]>,
    ) -> Result<Execution, OrchestratorError> {
        let config = self.params.config();
        let (d, tasks) = (config.hidden_dim, config.num_tasks);
        let plan = plan_chunks(candidates.len() / d, &self.profiles);
        let scores = Mutex::new(Matrix::zeros(plan.total_real, tasks));

        let mut offset = 0;
        let mut runs = Vec::with_capacity(plan.chunks.len());
        for chunk in &plan.chunks {
            let rows = offset..offset + chunk.real_count;
            offset += chunk.real_count;
            let (scores, history, candidates) = (&scores, history.clone(), candidates.clone());
            runs.push(async move {
                let mut held = self.checkout(chunk.shape).await?;
                let mut exec = held.executor.take().expect("fresh checkout");
                let cand_range = rows.start * d..rows.end * d;
                let (exec, interval, result) = tokio::task::spawn_blocking(move || {
                    exec.load(&history, &candidates[cand_range]);
                    let start = Instant::now();
                    let result = exec.run(history.len());
                    (exec, (start, Instant::now()), result)
                })
                .await
                .map_err(|e| OrchestratorError::TaskFailed(e.to_string()))?;
                held.executor = Some(exec);
                result?;
                let out = &held.executor.as_ref().expect("returned").output;
                scores.lock().as_mut_slice()[rows.start * tasks..rows.end * tasks]
                    .copy_from_slice(&out[..chunk.real_count * tasks]);
                drop(held);
                Ok::<_, OrchestratorError>(interval)
            });
        }
        let intervals = futures::future::try_join_all(runs).await?;
        Ok(Execution {
            scores: ScoreMatrix::new(scores.into_inner()),
            compute: union_length(intervals),
            padded_rows: plan.total_padding(),
            chunks: plan.chunks.len(),
        })
    }

    async fn execute_implicit(
        &self,
        history: Arc<[f64]>,
        candidates: Arc<[f64]>,
    ) -> Result<Execution, OrchestratorError> {
        let config = *self.params.config();
        let d = config.hidden_dim;
        let count = candidates.len() / d;
        if count > config.max_candidates {
            return Err(ModelError::Shape(format!("{count} candidates outside 1..={}", config.max_candidates)).into());
        }
        self.allocations.record();
        let (params, kernel) = (self.params.clone(), self.kernel);
        tokio::task::spawn_blocking(move || {
            let mut ws = Workspace::new(&config, history.len() / d / config.num_blocks, count, kernel);
            let mut out = Matrix::zeros(count, config.num_tasks);
            let start = Instant::now();
            forward_into(&mut ws, &params, &history, &candidates, out.as_mut_slice())?;
            Ok(Execution { scores: ScoreMatrix::new(out), compute: start.elapsed(), padded_rows: 0, chunks: 1 })
        })
        .await
        .map_err(|e| OrchestratorError::TaskFailed(e.to_string()))?
    }
}

/// Total length covered by possibly overlapping intervals.
fn union_length(mut intervals: Vec<(Instant, Instant)>) -> Duration {
    intervals.sort_by_key(|i| i.0);
    let mut total = Duration::ZERO;
    let mut current: Option<(Instant, Instant)> = None;
    for (start, end) in intervals {
        current = match current {
            Some((s, e)) if start <= e => Some((s, e.max(end))),
            Some((s, e)) => {
                total += e - s;
                Some((start, end))
            }
            None => Some((start, end)),
        };
    }
    if let Some((s, e)) = current {
        total += e - s;
    }
    total
}
