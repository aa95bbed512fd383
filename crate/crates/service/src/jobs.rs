//! Generation jobs and the bounded pool that runs them.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use augment_core::backend::wire::encode_image;
use augment_core::engine::VariationFlag;
use augment_core::{BackendKind, Rect, RegionSpec, Result};
use serde::Serialize;
use tokio::sync::Semaphore;

use crate::pipeline::BaseRun;

pub const DEFAULT_WORKERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSummary {
    pub index: usize,
    pub rect: Rect,
    pub pixels: u64,
    pub coverage: f64,
    pub feasible: bool,
}

impl From<&RegionSpec> for RegionSummary {
    fn from(r: &RegionSpec) -> Self {
        RegionSummary {
            index: r.index,
            rect: r.rect,
            pixels: r.region_mask.count_ones(),
            coverage: r.coverage,
            feasible: r.feasible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationSummary {
    pub region: usize,
    pub variation: usize,
    pub similarity: f64,
    pub reference_index: usize,
    pub kept_reference_index: usize,
    pub attempts_used: usize,
    pub flags: Vec<VariationFlag>,
    /// Base64 PNG of the base with this variation composited in.
    pub preview: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobResults {
    pub regions: Vec<RegionSummary>,
    pub variations: Vec<VariationSummary>,
    pub combinations: u64,
}

impl JobResults {
    pub fn from_run(run: &BaseRun) -> Result<Self> {
        let regions = run.regions.iter().map(RegionSummary::from).collect();
        let mut variations = Vec::new();
        for per_region in &run.variations {
            for v in per_region {
                variations.push(VariationSummary {
                    region: v.region_index,
                    variation: v.variation_index,
                    similarity: v.similarity,
                    reference_index: v.reference_index,
                    kept_reference_index: v.kept_reference_index,
                    attempts_used: v.attempts_used,
                    flags: v.flags.clone(),
                    preview: encode_image(&run.preview(v.region_index, v.variation_index)?)?,
                });
            }
        }
        Ok(JobResults {
            regions,
            variations,
            combinations: run.combination_count()?,
        })
    }
}

/// What `GET /jobs/{id}` returns. Built under the job's lock, so state and
/// results always agree.
#[derive(Debug, Clone, Serialize)]
pub struct JobSnapshot {
    pub id: String,
    pub session_id: String,
    pub task_id: String,
    pub base_id: String,
    pub seed: u64,
    pub state: JobState,
    pub progress: Progress,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<Arc<JobResults>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_backend: Option<BackendKind>,
}

#[derive(Debug)]
struct Inner {
    snapshot: JobSnapshot,
    run: Option<Arc<BaseRun>>,
}

#[derive(Debug)]
pub struct Job {
    inner: Mutex<Inner>,
}

impl Job {
    pub fn snapshot(&self) -> JobSnapshot {
        self.inner.lock().unwrap().snapshot.clone()
    }

    pub fn state(&self) -> JobState {
        self.inner.lock().unwrap().snapshot.state
    }

    /// The finished run, once the job is done.
    pub fn run(&self) -> Option<Arc<BaseRun>> {
        self.inner.lock().unwrap().run.clone()
    }

    fn start(&self, total: usize) {
        let mut g = self.inner.lock().unwrap();
        debug_assert_eq!(g.snapshot.state, JobState::Queued);
        g.snapshot.state = JobState::Running;
        g.snapshot.progress = Progress { done: 0, total };
    }

    pub(crate) fn advance(&self, done: usize) {
        let mut g = self.inner.lock().unwrap();
        if g.snapshot.state == JobState::Running {
            let p = &mut g.snapshot.progress;
            p.done = p.done.max(done).min(p.total);
        }
    }

    fn finish(&self, outcome: Result<(BaseRun, JobResults)>) {
        let mut g = self.inner.lock().unwrap();
        match outcome {
            Ok((run, results)) => {
                g.snapshot.progress.done = g.snapshot.progress.total;
                g.snapshot.results = Some(Arc::new(results));
                g.run = Some(Arc::new(run));
                g.snapshot.state = JobState::Done;
            }
            Err(e) => {
                log::error!("job {} failed: {e}", g.snapshot.id);
                g.snapshot.error_backend = e.backend();
                g.snapshot.error = Some(e.to_string());
                g.snapshot.state = JobState::Failed;
            }
        }
    }
}

/// Job registry plus a semaphore bounding how many run at once.
pub struct JobQueue {
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    next: AtomicU64,
    workers: Arc<Semaphore>,
}

impl JobQueue {
    pub fn new(workers: usize) -> Self {
        JobQueue {
            jobs: RwLock::new(HashMap::new()),
            next: AtomicU64::new(1),
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    pub fn get(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.read().unwrap().get(id).cloned()
    }

    /// Register a queued job and spawn `work` once a worker slot frees up.
    /// `work` receives the job so it can report progress.
    pub fn submit<F, Fut>(
        &self,
        session_id: &str,
        task_id: &str,
        base_id: &str,
        seed: u64,
        total: usize,
        work: F,
    ) -> Arc<Job>
    where
        F: FnOnce(Arc<Job>) -> Fut + Send + 'static,
        Fut: std::future::Future<Output = Result<BaseRun>> + Send + 'static,
    {
        let id = format!("job-{}", self.next.fetch_add(1, Ordering::SeqCst));
        let job = Arc::new(Job {
            inner: Mutex::new(Inner {
                snapshot: JobSnapshot {
                    id: id.clone(),
                    session_id: session_id.to_string(),
                    task_id: task_id.to_string(),
                    base_id: base_id.to_string(),
                    seed,
                    state: JobState::Queued,
                    progress: Progress { done: 0, total },
                    results: None,
                    error: None,
                    error_backend: None,
                },
                run: None,
            }),
        });
        self.jobs.write().unwrap().insert(id, job.clone());
        let workers = self.workers.clone();
        let handle = job.clone();
        tokio::spawn(async move {
            let _slot = workers.acquire_owned().await.expect("worker pool never closed");
            handle.start(total);
            let outcome = match work(handle.clone()).await {
                Ok(run) => {
                    // Previews are CPU work; keep them off the async threads.
                    tokio::task::spawn_blocking(move || JobResults::from_run(&run).map(|r| (run, r)))
                        .await
                        .expect("preview task panicked")
                }
                Err(e) => Err(e),
            };
            handle.finish(outcome);
        });
        job
    }
}
