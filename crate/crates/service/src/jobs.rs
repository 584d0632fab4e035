//! Edit jobs: a bounded queue drained by a single coordinator task.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use branchgan::{optimize_edit, BranchedLatent, EditConfig, EditConstraints};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::config::LoadedModel;
use crate::payload::encode_png;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub image: String,
    pub latent: BranchedLatent,
    pub final_loss: f64,
    pub initial_loss: f64,
    pub trace: Vec<f64>,
    pub restart_losses: Vec<f64>,
    pub init: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobTicket {
    pub id: String,
    pub model: String,
    pub status: JobStatus,
    /// 0 while queued, 1 once finished.
    pub progress: f64,
    pub result: Option<EditOutcome>,
    pub error: Option<String>,
}

struct Job {
    id: String,
    model: Arc<LoadedModel>,
    constraints: EditConstraints,
    config: EditConfig,
    seed: u64,
}

/// Submission failed because the queue is full.
#[derive(Debug)]
pub struct QueueFull;

#[derive(Clone)]
pub struct JobQueue {
    tx: mpsc::Sender<Job>,
    tickets: Arc<Mutex<BTreeMap<String, JobTicket>>>,
    next: Arc<AtomicU64>,
}

impl JobQueue {
    /// Starts the coordinator on the current tokio runtime.
    pub fn start(capacity: usize) -> Self {
        let (tx, mut rx) = mpsc::channel::<Job>(capacity);
        let tickets: Arc<Mutex<BTreeMap<String, JobTicket>>> = Arc::default();
        let board = tickets.clone();
        tokio::spawn(async move {
            while let Some(job) = rx.recv().await {
                update(&board, &job.id, |t| t.status = JobStatus::Running);
                let id = job.id.clone();
                let outcome = tokio::task::spawn_blocking(move || run(job))
                    .await
                    .unwrap_or_else(|e| Err(format!("worker panicked: {e}")));
                update(&board, &id, |t| {
                    t.progress = 1.0;
                    match outcome {
                        Ok(r) => {
                            t.status = JobStatus::Done;
                            t.result = Some(r);
                        }
                        Err(e) => {
                            t.status = JobStatus::Failed;
                            t.error = Some(e);
                        }
                    }
                });
            }
        });
        JobQueue {
            tx,
            tickets,
            next: Arc::new(AtomicU64::new(1)),
        }
    }

    fn new_id(&self) -> String {
        format!("job-{}", self.next.fetch_add(1, Ordering::Relaxed))
    }

    pub fn submit(
        &self,
        model: Arc<LoadedModel>,
        constraints: EditConstraints,
        config: EditConfig,
        seed: u64,
    ) -> Result<JobTicket, QueueFull> {
        let id = self.new_id();
        let ticket = JobTicket {
            id: id.clone(),
            model: model.handle.id.clone(),
            status: JobStatus::Queued,
            progress: 0.0,
            result: None,
            error: None,
        };
        // registered first so the coordinator always finds it
        self.tickets.lock().expect("job board").insert(id.clone(), ticket.clone());
        let job = Job {
            id: id.clone(),
            model,
            constraints,
            config,
            seed,
        };
        if self.tx.try_send(job).is_err() {
            self.tickets.lock().expect("job board").remove(&id);
            return Err(QueueFull);
        }
        Ok(ticket)
    }

    /// Records a job that failed validation before reaching the queue.
    pub fn reject(&self, model: &str, reason: String) -> JobTicket {
        let ticket = JobTicket {
            id: self.new_id(),
            model: model.into(),
            status: JobStatus::Failed,
            progress: 1.0,
            result: None,
            error: Some(reason),
        };
        self.tickets
            .lock()
            .expect("job board")
            .insert(ticket.id.clone(), ticket.clone());
        ticket
    }

    pub fn get(&self, id: &str) -> Option<JobTicket> {
        self.tickets.lock().expect("job board").get(id).cloned()
    }
}

fn update(board: &Mutex<BTreeMap<String, JobTicket>>, id: &str, f: impl FnOnce(&mut JobTicket)) {
    if let Some(t) = board.lock().expect("job board").get_mut(id) {
        if !t.status.is_terminal() {
            f(t);
        }
    }
}

fn run(job: Job) -> Result<EditOutcome, String> {
    let m = &job.model;
    let r = optimize_edit(&m.generator, m.encoder.as_ref(), &job.constraints, &job.config, job.seed)
        .map_err(|e| e.to_string())?;
    let image = r.image.as_ref().ok_or("edit produced no image")?;
    Ok(EditOutcome {
        image: encode_png(image)?,
        latent: r.latent,
        final_loss: r.final_loss,
        initial_loss: r.initial_loss,
        trace: r.trace,
        restart_losses: r.restart_losses,
        init: r.init,
    })
}
