//! One task per session owns the [`ActiveSession`]. Handlers talk to it over
//! a command queue and read immutable snapshots from a watch channel.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use agile_core::active::{ActiveSession, LabelSource, SessionStatus};
use agile_core::bench::{compute_metrics, RunMetrics};
use agile_core::model::Learner;
use tokio::sync::{mpsc, oneshot, watch};

use crate::api::{LabelAck, LabelSubmission, Progress, QueryCard, QueriesResponse, ReceivedLabel, StatusResponse};
use crate::error::ApiError;
use crate::render::{base64_png, channel_pngs, composite_png};

pub const LABEL_NAMES: [&str; 2] = ["other", "target"];

/// Everything a reader may see, frozen between two mutations.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionView {
    pub queries: QueriesResponse,
    pub status: StatusResponse,
}

pub(crate) enum Command {
    Submit(LabelSubmission, oneshot::Sender<Result<LabelAck, ApiError>>),
}

#[derive(Clone)]
pub(crate) struct Handle {
    pub commands: mpsc::Sender<Command>,
    pub view: watch::Receiver<Arc<SessionView>>,
}

struct Worker<L: Learner> {
    session_id: String,
    composite: [usize; 3],
    snapshot_dir: Option<PathBuf>,
    cards: HashMap<usize, QueryCard>,
    submissions: Vec<ReceivedLabel>,
    metrics: Option<RunMetrics>,
    error: Option<String>,
    version: u64,
    _learner: std::marker::PhantomData<L>,
}

pub(crate) fn spawn<L: Learner + 'static>(
    session_id: String,
    session: ActiveSession<L>,
    composite: [usize; 3],
    snapshot_dir: Option<PathBuf>,
) -> Result<Handle, ApiError> {
    let (tx, rx) = mpsc::channel(64);
    let mut worker = Worker {
        session_id,
        composite,
        snapshot_dir,
        cards: HashMap::new(),
        submissions: Vec::new(),
        metrics: None,
        error: None,
        version: 0,
        _learner: std::marker::PhantomData,
    };
    let (publish, view) = watch::channel(Arc::new(worker.view(&session)?));
    tokio::spawn(worker.run(session, rx, publish));
    Ok(Handle { commands: tx, view })
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn progress<L: Learner>(s: &ActiveSession<L>) -> Progress {
    Progress {
        labeled: s.pool().labeled.len() + s.received().count(),
        budget: s.config().budget,
        round: s.round(),
    }
}

impl<L: Learner + 'static> Worker<L> {
    async fn run(
        mut self,
        mut session: ActiveSession<L>,
        mut rx: mpsc::Receiver<Command>,
        publish: watch::Sender<Arc<SessionView>>,
    ) {
        while let Some(Command::Submit(sub, reply)) = rx.recv().await {
            let result = self.submit(&mut session, &sub, &publish);
            let _ = reply.send(result);
            if session.status() != SessionStatus::Adapting || self.error.is_some() {
                continue;
            }
            let joined = tokio::task::spawn_blocking(move || {
                let r = session.advance();
                (session, r)
            })
            .await;
            session = match joined {
                Ok((s, r)) => {
                    if let Err(e) = r {
                        log::error!("session {} failed to adapt: {e}", self.session_id);
                        self.error = Some(e.to_string());
                    }
                    s
                }
                Err(e) => {
                    // The session moved into the panicked thread; nothing left to serve.
                    log::error!("session {} worker panicked: {e}", self.session_id);
                    let mut last = (**publish.borrow()).clone();
                    last.status.error = Some(format!("worker panicked: {e}"));
                    last.status.version += 1;
                    publish.send_replace(Arc::new(last));
                    return;
                }
            };
            self.after_round(&session);
            match self.view(&session) {
                Ok(v) => {
                    publish.send_replace(Arc::new(v));
                }
                Err(e) => self.error = Some(e.to_string()),
            }
        }
    }

    fn submit(
        &mut self,
        session: &mut ActiveSession<L>,
        sub: &LabelSubmission,
        publish: &watch::Sender<Arc<SessionView>>,
    ) -> Result<LabelAck, ApiError> {
        if let Some(e) = &self.error {
            return Err(ApiError::Rejected(format!("session stopped after an error: {e}")));
        }
        let label = match sub.label {
            0 => 0,
            1 => 1,
            other => return Err(ApiError::BadRequest(format!("label {other} is not 0 or 1"))),
        };
        let ack = session.submit(sub.sample_id, label, LabelSource::Human)?;
        if ack.accepted {
            self.submissions.push(ReceivedLabel {
                sample_id: sub.sample_id,
                label,
                annotator: sub.annotator.clone(),
                timestamp: sub.timestamp.clone(),
                received_at_ms: now_ms(),
            });
            publish.send_replace(Arc::new(self.view(session)?));
        }
        Ok(LabelAck {
            sample_id: ack.sample_id,
            accepted: ack.accepted,
            conflict: ack.conflict,
            status: ack.status,
            progress: progress(session),
        })
    }

    fn after_round(&mut self, session: &ActiveSession<L>) {
        if let Some(out) = session.outcome() {
            match compute_metrics(&out.evaluation.predictions, &out.evaluation.labels) {
                Ok(m) => self.metrics = Some(m),
                Err(e) => self.error = Some(e.to_string()),
            }
        } else if let Some(dir) = &self.snapshot_dir {
            if let Err(e) = session.save(&dir.join(&self.session_id)) {
                log::warn!("session {} snapshot failed: {e}", self.session_id);
            }
        }
    }

    fn card(&mut self, session: &ActiveSession<L>, sample_id: usize, entropy: Option<f64>) -> Result<QueryCard, ApiError> {
        if let Some(c) = self.cards.get(&sample_id) {
            return Ok(c.clone());
        }
        let task = session.task();
        let patch = task.patch(sample_id);
        let shape = task.patch_shape();
        let card = QueryCard {
            sample_id,
            entropy,
            channels: channel_pngs(&patch, shape)?.iter().map(|b| base64_png(b)).collect(),
            composite: base64_png(&composite_png(&patch, shape, self.composite)?),
        };
        self.cards.insert(sample_id, card.clone());
        Ok(card)
    }

    fn view(&mut self, session: &ActiveSession<L>) -> Result<SessionView, ApiError> {
        let status = session.status();
        let received: Vec<usize> = session.received().map(|(id, _)| id).collect();
        let open: Vec<(usize, Option<f64>)> = session
            .pending()
            .iter()
            .filter(|q| !received.contains(&q.sample_id))
            .map(|q| (q.sample_id, q.entropy))
            .collect();
        let queries = open
            .into_iter()
            .map(|(id, entropy)| self.card(session, id, entropy))
            .collect::<Result<Vec<_>, _>>()?;
        let pending: Vec<usize> = session.pending().iter().map(|q| q.sample_id).collect();
        self.cards.retain(|id, _| pending.contains(id));
        self.version += 1;
        let progress = progress(session);
        let task = session.task();
        let view = SessionView {
            queries: QueriesResponse {
                session_id: self.session_id.clone(),
                status,
                progress: progress.clone(),
                channel_names: task.channel_names(),
                label_names: LABEL_NAMES.map(String::from),
                composite_channels: self.composite,
                queries,
                final_metrics: self.metrics.clone(),
            },
            status: StatusResponse {
                session_id: self.session_id.clone(),
                task_id: task.task_id().to_string(),
                status,
                progress,
                version: self.version,
                log: session
                    .outcome()
                    .map(|o| o.pool.history.clone())
                    .unwrap_or_else(|| session.pool().history.clone()),
                rounds: session.log().to_vec(),
                submissions: self.submissions.clone(),
                metrics: self.metrics.clone(),
                error: self.error.clone(),
            },
        };
        Ok(view)
    }
}
