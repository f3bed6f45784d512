//! Job records, their event logs and on-disk persistence.
//!
//! Each job lives in `jobs/<id>/` as `job.json` (the record) and
//! `events.jsonl` (one event per line, append-only).

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::sync::watch;

pub const RESTART_DIAGNOSTIC: &str = "service restarted while the job was running";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub stage: String,
    pub iteration: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub preview: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub psnr: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub images: Vec<String>,
    pub latents: Vec<String>,
    pub stages: Vec<StageSummary>,
    pub log: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum JobEvent {
    Progress(ProgressRecord),
    Done { result: JobResult },
    Failed { error: String },
}

impl JobEvent {
    pub fn name(&self) -> &'static str {
        match self {
            JobEvent::Progress(_) => "progress",
            JobEvent::Done { .. } => "done",
            JobEvent::Failed { .. } => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        !matches!(self, JobEvent::Progress(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: String,
    pub recipe: String,
    pub state: JobState,
    pub progress: Option<ProgressRecord>,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub result: Option<JobResult>,
    pub error: Option<String>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A job's live state. `changed` carries the event count.
pub struct JobEntry {
    dir: PathBuf,
    record: Mutex<JobRecord>,
    events: Mutex<Vec<JobEvent>>,
    changed: watch::Sender<usize>,
}

impl JobEntry {
    pub fn record(&self) -> JobRecord {
        self.record.lock().expect("job lock").clone()
    }

    pub fn events_from(&self, cursor: usize) -> Vec<JobEvent> {
        let events = self.events.lock().expect("job lock");
        events.get(cursor..).map(<[JobEvent]>::to_vec).unwrap_or_default()
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.changed.subscribe()
    }

    fn persist(&self, record: &JobRecord) -> io::Result<()> {
        let tmp = self.dir.join("job.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(record)?)?;
        fs::rename(tmp, self.dir.join("job.json"))
    }

    /// Moves `queued` to `running`. Returns false if the job was not queued.
    pub fn start(&self) -> io::Result<bool> {
        let mut record = self.record.lock().expect("job lock");
        if record.state != JobState::Queued {
            return Ok(false);
        }
        record.state = JobState::Running;
        record.updated_ms = now_ms();
        self.persist(&record)?;
        Ok(true)
    }

    /// Appends an event and applies it to the record.
    pub fn push(&self, event: JobEvent) -> io::Result<()> {
        let mut record = self.record.lock().expect("job lock");
        if record.state.is_terminal() {
            return Ok(());
        }
        match &event {
            JobEvent::Progress(p) => record.progress = Some(p.clone()),
            JobEvent::Done { result } => {
                record.state = JobState::Done;
                record.result = Some(result.clone());
            }
            JobEvent::Failed { error } => {
                record.state = JobState::Failed;
                record.error = Some(error.clone());
            }
        }
        record.updated_ms = now_ms();
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("events.jsonl"))?
            .write_all(&line)?;
        self.persist(&record)?;
        let mut events = self.events.lock().expect("job lock");
        events.push(event);
        self.changed.send_replace(events.len());
        Ok(())
    }
}

pub struct JobTable {
    dir: PathBuf,
    entries: Mutex<HashMap<String, Arc<JobEntry>>>,
}

impl JobTable {
    /// Loads persisted jobs. Jobs found running are failed with
    /// [`RESTART_DIAGNOSTIC`]; the ids of queued jobs are returned.
    pub fn open(dir: &Path) -> io::Result<(Self, Vec<String>)> {
        fs::create_dir_all(dir)?;
        let mut entries = HashMap::new();
        let mut queued = Vec::new();
        for item in fs::read_dir(dir)? {
            let path = item?.path();
            let Ok(bytes) = fs::read(path.join("job.json")) else {
                continue;
            };
            let record: JobRecord = serde_json::from_slice(&bytes)?;
            let events = match fs::read_to_string(path.join("events.jsonl")) {
                Ok(text) => text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<Result<Vec<JobEvent>, _>>()?,
                Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e),
            };
            let state = record.state;
            let id = record.id.clone();
            let entry = Arc::new(JobEntry {
                dir: path,
                changed: watch::Sender::new(events.len()),
                record: Mutex::new(record),
                events: Mutex::new(events),
            });
            match state {
                JobState::Running => entry.push(JobEvent::Failed {
                    error: RESTART_DIAGNOSTIC.into(),
                })?,
                JobState::Queued => queued.push((entry.record().created_ms, id.clone())),
                _ => {}
            }
            entries.insert(id, entry);
        }
        queued.sort();
        Ok((
            Self {
                dir: dir.to_path_buf(),
                entries: Mutex::new(entries),
            },
            queued.into_iter().map(|(_, id)| id).collect(),
        ))
    }

    /// Persists a new queued job and returns it.
    pub fn create(&self, kind: &str, recipe: String) -> io::Result<Arc<JobEntry>> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.dir.join(&id);
        fs::create_dir_all(&dir)?;
        let now = now_ms();
        let record = JobRecord {
            id: id.clone(),
            kind: kind.to_string(),
            recipe,
            state: JobState::Queued,
            progress: None,
            created_ms: now,
            updated_ms: now,
            result: None,
            error: None,
        };
        let entry = Arc::new(JobEntry {
            dir,
            record: Mutex::new(record.clone()),
            events: Mutex::new(Vec::new()),
            changed: watch::Sender::new(0),
        });
        entry.persist(&record)?;
        self.entries.lock().expect("table lock").insert(id, entry.clone());
        Ok(entry)
    }

    pub fn get(&self, id: &str) -> Option<Arc<JobEntry>> {
        self.entries.lock().expect("table lock").get(id).cloned()
    }

    pub fn list(&self) -> Vec<JobRecord> {
        let mut out: Vec<JobRecord> = self
            .entries
            .lock()
            .expect("table lock")
            .values()
            .map(|e| e.record())
            .collect();
        out.sort_by(|a, b| (a.created_ms, &a.id).cmp(&(b.created_ms, &b.id)));
        out
    }
}
