//! Live sessions, their append-only transcript logs, and idle expiry.
//!
//! A log is one JSON record per line: a `start` record with the caption,
//! followed by one `round` record per accepted round. State is never written;
//! it is recomputed by replaying the texts.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, Instant};

use memir_core::evaluation::{hit_recall_mhr, EvalReport};
use memir_core::{Error, Result, SessionState};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, OwnedMutexGuard};

use crate::engine::{ApiRoundResult, Engine};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        session_id: String,
        caption: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_id: Option<String>,
        checkpoint_id: String,
    },
    Round {
        text: String,
    },
}

/// A parsed transcript log.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub session_id: String,
    pub target_id: Option<String>,
    pub checkpoint_id: String,
    /// Caption first.
    pub texts: Vec<String>,
}

pub fn parse_transcript(text: &str) -> Result<Transcript> {
    let mut records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<LogRecord>(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        });
    let Some(first) = records.next() else {
        return Err(Error::Parse {
            line: 1,
            message: "empty transcript".into(),
        });
    };
    let LogRecord::Start {
        session_id,
        caption,
        target_id,
        checkpoint_id,
    } = first?
    else {
        return Err(Error::Schema {
            line: 1,
            message: "transcript must begin with a start record".into(),
        });
    };
    let mut texts = vec![caption];
    for (i, r) in records.enumerate() {
        match r? {
            LogRecord::Round { text } => texts.push(text),
            LogRecord::Start { .. } => {
                return Err(Error::Schema {
                    line: i + 2,
                    message: "second start record".into(),
                })
            }
        }
    }
    Ok(Transcript {
        session_id,
        target_id,
        checkpoint_id,
        texts,
    })
}

/// What a request does when the session already has a round in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BusyPolicy {
    Queue,
    Reject,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub idle_timeout: Duration,
    pub busy: BusyPolicy,
    /// Where transcript logs live; `None` keeps sessions in memory only.
    pub state_dir: Option<PathBuf>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            idle_timeout: Duration::from_secs(30 * 60),
            busy: BusyPolicy::Queue,
            state_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown or expired session {0}")]
    NotFound(String),
    #[error("session {0} has a round in progress")]
    Busy(String),
    #[error(transparent)]
    Engine(#[from] Error),
}

#[derive(Debug)]
pub struct DialogueSession {
    pub id: String,
    pub target_id: Option<String>,
    pub texts: Vec<String>,
    pub results: Vec<ApiRoundResult>,
    state: SessionState,
    last_active: Instant,
    log: Option<PathBuf>,
}

/// Read-only copy of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    pub transcript: Vec<TranscriptEntry>,
    pub results: Vec<ApiRoundResult>,
    /// Hit/Recall/MHR so far; only with a declared target.
    pub metrics: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round: usize,
    pub text: String,
}

type Slot = Arc<Mutex<DialogueSession>>;

pub struct SessionStore {
    engine: Arc<Engine>,
    config: StoreConfig,
    sessions: StdMutex<HashMap<String, Slot>>,
}

fn append(path: &Path, rec: &LogRecord, create: bool) -> Result<()> {
    let mut f = if create {
        File::create_new(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut line = serde_json::to_string(rec).expect("log record serializes");
    line.push('\n');
    f.write_all(line.as_bytes())
        .and_then(|_| f.sync_data())
        .map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })
}

impl SessionStore {
    /// Opens the store, replaying any logs found in the state directory.
    pub fn open(engine: Arc<Engine>, config: StoreConfig) -> Result<Self> {
        let store = Self {
            engine,
            config,
            sessions: StdMutex::new(HashMap::new()),
        };
        if let Some(dir) = &store.config.state_dir {
            fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            paths.sort();
            for p in paths {
                if let Err(e) = store.restore(&p) {
                    log::warn!("skipping transcript {}: {e}", p.display());
                }
            }
        }
        Ok(store)
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    fn restore(&self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let t = parse_transcript(&text)?;
        if t.checkpoint_id != self.engine.checkpoint_id {
            return Err(Error::Data(format!(
                "recorded against checkpoint {}, serving {}",
                t.checkpoint_id, self.engine.checkpoint_id
            )));
        }
        let session = self.replay(&t, Some(path.to_path_buf()))?;
        self.sessions
            .lock()
            .expect("session map")
            .insert(t.session_id.clone(), Arc::new(Mutex::new(session)));
        Ok(())
    }

    /// Recomputes a session from its texts.
    pub fn replay(&self, t: &Transcript, log: Option<PathBuf>) -> Result<DialogueSession> {
        let (caption, rest) = t.texts.split_first().ok_or_else(|| Error::Data("empty transcript".into()))?;
        let (mut state, first) = self.engine.start(caption, t.target_id.as_deref())?;
        let mut results = vec![first];
        for text in rest {
            let (next, r) = self.engine.advance(state, text)?;
            state = next;
            results.push(r);
        }
        Ok(DialogueSession {
            id: t.session_id.clone(),
            target_id: t.target_id.clone(),
            texts: t.texts.clone(),
            results,
            state,
            last_active: Instant::now(),
            log,
        })
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.config.state_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    pub fn create(&self, caption: &str, target_id: Option<&str>) -> std::result::Result<(String, ApiRoundResult), StoreError> {
        self.sweep();
        let (state, result) = self.engine.start(caption, target_id)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let log = self.log_path(&id);
        if let Some(p) = &log {
            append(
                p,
                &LogRecord::Start {
                    session_id: id.clone(),
                    caption: caption.to_string(),
                    target_id: target_id.map(str::to_string),
                    checkpoint_id: self.engine.checkpoint_id.clone(),
                },
                true,
            )?;
        }
        let session = DialogueSession {
            id: id.clone(),
            target_id: target_id.map(str::to_string),
            texts: vec![caption.to_string()],
            results: vec![result.clone()],
            state,
            last_active: Instant::now(),
            log,
        };
        self.sessions
            .lock()
            .expect("session map")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok((id, result))
    }

    fn slot(&self, id: &str) -> std::result::Result<Slot, StoreError> {
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    fn expired(&self, s: &DialogueSession) -> bool {
        s.last_active.elapsed() >= self.config.idle_timeout
    }

    fn evict(&self, s: &DialogueSession) {
        self.sessions.lock().expect("session map").remove(&s.id);
        if let Some(p) = &s.log {
            if let Err(e) = fs::remove_file(p) {
                log::warn!("could not remove transcript {}: {e}", p.display());
            }
        }
    }

    /// Exclusive access to a live session, honoring the busy policy.
    pub async fn acquire(&self, id: &str) -> std::result::Result<OwnedMutexGuard<DialogueSession>, StoreError> {
        let slot = self.slot(id)?;
        let guard = match self.config.busy {
            BusyPolicy::Queue => slot.lock_owned().await,
            BusyPolicy::Reject => slot.try_lock_owned().map_err(|_| StoreError::Busy(id.to_string()))?,
        };
        if self.expired(&guard) {
            self.evict(&guard);
            return Err(StoreError::NotFound(id.to_string()));
        }
        Ok(guard)
    }

    /// Runs the next round on a held session.
    pub fn advance(&self, s: &mut DialogueSession, text: &str) -> std::result::Result<ApiRoundResult, StoreError> {
        let (state, result) = self.engine.advance(s.state.clone(), text)?;
        if let Some(p) = &s.log {
            append(p, &LogRecord::Round { text: text.to_string() }, false)?;
        }
        s.state = state;
        s.texts.push(text.to_string());
        s.results.push(result.clone());
        s.last_active = Instant::now();
        Ok(result)
    }

    pub fn snapshot(&self, s: &DialogueSession) -> std::result::Result<SessionSnapshot, StoreError> {
        let metrics = match &s.target_id {
            Some(_) => {
                let ranks: Vec<usize> = s.results.iter().filter_map(|r| r.target_rank).collect();
                Some(hit_recall_mhr(&[ranks], self.engine.k)?)
            }
            None => None,
        };
        Ok(SessionSnapshot {
            session_id: s.id.clone(),
            target_id: s.target_id.clone(),
            transcript: s
                .texts
                .iter()
                .enumerate()
                .map(|(round, text)| TranscriptEntry { round, text: text.clone() })
                .collect(),
            results: s.results.clone(),
            metrics,
        })
    }

    /// Drops idle sessions that are not in use.
    pub fn sweep(&self) -> usize {
        let slots: Vec<Slot> = self.sessions.lock().expect("session map").values().cloned().collect();
        let mut dropped = 0;
        for slot in slots {
            if let Ok(g) = slot.try_lock() {
                if self.expired(&g) {
                    self.evict(&g);
                    dropped += 1;
                }
            }
        }
        dropped
    }
}
