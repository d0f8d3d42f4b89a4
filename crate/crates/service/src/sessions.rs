//! Session state with an append-only JSONL journal.
//!
//! Every mutation is written and fsynced as one journal line before it is
//! applied in memory; on startup the journal is replayed in order. A torn
//! final line (crash mid-write) is dropped with a warning.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use convctl_core::extract::{ConversationPath, ReferenceTuple, Turn, UserReferenceStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub model_id: String,
    pub speakers: Vec<String>,
    pub conversation: ConversationPath,
    pub references: UserReferenceStore,
    /// Unix seconds.
    pub created_at: u64,
}

impl Session {
    pub fn has_speaker(&self, author: &str) -> bool {
        self.speakers.iter().any(|s| s == author)
    }

    /// Id of the next appended turn; deterministic so replay reproduces it.
    fn next_turn_id(&self) -> String {
        format!("t{}", self.conversation.turns.len())
    }

    pub fn push_turn(&mut self, author: &str, text: &str) {
        let turn = Turn {
            comment_id: self.next_turn_id(),
            author: author.to_string(),
            text: text.to_string(),
            score: 0,
        };
        self.conversation.turns.push(turn);
    }

    fn apply(&mut self, event: &Event) {
        match event {
            Event::Created { .. } => {}
            Event::TurnAdded { author, text, .. } => self.push_turn(author, text),
            Event::ReferencesSet { author, tuples, .. } => self.references.insert(author.clone(), tuples.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session: Session,
    },
    TurnAdded {
        session_id: String,
        author: String,
        text: String,
    },
    ReferencesSet {
        session_id: String,
        author: String,
        tuples: Vec<ReferenceTuple>,
    },
}

impl Event {
    fn session_id(&self) -> &str {
        match self {
            Event::Created { session } => &session.session_id,
            Event::TurnAdded { session_id, .. } | Event::ReferencesSet { session_id, .. } => session_id,
        }
    }
}

#[derive(Debug)]
struct Journal {
    path: PathBuf,
    file: std::sync::Mutex<File>,
}

impl Journal {
    fn open(path: &Path) -> std::io::Result<(Self, Vec<Event>)> {
        let mut events = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (idx, line) in reader.split(b'\n').enumerate() {
                let line = line?;
                match serde_json::from_slice::<Event>(&line) {
                    Ok(ev) => {
                        events.push(ev);
                        valid_len += line.len() as u64 + 1;
                    }
                    Err(e) => {
                        tracing::warn!(line = idx + 1, error = %e, "dropping unreadable journal tail");
                        break;
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        // Cut a torn tail so later appends start on a clean line.
        if file.metadata()?.len() > valid_len {
            file.set_len(valid_len)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file: std::sync::Mutex::new(file),
            },
            events,
        ))
    }

    fn append(&self, event: &Event) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("journal lock");
        f.write_all(&line)?;
        f.sync_data()
    }
}

pub type SessionHandle = Arc<Mutex<Session>>;

/// In-memory sessions, optionally backed by a journal.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, SessionHandle>>,
    journal: Option<Journal>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the journal at `path` and replays it.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let (journal, events) = Journal::open(path)?;
        let mut map: HashMap<String, Session> = HashMap::new();
        for ev in &events {
            match ev {
                Event::Created { session } => {
                    map.insert(session.session_id.clone(), session.clone());
                }
                other => match map.get_mut(other.session_id()) {
                    Some(s) => s.apply(other),
                    None => tracing::warn!(session = other.session_id(), "journal event for unknown session"),
                },
            }
        }
        tracing::info!(path = %journal.path.display(), sessions = map.len(), events = events.len(), "replayed session journal");
        Ok(Self {
            sessions: RwLock::new(map.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect()),
            journal: Some(journal),
        })
    }

    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.read().expect("session map lock").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session map lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn log(&self, event: &Event) -> std::io::Result<()> {
        match &self.journal {
            Some(j) => j.append(event),
            None => Ok(()),
        }
    }

    pub fn create(&self, session: Session) -> std::io::Result<()> {
        let event = Event::Created { session };
        self.log(&event)?;
        let Event::Created { session } = event else { unreachable!() };
        self.sessions
            .write()
            .expect("session map lock")
            .insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
        Ok(())
    }

    /// Journals then applies a mutation to a session the caller has locked.
    pub fn add_turn(&self, session: &mut Session, author: &str, text: &str) -> std::io::Result<()> {
        self.log(&Event::TurnAdded {
            session_id: session.session_id.clone(),
            author: author.to_string(),
            text: text.to_string(),
        })?;
        session.push_turn(author, text);
        Ok(())
    }

    pub fn set_references(&self, session: &mut Session, author: &str, tuples: Vec<ReferenceTuple>) -> std::io::Result<()> {
        let event = Event::ReferencesSet {
            session_id: session.session_id.clone(),
            author: author.to_string(),
            tuples,
        };
        self.log(&event)?;
        session.apply(&event);
        Ok(())
    }
}
