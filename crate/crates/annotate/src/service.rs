//! Session state, persisted as an append-only event log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use reid_core::annotation::{
    score_part, write_scores_csv, AnnotationConfig, AnnotationSession, PartScore, SessionState,
};
use reid_core::imaging::{load_image, Image};
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::ServiceError;

pub const EVENTS_FILE: &str = "events.log";

/// Grey level of pixels outside the revealed part.
pub const MASK_GREY: u8 = 128;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ServiceConfig {
    /// Seed for gallery sampling; each session also mixes in its id.
    pub seed: u64,
    pub annotation: AnnotationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum Event {
    Created {
        session: String,
        labeler: String,
        part: String,
        target: String,
        sample: Vec<String>,
    },
    Trial {
        session: String,
        chosen: String,
    },
}

/// What a labeler may see of a session. The target position is only
/// present once the session is closed.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionView {
    pub id: String,
    pub labeler: String,
    pub part: String,
    pub state: SessionState,
    pub sample_size: usize,
    /// Sample positions picked so far, in order.
    pub picks: Vec<usize>,
    pub target: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialReply {
    pub correct: bool,
    pub trials: usize,
    pub state: SessionState,
}

struct Inner {
    sessions: BTreeMap<String, AnnotationSession>,
    log: File,
}

pub struct Service {
    catalog: Catalog,
    cfg: ServiceConfig,
    inner: Mutex<Inner>,
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn view(s: &AnnotationSession) -> SessionView {
    let position = |id: &str| {
        s.sample()
            .iter()
            .position(|g| g == id)
            .expect("trials are drawn from the sample")
    };
    SessionView {
        id: s.id.clone(),
        labeler: s.labeler.clone(),
        part: s.part_id.clone(),
        state: s.state(),
        sample_size: s.sample().len(),
        picks: s.trials().iter().map(|t| position(t)).collect(),
        target: s.is_closed().then(|| position(s.target())),
    }
}

fn encode_png(img: &Image) -> Result<Vec<u8>, ServiceError> {
    let mut out = Cursor::new(Vec::new());
    img.to_rgb_image()
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?;
    Ok(out.into_inner())
}

fn apply(sessions: &mut BTreeMap<String, AnnotationSession>, event: Event) -> Result<(), ServiceError> {
    match event {
        Event::Created {
            session,
            labeler,
            part,
            target,
            sample,
        } => {
            if sessions.contains_key(&session) {
                return Err(ServiceError::Conflict(format!("session {session} already exists")));
            }
            let s = AnnotationSession::restore(session.clone(), labeler, part, target, sample)?;
            sessions.insert(session, s);
        }
        Event::Trial { session, chosen } => {
            sessions
                .get_mut(&session)
                .ok_or_else(|| ServiceError::NotFound(format!("session {session}")))?
                .record_trial(&chosen)
                .map_err(|e| ServiceError::Conflict(e.to_string()))?;
        }
    }
    Ok(())
}

/// Replays `path`. A final line cut short by a crash is dropped and the
/// file truncated to the last complete event; any other bad line is an
/// error.
fn replay(path: &Path) -> Result<BTreeMap<String, AnnotationSession>, ServiceError> {
    let mut sessions = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(sessions),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut good = 0u64;
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line)?;
        if read == 0 {
            break;
        }
        n += 1;
        let complete = line.ends_with('\n');
        match serde_json::from_str::<Event>(line.trim_end()) {
            Ok(event) if complete => {
                apply(&mut sessions, event)
                    .map_err(|e| ServiceError::Conflict(format!("{}:{n}: {e}", path.display())))?;
                good += read as u64;
            }
            _ if !complete => {
                OpenOptions::new().write(true).open(path)?.set_len(good)?;
                break;
            }
            Ok(_) => unreachable!(),
            Err(e) => {
                return Err(ServiceError::Conflict(format!(
                    "{}:{n}: bad event: {e}",
                    path.display()
                )));
            }
        }
    }
    Ok(sessions)
}

impl Service {
    /// Loads the catalog from `dir` and replays `dir/events.log`.
    pub fn open(dir: &Path, cfg: ServiceConfig) -> Result<Self, ServiceError> {
        Self::with_catalog(Catalog::load(dir)?, &dir.join(EVENTS_FILE), cfg)
    }

    pub fn with_catalog(catalog: Catalog, log_path: &Path, cfg: ServiceConfig) -> Result<Self, ServiceError> {
        cfg.annotation.validate()?;
        let sessions = replay(log_path)?;
        let log = OpenOptions::new().create(true).append(true).open(log_path)?;
        Ok(Self {
            catalog,
            cfg,
            inner: Mutex::new(Inner { sessions, log }),
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn append(log: &mut File, event: &Event) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(event).map_err(|e| ServiceError::Io(e.into()))?;
        line.push('\n');
        log.write_all(line.as_bytes())?;
        log.sync_data()?;
        Ok(())
    }

    /// Opens a session for `labeler` on `part`. Without an explicit id the
    /// next free `sNNNNNN` id is used.
    pub fn create_session(&self, labeler: &str, part: &str, id: Option<&str>) -> Result<SessionView, ServiceError> {
        let mask = self
            .catalog
            .part(part)
            .ok_or_else(|| ServiceError::NotFound(format!("part {part}")))?;
        let (target, pool) = self.catalog.gallery_for(mask)?;
        let mut inner = self.lock();
        let id = match id {
            Some(id) if !valid_session_id(id) => {
                return Err(ServiceError::BadRequest(format!("invalid session id {id:?}")));
            }
            Some(id) if inner.sessions.contains_key(id) => {
                return Err(ServiceError::Conflict(format!("session {id} already exists")));
            }
            Some(id) => id.to_string(),
            None => (inner.sessions.len() + 1..)
                .map(|n| format!("s{n:06}"))
                .find(|id| !inner.sessions.contains_key(id))
                .expect("unbounded range"),
        };
        let session = AnnotationSession::create(&id, labeler, part, target, &pool, self.cfg.seed)
            .map_err(|e| ServiceError::Conflict(e.to_string()))?;
        let event = Event::Created {
            session: id.clone(),
            labeler: session.labeler.clone(),
            part: session.part_id.clone(),
            target: session.target().to_string(),
            sample: session.sample().to_vec(),
        };
        Self::append(&mut inner.log, &event)?;
        let v = view(&session);
        inner.sessions.insert(id, session);
        Ok(v)
    }

    pub fn session(&self, id: &str) -> Result<SessionView, ServiceError> {
        let inner = self.lock();
        inner
            .sessions
            .get(id)
            .map(view)
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    /// Records a pick of sample position `choice`.
    pub fn record_trial(&self, id: &str, choice: usize) -> Result<TrialReply, ServiceError> {
        let mut inner = self.lock();
        let session = inner
            .sessions
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))?;
        if session.is_closed() {
            return Err(ServiceError::Conflict(format!("session {id} is closed")));
        }
        let chosen = session
            .sample()
            .get(choice)
            .ok_or_else(|| ServiceError::BadRequest(format!("choice {choice} outside 0..{}", session.sample().len())))?
            .clone();
        let mut next = session.clone();
        let outcome = next.record_trial(&chosen)?;
        Self::append(
            &mut inner.log,
            &Event::Trial {
                session: id.to_string(),
                chosen,
            },
        )?;
        let state = next.state();
        inner.sessions.insert(id.to_string(), next);
        Ok(TrialReply {
            correct: outcome.correct,
            trials: outcome.trials,
            state,
        })
    }

    fn image_path(&self, image_id: &str) -> Result<PathBuf, ServiceError> {
        self.catalog
            .image(image_id)
            .map(|e| e.path.clone())
            .ok_or_else(|| ServiceError::NotFound(format!("image {image_id}")))
    }

    /// The session's probe image with everything outside the part grey.
    pub fn query_png(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        let part = self.session(id)?.part;
        let mask = self
            .catalog
            .part(&part)
            .ok_or_else(|| ServiceError::NotFound(format!("part {part}")))?;
        let mut img = load_image(self.image_path(&mask.image_id)?)?;
        if (img.width(), img.height()) != (mask.width(), mask.height()) {
            return Err(reid_core::Error::ShapeMismatch {
                left: (img.height(), img.width()),
                right: (mask.height(), mask.width()),
            }
            .into());
        }
        for row in 0..img.height() {
            for col in 0..img.width() {
                if !mask.contains(row, col) {
                    img.set_pixel(row, col, [MASK_GREY; 3]);
                }
            }
        }
        encode_png(&img)
    }

    /// Gallery image at sample position `k`.
    pub fn gallery_png(&self, id: &str, k: usize) -> Result<Vec<u8>, ServiceError> {
        let image_id = {
            let inner = self.lock();
            let s = inner
                .sessions
                .get(id)
                .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))?;
            s.sample()
                .get(k)
                .cloned()
                .ok_or_else(|| ServiceError::NotFound(format!("gallery position {k}")))?
        };
        encode_png(&load_image(self.image_path(&image_id)?)?)
    }

    /// Scores a part from the closed sessions in one consistent snapshot.
    pub fn part_score(&self, part: &str) -> Result<PartScore, ServiceError> {
        let mask = self
            .catalog
            .part(part)
            .ok_or_else(|| ServiceError::NotFound(format!("part {part}")))?;
        let inner = self.lock();
        score_part(&mask.image_id, part, inner.sessions.values(), &self.cfg.annotation)
            .map_err(|e| ServiceError::Conflict(e.to_string()))
    }

    /// Scores of every part with enough closed sessions.
    pub fn scores(&self) -> Vec<PartScore> {
        let inner = self.lock();
        self.catalog
            .parts()
            .filter_map(|m| score_part(&m.image_id, &m.part_id, inner.sessions.values(), &self.cfg.annotation).ok())
            .collect()
    }

    pub fn export_csv(&self) -> Result<String, ServiceError> {
        let mut out = Vec::new();
        write_scores_csv(&self.scores(), &mut out)?;
        Ok(String::from_utf8(out).expect("csv output is UTF-8"))
    }
}
