//! The audit surface: every delivered message, every plaintext an entity
//! came to hold, and every injected fault, in logical-time order.

use std::fmt;

use serde::Serialize;

use crate::coordination::SessionId;
use crate::crypto::EncryptionKey;
use crate::protocol::messages::Payload;
use crate::protocol::record::Fields;
use crate::sim::EntityId;

/// An identifier an observer could join on. Variant order is join priority:
/// a national id beats a public key, which beats a session id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Token {
    NationalId(String),
    PublicKey(EncryptionKey),
    Session(SessionId),
    Opaque(String),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::NationalId(v) => write!(f, "ssn:{v}"),
            Token::PublicKey(k) => write!(f, "key:{k}"),
            Token::Session(s) => write!(f, "session:{s}"),
            Token::Opaque(v) => write!(f, "opaque:{v}"),
        }
    }
}

/// The interaction an observation belongs to, from the observer's side.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Session(SessionId),
    Submission { session: SessionId, slot: usize },
    Isolated(String),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Session(s) => write!(f, "session:{s}"),
            Scope::Submission { session, slot } => write!(f, "submission:{session}/{slot}"),
            Scope::Isolated(tag) => write!(f, "{tag}"),
        }
    }
}

/// What one message or disclosure taught its receiver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObservedItem {
    pub scope: Scope,
    pub identifiers: Vec<Token>,
    pub attributes: Fields,
}

impl ObservedItem {
    pub fn new(scope: Scope) -> Self {
        Self {
            scope,
            identifiers: Vec::new(),
            attributes: Fields::new(),
        }
    }

    pub fn with_id(mut self, token: Token) -> Self {
        if !self.identifiers.contains(&token) {
            self.identifiers.push(token);
        }
        self
    }

    pub fn with_attributes(mut self, fields: &Fields) -> Self {
        self.attributes
            .extend(fields.iter().map(|(k, v)| (k.clone(), v.clone())));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "label")]
pub enum LogKind {
    Message(String),
    /// The entity now holds this plaintext.
    Disclosure(String),
    /// A fault was injected into the target's storage.
    Fault(String),
}

impl LogKind {
    pub fn label(&self) -> String {
        match self {
            LogKind::Message(t) => t.clone(),
            LogKind::Disclosure(l) => format!("disclose:{l}"),
            LogKind::Fault(l) => format!("fault:{l}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub time: u64,
    pub sender: EntityId,
    pub receiver: EntityId,
    pub kind: LogKind,
    pub session: Option<SessionId>,
    pub digest: String,
    pub observed: Vec<ObservedItem>,
    #[serde(skip)]
    pub payload: Option<Payload>,
}

impl LogRecord {
    pub fn is_message(&self) -> bool {
        matches!(self.kind, LogKind::Message(_))
    }

    pub fn message_type(&self) -> Option<&str> {
        match &self.kind {
            LogKind::Message(t) => Some(t),
            _ => None,
        }
    }

    /// Tab-separated `time sender receiver type session digest`.
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.time,
            self.sender,
            self.receiver,
            self.kind.label(),
            self.session.map_or_else(|| "-".to_string(), |s| s.to_string()),
            self.digest
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    pub fn lines(&self) -> impl Iterator<Item = String> + '_ {
        self.records.iter().map(LogRecord::line)
    }

    /// Digest over every line, in order.
    pub fn digest(&self) -> String {
        let mut all = String::new();
        for line in self.lines() {
            all.push_str(&line);
            all.push('\n');
        }
        crate::crypto::digest_hex(all.as_bytes())
    }

    pub fn messages(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| r.is_message())
    }
}
