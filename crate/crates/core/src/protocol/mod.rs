//! The clinical protocol: records, prescriptions, results, emergency
//! snapshots, the messages that carry them and the entities that send them.

pub mod emergency;
pub mod messages;
pub mod nodes;
pub mod prescription;
pub mod record;
pub mod result;
