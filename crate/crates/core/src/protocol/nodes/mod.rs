//! Protocol entities. Each one reacts only to messages addressed to it.

mod accessor;
mod lab;
mod patient;
mod physician;
mod researcher;
mod storage;

use serde::{Deserialize, Serialize};

pub use accessor::AccessorNode;
pub use lab::LabNode;
pub use patient::{PatientNode, PatientSetup};
pub use physician::PhysicianNode;
pub use researcher::ResearcherNode;
pub use storage::{EmergencyServerNode, ResultStoreNode};

/// What a patient hands over at lab intake.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Legacy practice: full identity and demographics at the desk.
    BaselineSsn,
    /// Only the session id and a pool key.
    #[default]
    DaprivKeys,
}
