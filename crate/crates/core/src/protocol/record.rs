//! Medical records, their provenance, and patient-side sanitization.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{sign, verify, Signature, SigningIdentity, VerifyingKey};

pub const NAME: &str = "name";
pub const NATIONAL_ID: &str = "ssn";
pub const BIRTH_DATE: &str = "birth_date";
pub const ZIP: &str = "zip";
pub const GENDER: &str = "gender";
pub const DIAGNOSIS: &str = "diagnosis";

pub const EXPLICIT_ID_FIELDS: [&str; 2] = [NAME, NATIONAL_ID];
pub const QUASI_ID_FIELDS: [&str; 3] = [BIRTH_DATE, ZIP, GENDER];

pub type Fields = BTreeMap<String, String>;

pub fn is_explicit_id(field: &str) -> bool {
    EXPLICIT_ID_FIELDS.contains(&field)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplicitIds {
    pub name: String,
    pub national_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuasiIds {
    pub birth_date: String,
    pub zip: String,
    pub gender: String,
}

/// A signature by an issuing entity over the current values of `fields`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    pub fields: BTreeSet<String>,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalRecord {
    pub explicit_ids: ExplicitIds,
    pub quasi_ids: QuasiIds,
    pub sensitive: Fields,
    pub provenance: Vec<Attestation>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProvenanceFault {
    #[error("attestation covers missing field `{0}`")]
    MissingField(String),
    #[error("attestation signature does not verify")]
    BadSignature,
    #[error("attestation signer is not a registered issuer")]
    UnknownIssuer(VerifyingKey),
    #[error("issuers may not attest identifying field `{0}`")]
    ForbiddenField(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SanitizeError {
    #[error("share policy names unknown field `{0}`")]
    UnknownField(String),
}

/// Length-prefixed encoding of `(field, value)` pairs in key order. This is
/// what issuers sign.
pub fn canonical_fields(fields: &Fields) -> Vec<u8> {
    let mut out = b"dapriv/fields/v1".to_vec();
    out.extend_from_slice(&(fields.len() as u32).to_be_bytes());
    for (k, v) in fields {
        out.extend_from_slice(&(k.len() as u32).to_be_bytes());
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&(v.len() as u32).to_be_bytes());
        out.extend_from_slice(v.as_bytes());
    }
    out
}

impl MedicalRecord {
    pub fn new(explicit_ids: ExplicitIds, quasi_ids: QuasiIds, sensitive: Fields) -> Self {
        Self {
            explicit_ids,
            quasi_ids,
            sensitive,
            provenance: Vec::new(),
        }
    }

    /// All fields, flattened into one map.
    pub fn fields(&self) -> Fields {
        let mut out = self.sensitive.clone();
        out.insert(NAME.into(), self.explicit_ids.name.clone());
        out.insert(NATIONAL_ID.into(), self.explicit_ids.national_id.clone());
        out.insert(BIRTH_DATE.into(), self.quasi_ids.birth_date.clone());
        out.insert(ZIP.into(), self.quasi_ids.zip.clone());
        out.insert(GENDER.into(), self.quasi_ids.gender.clone());
        out
    }

    pub fn field(&self, name: &str) -> Option<String> {
        match name {
            NAME => Some(self.explicit_ids.name.clone()),
            NATIONAL_ID => Some(self.explicit_ids.national_id.clone()),
            BIRTH_DATE => Some(self.quasi_ids.birth_date.clone()),
            ZIP => Some(self.quasi_ids.zip.clone()),
            GENDER => Some(self.quasi_ids.gender.clone()),
            other => self.sensitive.get(other).cloned(),
        }
    }

    fn project(&self, names: &BTreeSet<String>) -> Result<Fields, ProvenanceFault> {
        names
            .iter()
            .map(|n| {
                self.field(n)
                    .map(|v| (n.clone(), v))
                    .ok_or_else(|| ProvenanceFault::MissingField(n.clone()))
            })
            .collect()
    }

    /// Adds an attestation by `issuer` over the current values of `names`.
    pub fn attest(&mut self, issuer: &SigningIdentity, names: BTreeSet<String>) {
        let projection = self
            .project(&names)
            .expect("attesting fields the record does not have");
        let signature = sign(&canonical_fields(&projection), issuer);
        self.provenance.push(Attestation {
            fields: names,
            signature,
        });
    }

    /// Every attestation verifies against the current field values and was
    /// made by an issuer `trusted` accepts.
    pub fn verify_provenance(&self, trusted: impl Fn(&VerifyingKey) -> bool) -> Result<(), ProvenanceFault> {
        for att in &self.provenance {
            let signer = att.signature.signer_public;
            if !trusted(&signer) {
                return Err(ProvenanceFault::UnknownIssuer(signer));
            }
            let projection = self.project(&att.fields)?;
            if !matches!(verify(&canonical_fields(&projection), &att.signature, &signer), Ok(true)) {
                return Err(ProvenanceFault::BadSignature);
            }
        }
        Ok(())
    }
}

/// A patient's own copy of its record, plus anything that failed
/// provenance checks on the way in.
#[derive(Debug, Clone)]
pub struct RecordVault {
    current: MedicalRecord,
    quarantined: Vec<(Fields, ProvenanceFault)>,
}

impl RecordVault {
    pub fn new(record: MedicalRecord) -> Self {
        Self {
            current: record,
            quarantined: Vec::new(),
        }
    }

    pub fn record(&self) -> &MedicalRecord {
        &self.current
    }

    pub fn quarantined(&self) -> &[(Fields, ProvenanceFault)] {
        &self.quarantined
    }

    /// Merges `fields` signed by `signature` into the record. Fields whose
    /// signature does not verify, or whose issuer is not trusted, are
    /// quarantined instead.
    pub fn ingest(
        &mut self,
        fields: Fields,
        signature: Signature,
        trusted: impl Fn(&VerifyingKey) -> bool,
    ) -> Result<(), ProvenanceFault> {
        let signer = signature.signer_public;
        let fault = if !trusted(&signer) {
            Some(ProvenanceFault::UnknownIssuer(signer))
        } else if !matches!(verify(&canonical_fields(&fields), &signature, &signer), Ok(true)) {
            Some(ProvenanceFault::BadSignature)
        } else if let Some(explicit) = fields.keys().find(|k| is_explicit_id(k) || QUASI_ID_FIELDS.contains(&k.as_str())) {
            Some(ProvenanceFault::ForbiddenField(explicit.clone()))
        } else {
            None
        };
        if let Some(fault) = fault {
            self.quarantined.push((fields, fault.clone()));
            return Err(fault);
        }
        let names = fields.keys().cloned().collect();
        self.current.sensitive.extend(fields);
        self.current.provenance.push(Attestation { fields: names, signature });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanitizeWarning {
    /// The policy asked for an explicit identifier; it was dropped.
    ExplicitIdentifierWithheld(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizedRecord {
    pub fields: Fields,
    #[serde(skip)]
    pub warnings: Vec<SanitizeWarning>,
}

/// Keeps exactly the fields named in `share_policy`, never the explicit
/// identifiers, and drops all provenance.
pub fn sanitize_record(record: &MedicalRecord, share_policy: &BTreeSet<String>) -> Result<SanitizedRecord, SanitizeError> {
    let mut out = SanitizedRecord::default();
    for name in share_policy {
        if is_explicit_id(name) {
            out.warnings
                .push(SanitizeWarning::ExplicitIdentifierWithheld(name.clone()));
            continue;
        }
        let value = record
            .field(name)
            .ok_or_else(|| SanitizeError::UnknownField(name.clone()))?;
        out.fields.insert(name.clone(), value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_identity;

    fn record() -> MedicalRecord {
        MedicalRecord::new(
            ExplicitIds {
                name: "Ada Byron".into(),
                national_id: "123-45-6789".into(),
            },
            QuasiIds {
                birth_date: "1985-03-14".into(),
                zip: "47677".into(),
                gender: "F".into(),
            },
            [(DIAGNOSIS.to_string(), "asthma".to_string())].into(),
        )
    }

    fn policy(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn keeps_exactly_the_policy_fields() {
        let out = sanitize_record(&record(), &policy(&[BIRTH_DATE, DIAGNOSIS])).unwrap();
        assert_eq!(out.fields.len(), 2);
        assert_eq!(out.fields[BIRTH_DATE], "1985-03-14");
        assert_eq!(out.fields[DIAGNOSIS], "asthma");
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn explicit_ids_are_always_dropped() {
        let out = sanitize_record(&record(), &policy(&[NATIONAL_ID, ZIP])).unwrap();
        assert_eq!(out.fields.keys().collect::<Vec<_>>(), vec![ZIP]);
        assert_eq!(
            out.warnings,
            vec![SanitizeWarning::ExplicitIdentifierWithheld(NATIONAL_ID.into())]
        );
    }

    #[test]
    fn empty_policy_gives_empty_record() {
        let out = sanitize_record(&record(), &BTreeSet::new()).unwrap();
        assert!(out.fields.is_empty());
    }

    #[test]
    fn unknown_policy_field_is_an_error() {
        assert_eq!(
            sanitize_record(&record(), &policy(&["shoe_size"])),
            Err(SanitizeError::UnknownField("shoe_size".into()))
        );
    }

    #[test]
    fn provenance_detects_tampering() {
        let doctor = generate_identity(1, "doctor");
        let mut rec = record();
        rec.attest(&doctor, policy(&[DIAGNOSIS, BIRTH_DATE]));
        let trusted = |k: &VerifyingKey| *k == doctor.public();
        assert_eq!(rec.verify_provenance(trusted), Ok(()));

        rec.sensitive.insert(DIAGNOSIS.into(), "healthy".into());
        assert_eq!(rec.verify_provenance(trusted), Err(ProvenanceFault::BadSignature));
        assert!(matches!(
            rec.verify_provenance(|_| false),
            Err(ProvenanceFault::UnknownIssuer(_))
        ));
    }

    #[test]
    fn vault_quarantines_bad_results() {
        let lab = generate_identity(2, "lab");
        let mut vault = RecordVault::new(record());
        let trusted = |k: &VerifyingKey| *k == lab.public();

        let good: Fields = [("blood_panel".to_string(), "normal".to_string())].into();
        let sig = sign(&canonical_fields(&good), &lab);
        vault.ingest(good, sig.clone(), trusted).unwrap();
        assert_eq!(vault.record().sensitive["blood_panel"], "normal");
        assert_eq!(vault.record().verify_provenance(trusted), Ok(()));

        let forged: Fields = [("xray".to_string(), "clear".to_string())].into();
        assert_eq!(vault.ingest(forged, sig, trusted), Err(ProvenanceFault::BadSignature));
        assert_eq!(vault.quarantined().len(), 1);
        assert!(!vault.record().sensitive.contains_key("xray"));
    }
}
