//! Physician-signed test orders.

use std::collections::BTreeSet;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{hex_bytes, sign, verify, CryptoError, Signature, SigningIdentity, VerifyingKey};

pub const NONCE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prescription {
    pub tests: BTreeSet<String>,
    pub physician_pub: VerifyingKey,
    #[serde(with = "hex_bytes")]
    pub nonce: Vec<u8>,
    pub signature: Signature,
}

/// Bytes covered by the physician's signature.
pub fn signing_bytes(tests: &BTreeSet<String>, nonce: &[u8]) -> Vec<u8> {
    let mut out = b"dapriv/prescription/v1".to_vec();
    out.extend_from_slice(&(nonce.len() as u32).to_be_bytes());
    out.extend_from_slice(nonce);
    out.extend_from_slice(&(tests.len() as u32).to_be_bytes());
    for t in tests {
        out.extend_from_slice(&(t.len() as u32).to_be_bytes());
        out.extend_from_slice(t.as_bytes());
    }
    out
}

/// `None` when there is nothing to authorize.
pub fn issue_prescription<R: RngCore + CryptoRng>(
    physician: &SigningIdentity,
    tests: BTreeSet<String>,
    rng: &mut R,
) -> Option<Prescription> {
    if tests.is_empty() {
        return None;
    }
    let mut nonce = vec![0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let signature = sign(&signing_bytes(&tests, &nonce), physician);
    Some(Prescription {
        tests,
        physician_pub: physician.public(),
        nonce,
        signature,
    })
}

impl Prescription {
    /// Checks the signature against the embedded physician key. Whether that
    /// key belongs to a registered physician is the verifier's call.
    pub fn verify(&self) -> Result<bool, CryptoError> {
        if self.signature.signer_public != self.physician_pub {
            return Ok(false);
        }
        verify(
            &signing_bytes(&self.tests, &self.nonce),
            &self.signature,
            &self.physician_pub,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_identity;
    use crate::rng::seeded;

    fn tests(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn issued_prescription_verifies() {
        let doc = generate_identity(1, "doctor");
        let p = issue_prescription(&doc, tests(&["blood_panel"]), &mut seeded(2)).unwrap();
        assert_eq!(p.verify(), Ok(true));
        assert_eq!(p.physician_pub, doc.public());
    }

    #[test]
    fn patient_cannot_add_tests() {
        let doc = generate_identity(1, "doctor");
        let mut p = issue_prescription(&doc, tests(&["blood_panel"]), &mut seeded(2)).unwrap();
        p.tests.insert("mri".into());
        assert_eq!(p.verify(), Ok(false));
    }

    #[test]
    fn empty_order_is_refused() {
        let doc = generate_identity(1, "doctor");
        assert!(issue_prescription(&doc, BTreeSet::new(), &mut seeded(2)).is_none());
    }

    #[test]
    fn nonces_differ_between_prescriptions() {
        let doc = generate_identity(1, "doctor");
        let mut rng = seeded(3);
        let a = issue_prescription(&doc, tests(&["xray"]), &mut rng).unwrap();
        let b = issue_prescription(&doc, tests(&["xray"]), &mut rng).unwrap();
        assert_ne!(a.nonce, b.nonce);
    }

    #[test]
    fn substituted_physician_key_fails() {
        let doc = generate_identity(1, "doctor");
        let other = generate_identity(9, "quack");
        let mut p = issue_prescription(&doc, tests(&["xray"]), &mut seeded(2)).unwrap();
        p.physician_pub = other.public();
        assert_eq!(p.verify(), Ok(false));
    }
}
