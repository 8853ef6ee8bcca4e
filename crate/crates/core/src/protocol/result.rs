//! Lab results and the pointers that lead to them.

use serde::{Deserialize, Serialize};

use crate::crypto::{sign, verify, Signature, SigningIdentity, SymmetricKey, VerifyingKey};
use crate::protocol::record::{canonical_fields, Fields};

/// Content address of a blob in the shared result store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlobLocation(pub String);

impl BlobLocation {
    pub fn of(ciphertext: &[u8]) -> Self {
        Self(crate::crypto::digest_hex(ciphertext))
    }
}

impl std::fmt::Display for BlobLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// The signed result file a lab encrypts and stores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultFile {
    pub measurements: Fields,
    pub lab_signature: Signature,
}

impl ResultFile {
    pub fn issue(measurements: Fields, lab: &SigningIdentity) -> Self {
        let lab_signature = sign(&canonical_fields(&measurements), lab);
        Self {
            measurements,
            lab_signature,
        }
    }

    pub fn lab(&self) -> VerifyingKey {
        self.lab_signature.signer_public
    }

    pub fn verifies(&self) -> bool {
        matches!(
            verify(&canonical_fields(&self.measurements), &self.lab_signature, &self.lab()),
            Ok(true)
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("result file serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

/// Where a result lives and the key that opens it, signed by the lab.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultPointer {
    pub location: BlobLocation,
    pub symmetric_key: SymmetricKey,
    pub lab_signature: Signature,
}

fn pointer_bytes(location: &BlobLocation, key: &SymmetricKey) -> Vec<u8> {
    let mut out = b"dapriv/pointer/v1".to_vec();
    out.extend_from_slice(location.0.as_bytes());
    out.extend_from_slice(key.as_bytes());
    out
}

impl ResultPointer {
    pub fn issue(location: BlobLocation, symmetric_key: SymmetricKey, lab: &SigningIdentity) -> Self {
        let lab_signature = sign(&pointer_bytes(&location, &symmetric_key), lab);
        Self {
            location,
            symmetric_key,
            lab_signature,
        }
    }

    pub fn verifies(&self) -> bool {
        matches!(
            verify(
                &pointer_bytes(&self.location, &self.symmetric_key),
                &self.lab_signature,
                &self.lab_signature.signer_public
            ),
            Ok(true)
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("pointer serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_identity, symmetric_decrypt, symmetric_encrypt};
    use crate::rng::seeded;

    #[test]
    fn pointer_dereferences_to_verifying_result() {
        let lab = generate_identity(4, "lab");
        let mut rng = seeded(4);
        let file = ResultFile::issue([("xray".to_string(), "clear".to_string())].into(), &lab);
        let key = SymmetricKey::from_rng(&mut rng);
        let blob = symmetric_encrypt(&key, &file.to_bytes(), &mut rng);
        let pointer = ResultPointer::issue(BlobLocation::of(&blob), key, &lab);

        let decoded = ResultPointer::from_bytes(&pointer.to_bytes()).unwrap();
        assert!(decoded.verifies());
        assert_eq!(decoded.location, BlobLocation::of(&blob));
        let plain = symmetric_decrypt(&decoded.symmetric_key, &blob).unwrap();
        let back = ResultFile::from_bytes(&plain).unwrap();
        assert!(back.verifies());
        assert_eq!(back.lab(), lab.public());
    }

    #[test]
    fn altered_measurement_breaks_signature() {
        let lab = generate_identity(4, "lab");
        let mut file = ResultFile::issue([("xray".to_string(), "clear".to_string())].into(), &lab);
        file.measurements.insert("xray".into(), "fracture".into());
        assert!(!file.verifies());
    }
}
