use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Identifies an uploading client. Benign clients use their user index;
/// malicious clients are numbered after the last real user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClientId(pub usize);

/// Public-parameter delta uploaded by one client after local training.
///
/// There is deliberately no field for a user embedding: private parameters
/// cannot be expressed in an upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientUpdate {
    pub client_id: ClientId,
    /// Per-item embedding delta, only for items the client touched.
    pub item_deltas: BTreeMap<usize, Vec<f64>>,
    /// Delta of the MLP tower and output head, in the tower's flat layout.
    pub mlp_delta: Vec<f64>,
}

impl GradientUpdate {
    pub fn empty(client_id: ClientId, mlp_len: usize) -> Self {
        Self {
            client_id,
            item_deltas: BTreeMap::new(),
            mlp_delta: vec![0.0; mlp_len],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mlp_delta.iter().all(|x| x.is_finite())
            && self.item_deltas.values().flatten().all(|x| x.is_finite())
    }

    /// L2 norm over every uploaded coordinate.
    pub fn norm(&self) -> f64 {
        let items: f64 = self.item_deltas.values().flatten().map(|x| x * x).sum();
        let mlp: f64 = self.mlp_delta.iter().map(|x| x * x).sum();
        (items + mlp).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.mlp_delta.iter().all(|&x| x == 0.0) && self.item_deltas.values().flatten().all(|&x| x == 0.0)
    }
}
