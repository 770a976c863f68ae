//! Closed-form multiply-accumulate counts for one forward pass of one sample.

use serde::Serialize;

use crate::edgemodel::EdgeGeometry;
use crate::permutation::{log2_perm_space, mixup_space_factor};

/// Patch embedding plus classification head.
pub fn edge_macc(geom: &EdgeGeometry) -> u64 {
    let (p, pd, d, c) = (geom.p() as u64, geom.patch_dim() as u64, geom.d as u64, geom.n_classes as u64);
    p * pd * d + d * c
}

/// Per block: Q, K, V and the two MLP layers cost `5pd²`; the score and
/// mixing products cost `2p²d`. Head count does not change the total.
pub fn cloud_macc(p: usize, d: usize, n_layers: usize) -> u64 {
    let (p, d) = (p as u64, d as u64);
    n_layers as u64 * (5 * p * d * d + 2 * p * p * d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfoReport {
    pub p: usize,
    pub d: usize,
    pub n_layers: usize,
    pub edge_macc: u64,
    pub cloud_macc: u64,
    pub log2_perm_space: f64,
    pub mixup_space_factor: u64,
}

pub fn report(geom: &EdgeGeometry, n_layers: usize, batch_size: usize) -> InfoReport {
    let p = geom.p();
    InfoReport {
        p,
        d: geom.d,
        n_layers,
        edge_macc: edge_macc(geom),
        cloud_macc: cloud_macc(p, geom.d, n_layers),
        log2_perm_space: log2_perm_space(p, geom.d),
        mixup_space_factor: mixup_space_factor(batch_size as u64, p as u64),
    }
}
