//! Structural identifiability of latent factors from the design matrix.
//!
//! Factor `k` is identifiable iff the intersection of every factor subset `S`
//! that contains `k` and is measured by at least one item on exactly `S`
//! (`R_Q(S) ≠ ∅`) equals `{k}`. When no such subset exists the intersection
//! is empty and the factor is not identifiable.
//!
//! Subsets are `u32` bitmasks; bit `k` stands for factor `k` (0-based).

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::DesignMatrix;

pub const MAX_FACTORS: usize = 20;

/// Items that load on exactly the factors in `s`.
pub fn r_q(q: &DesignMatrix, s: u32) -> Vec<usize> {
    (0..q.items()).filter(|&j| q.row_mask(j) == u64::from(s)).collect()
}

/// Outcome of the subset enumeration for one factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FactorVerdict {
    pub factor: usize,
    pub identifiable: bool,
    /// Intersection of the measured subsets containing the factor; empty
    /// when no item measures the factor at all.
    pub witness: Vec<usize>,
    /// The subset at which the running intersection first reached `{k}`.
    pub certificate: Option<Vec<usize>>,
}

/// Decides whether factor `k` (0-based) is structurally identifiable.
pub fn factor_identifiable(q: &DesignMatrix, k: usize) -> Result<bool> {
    Ok(factor_verdict(q, k, &measured_subsets(q))?.identifiable)
}

fn measured_subsets(q: &DesignMatrix) -> BTreeSet<u32> {
    (0..q.items()).map(|j| q.row_mask(j) as u32).collect()
}

fn factor_verdict(q: &DesignMatrix, k: usize, measured: &BTreeSet<u32>) -> Result<FactorVerdict> {
    let kk = q.factors();
    if k >= kk {
        return Err(Error::FactorIndexOutOfRange { index: k, k: kk });
    }
    if kk > MAX_FACTORS {
        return Err(Error::FactorCountTooLarge(kk));
    }
    let bit = 1u32 << k;
    let mut subsets: Vec<u32> = (1u32..(1u32 << kk)).filter(|s| s & bit != 0).collect();
    subsets.sort_by_key(|s| (s.count_ones(), *s));

    let mut acc: Option<u32> = None;
    let mut certificate = None;
    for s in subsets {
        if !measured.contains(&s) {
            continue;
        }
        let next = acc.map_or(s, |a| a & s);
        acc = Some(next);
        if next == bit {
            certificate = Some(s);
            break;
        }
    }
    let witness = acc.unwrap_or(0);
    Ok(FactorVerdict {
        factor: k,
        identifiable: witness == bit,
        witness: mask_to_vec(witness),
        certificate: certificate.map(mask_to_vec),
    })
}

fn mask_to_vec(m: u32) -> Vec<usize> {
    (0..32).filter(|b| m & (1 << b) != 0).collect()
}

/// Non-empty `R_Q(S)` set listed for diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MeasuredSubset {
    pub subset: Vec<usize>,
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IdentifiabilityReport {
    pub per_factor: Vec<bool>,
    pub verdicts: Vec<FactorVerdict>,
    pub measured: Vec<MeasuredSubset>,
}

impl IdentifiabilityReport {
    pub fn all_identifiable(&self) -> bool {
        self.per_factor.iter().all(|&b| b)
    }

    pub fn non_identifiable(&self) -> Vec<usize> {
        self.per_factor
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .map(|(k, _)| k)
            .collect()
    }
}

pub fn identifiability_report(q: &DesignMatrix) -> Result<IdentifiabilityReport> {
    if q.factors() > MAX_FACTORS {
        return Err(Error::FactorCountTooLarge(q.factors()));
    }
    let measured = measured_subsets(q);
    let verdicts = (0..q.factors())
        .map(|k| factor_verdict(q, k, &measured))
        .collect::<Result<Vec<_>>>()?;
    let mut listed: Vec<u32> = measured.iter().copied().collect();
    listed.sort_by_key(|s| (s.count_ones(), *s));
    Ok(IdentifiabilityReport {
        per_factor: verdicts.iter().map(|v| v.identifiable).collect(),
        verdicts,
        measured: listed
            .into_iter()
            .map(|s| MeasuredSubset { subset: mask_to_vec(s), items: r_q(q, s) })
            .collect(),
    })
}
