//! Modal reduction: generalized eigenpairs, the `G`/`H` force split,
//! split integrators and low-rank corrected solves.

mod eigen;
mod smw;
mod split;
mod steps;

use nalgebra::DVector;
use serde::Serialize;

pub use eigen::{
    modal_split_at, smallest_eigpairs, smallest_eigpairs_with, EigenMethod, ModalSplit, RefreshPolicy,
    DENSE_EIGEN_LIMIT,
};
pub use smw::{smw_solve, LowRankBlock, LowRankCorrection};
pub use split::{build_jg_jh, split_forces, ForceSplit, ModalJacobians};
pub use steps::{bdf2ere_step, beere_step, sbdf2ere_step, siere_step, strsbdf2ere_step};

use crate::error::Result;
use crate::system::{split_state, SecondOrderSystem};

/// Comparison of a recomputed split with its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefreshReport {
    /// Largest relative eigenvalue change.
    pub drift: f64,
    /// Largest principal angle between old and new subspaces.
    pub angle: f64,
}

/// Recomputes the split at the positions of `u`, keeping `s` and the policy.
pub fn refresh_split<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    u: &DVector<f64>,
    ms: &ModalSplit,
) -> Result<(ModalSplit, RefreshReport)> {
    let (q, _) = split_state(u, sys.ndof());
    let fresh = modal_split_at(sys, &q, ms.s(), ms.policy)?;
    let report = RefreshReport {
        drift: ms.drift(&fresh),
        angle: ms.subspace_angle(&fresh, sys.mass()),
    };
    log::debug!(
        "modal split refreshed: eigenvalue drift {:.3e}, subspace angle {:.3e}",
        report.drift,
        report.angle
    );
    Ok((fresh, report))
}

/// Owns the current split and applies its refresh policy step by step.
#[derive(Debug, Clone)]
pub struct SplitTracker {
    split: ModalSplit,
    steps: usize,
    recomputations: usize,
    failures: usize,
    last: Option<RefreshReport>,
}

impl SplitTracker {
    pub fn new(split: ModalSplit) -> Self {
        Self {
            split,
            steps: 0,
            recomputations: 0,
            failures: 0,
            last: None,
        }
    }

    pub fn split(&self) -> &ModalSplit {
        &self.split
    }

    pub fn recomputations(&self) -> usize {
        self.recomputations
    }

    /// Eigensolver failures; the previous split was kept each time.
    pub fn failures(&self) -> usize {
        self.failures
    }

    pub fn last_report(&self) -> Option<RefreshReport> {
        self.last
    }

    /// Call once before each step from state `u`.
    pub fn before_step<S: SecondOrderSystem + ?Sized>(&mut self, sys: &S, u: &DVector<f64>) -> Option<RefreshReport> {
        self.steps += 1;
        if !self.split.policy.due(self.steps) || self.split.s() == 0 {
            return None;
        }
        match refresh_split(sys, u, &self.split) {
            Ok((fresh, report)) => {
                self.split = fresh;
                self.recomputations += 1;
                self.last = Some(report);
                Some(report)
            }
            Err(e) => {
                log::warn!("modal refresh failed, keeping previous split: {e}");
                self.failures += 1;
                None
            }
        }
    }
}

#[cfg(test)]
mod tests;
