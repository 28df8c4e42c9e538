//! Synthetic benchmarks and the on-disk snapshot format.

mod boids;
mod bundle;
mod sde;

pub use boids::{boids_acceleration, boids_step, gen_boids, BoidsData, BoidsInit, BoidsSpec};
pub use bundle::{load_dataset, read_manifest, save_dataset, Manifest, FORMAT_VERSION};
pub use sde::{analytic_gf_v0, gen_sde, Potential, SdeData, SdeSpec};

use popmech_autodiff::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::MechState;

/// Particle clouds observed at increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotDataset {
    pub dim: usize,
    pub times: Vec<f64>,
    pub snapshots: Vec<Array>,
    pub velocities: Option<Vec<Array>>,
    /// Rows refer to the same particles at every time.
    pub paired: bool,
}

impl SnapshotDataset {
    pub fn new(times: Vec<f64>, snapshots: Vec<Array>, velocities: Option<Vec<Array>>, paired: bool) -> Result<Self> {
        let dim = snapshots.first().map(|s| s.cols()).unwrap_or(0);
        let ds = Self {
            dim,
            times,
            snapshots,
            velocities,
            paired,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = "dataset";
        if self.times.len() != self.snapshots.len() {
            return Err(Error::data(ctx, format!("{} times but {} snapshots", self.times.len(), self.snapshots.len())));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::data(ctx, "times must be strictly increasing"));
        }
        for (i, s) in self.snapshots.iter().enumerate() {
            if s.ndim() != 2 || s.cols() != self.dim {
                return Err(Error::data(ctx, format!("snapshot {i} has shape {:?}, expected N×{}", s.shape(), self.dim)));
            }
            if !s.is_finite() {
                return Err(Error::data(ctx, format!("snapshot {i} has non-finite values")));
            }
        }
        if self.paired {
            if let Some(first) = self.snapshots.first() {
                if self.snapshots.iter().any(|s| s.rows() != first.rows()) {
                    return Err(Error::data(ctx, "paired snapshots must all have the same size"));
                }
            }
        }
        if let Some(vs) = &self.velocities {
            if vs.len() != self.snapshots.len() {
                return Err(Error::data(ctx, "velocity count does not match snapshot count"));
            }
            for (i, (v, s)) in vs.iter().zip(&self.snapshots).enumerate() {
                if v.shape() != s.shape() {
                    return Err(Error::data(ctx, format!("velocities {i} have shape {:?}, snapshot {:?}", v.shape(), s.shape())));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of intervals `M` between the observed times.
    pub fn intervals(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    /// The snapshots with indices in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            dim: self.dim,
            times: self.times[range.clone()].to_vec(),
            snapshots: self.snapshots[range.clone()].to_vec(),
            velocities: self.velocities.as_ref().map(|v| v[range].to_vec()),
            paired: self.paired,
        }
    }

    /// Appends `later`, whose times must all follow this dataset's.
    pub fn concat(&self, later: &SnapshotDataset) -> Result<Self> {
        let velocities = match (&self.velocities, &later.velocities) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).cloned().collect()),
            _ => None,
        };
        let out = Self {
            dim: self.dim,
            times: self.times.iter().chain(&later.times).copied().collect(),
            snapshots: self.snapshots.iter().chain(&later.snapshots).cloned().collect(),
            velocities,
            paired: self.paired && later.paired,
        };
        out.validate()?;
        Ok(out)
    }

    /// A trajectory as a paired dataset with velocities.
    pub fn from_trajectory(traj: &[MechState<Array>]) -> Result<Self> {
        Self::new(
            traj.iter().map(|s| s.t).collect(),
            traj.iter().map(|s| s.x.clone()).collect(),
            Some(traj.iter().map(|s| s.v.clone()).collect()),
            true,
        )
    }
}

/// How the initial velocity field is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum V0Mode {
    /// Stored velocities at the first time.
    #[default]
    Provided,
    Zero,
    /// `(X_{t₁} − X_{t₀}) / (t₁ − t₀)` on paired data.
    PairedFiniteDifference,
}

pub fn estimate_v0(ds: &SnapshotDataset, mode: V0Mode) -> Result<Array> {
    let x0 = ds
        .snapshots
        .first()
        .ok_or_else(|| Error::data("estimate_v0", "empty dataset"))?;
    match mode {
        V0Mode::Zero => Ok(Array::zeros(x0.shape().to_vec())),
        V0Mode::Provided => ds
            .velocities
            .as_ref()
            .map(|v| v[0].clone())
            .ok_or_else(|| Error::data("estimate_v0", "mode `provided` needs stored velocities")),
        V0Mode::PairedFiniteDifference => {
            if !ds.paired || ds.len() < 2 {
                return Err(Error::data("estimate_v0", "finite differences need paired data with at least two times"));
            }
            let h = ds.times[1] - ds.times[0];
            Ok(ds.snapshots[1].zip_map(x0, |b, a| (b - a) / h)?)
        }
    }
}

/// A per-purpose seed derived from a base seed and an index, so parallel
/// work gives the same numbers whatever the schedule.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
