use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Array;

/// One quantized latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub vector: Vec<f64>,
    pub index: usize,
    /// Squared Euclidean distance from the query.
    pub distance: f64,
}

/// Nearest codebook row to `h`; ties go to the lowest index.
pub fn quantize(h: &[f64], codebook: &Array) -> Result<LatentCode> {
    let s = codebook.shape();
    if s.len() != 2 || s[1] != h.len() {
        return Err(Error::Model(format!("codebook {s:?} does not match latent width {}", h.len())));
    }
    let mut best = (usize::MAX, f64::INFINITY);
    for j in 0..s[0] {
        let d: f64 = codebook.row(j).iter().zip(h).map(|(e, x)| (x - e) * (x - e)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    if best.0 == usize::MAX {
        return Err(Error::Model("no finite codebook distance".into()));
    }
    Ok(LatentCode { vector: codebook.row(best.0).to_vec(), index: best.0, distance: best.1 })
}

/// `[J, d_z]` entries drawn from N(0, 1/d_z).
pub fn init_codebook(rng: &mut impl Rng, entries: usize, dim: usize) -> Array {
    let scale = 1.0 / (dim as f64).sqrt();
    let data = (0..entries * dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Array::new(vec![entries, dim], data).expect("positive codebook extents")
}

/// Moving-average accumulators and usage bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookState {
    pub cluster_size: Vec<f64>,
    /// `[J, d_z]`
    pub ema_sum: Array,
    pub usage: Vec<u64>,
    /// Update count at which each entry was last assigned.
    pub last_used: Vec<u64>,
    pub updates: u64,
}

pub const EMA_EPS: f64 = 1e-5;

impl CodebookState {
    pub fn new(entries: usize, dim: usize) -> Self {
        CodebookState {
            cluster_size: vec![0.0; entries],
            ema_sum: Array::zeros(&[entries, dim]),
            usage: vec![0; entries],
            last_used: vec![0; entries],
            updates: 0,
        }
    }

    /// Usage and recency bookkeeping for one batch of assignments.
    pub fn record(&mut self, indices: &[usize]) {
        self.updates += 1;
        for &j in indices {
            self.usage[j] += 1;
            self.last_used[j] = self.updates;
        }
    }

    /// Moving-average update of assigned entries from encoder outputs
    /// `h [B, d_z]`; unassigned entries are left untouched.
    pub fn ema_update(&mut self, codebook: &mut Array, h: &Array, indices: &[usize], decay: f64) {
        let dim = codebook.shape()[1];
        let entries = codebook.shape()[0];
        let mut counts = vec![0.0; entries];
        let mut sums = vec![0.0; entries * dim];
        for (row, &j) in indices.iter().enumerate() {
            counts[j] += 1.0;
            for (s, &v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(h.row(row)) {
                *s += v;
            }
        }
        self.record(indices);
        for j in 0..entries {
            if counts[j] == 0.0 {
                continue;
            }
            self.cluster_size[j] = decay * self.cluster_size[j] + counts[j];
            let n = self.cluster_size[j];
            let m = &mut self.ema_sum.data_mut()[j * dim..(j + 1) * dim];
            let e = &mut codebook.data_mut()[j * dim..(j + 1) * dim];
            for k in 0..dim {
                m[k] = decay * m[k] + sums[j * dim + k];
                e[k] = m[k] / (n + EMA_EPS);
            }
        }
    }

    /// Entries unassigned for `dead_after` updates are moved onto random rows
    /// of `h`. Returns the reseeded indices.
    pub fn reseed_dead(&mut self, codebook: &mut Array, h: &Array, dead_after: u64, rng: &mut impl Rng) -> Vec<usize> {
        let dim = codebook.shape()[1];
        let rows = h.shape()[0];
        let mut reseeded = Vec::new();
        if dead_after == 0 {
            return reseeded;
        }
        for j in 0..codebook.shape()[0] {
            if self.updates - self.last_used[j] >= dead_after {
                let r = rng.gen_range(0..rows);
                let src = h.row(r).to_vec();
                codebook.data_mut()[j * dim..(j + 1) * dim].copy_from_slice(&src);
                self.ema_sum.data_mut()[j * dim..(j + 1) * dim].copy_from_slice(&src);
                self.cluster_size[j] = 1.0;
                self.last_used[j] = self.updates;
                reseeded.push(j);
            }
        }
        if !reseeded.is_empty() {
            log::info!("reseeded {} dead codebook entries at update {}", reseeded.len(), self.updates);
        }
        reseeded
    }

    /// Fraction of entries assigned at least once.
    pub fn utilization(&self) -> f64 {
        self.usage.iter().filter(|&&u| u > 0).count() as f64 / self.usage.len() as f64
    }
}
