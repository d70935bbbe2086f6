use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::degrade::degrade_at_lead;
use super::{DegradeParams, FieldCube, IntensityRecord, Storm};

/// A history/future window addressed by position in a storm list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleWindow {
    pub storm: usize,
    /// Index of the oldest history step.
    pub start: usize,
    pub n: usize,
    pub m: usize,
}

impl SampleWindow {
    /// Index of the forecast initialization step (history step 0).
    pub fn init(&self) -> usize {
        self.start + self.n - 1
    }

    pub fn end(&self) -> usize {
        self.start + self.n + self.m
    }

    /// Seed for this window's forecast degradation.
    pub fn degrade_seed(&self, base: u64) -> u64 {
        let mut z = base ^ ((self.storm as u64) << 32) ^ self.start as u64;
        // splitmix64 finalizer
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Materialize records and cubes; future cubes are degraded forecasts.
    pub fn materialize(&self, storms: &[Storm], degrade: &DegradeParams, seed: u64) -> WindowData {
        let s = &storms[self.storm];
        let hist = self.start..self.start + self.n;
        let fut = self.start + self.n..self.end();
        let mut rng = ChaCha8Rng::seed_from_u64(self.degrade_seed(seed));
        let future_cubes = s.cubes[fut.clone()]
            .iter()
            .enumerate()
            .map(|(i, c)| degrade_at_lead(c, i + 1, &mut rng, degrade))
            .collect();
        WindowData {
            history: s.records[hist.clone()].to_vec(),
            history_cubes: s.cubes[hist].to_vec(),
            future_cubes,
            future: s.records[fut].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowData {
    pub history: Vec<IntensityRecord>,
    pub history_cubes: Vec<FieldCube>,
    pub future_cubes: Vec<FieldCube>,
    pub future: Vec<IntensityRecord>,
}

/// Maximal runs `[a, b)` of consecutive 6-hour steps.
fn contiguous_runs(records: &[IntensityRecord]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut a = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].valid_time != records[i - 1].valid_time + 1 {
            if i > a {
                runs.push((a, i));
            }
            a = i;
        }
    }
    runs
}

/// All stride-1 windows of `n` history and `m` future steps.
pub fn make_windows(storms: &[Storm], n: usize, m: usize) -> Result<Vec<SampleWindow>, String> {
    if n == 0 || m == 0 {
        return Err(format!("window lengths must be positive, got n={n} m={m}"));
    }
    let mut out = Vec::new();
    for (si, s) in storms.iter().enumerate() {
        for (a, b) in contiguous_runs(&s.records) {
            if b - a >= n + m {
                out.extend((a..=b - n - m).map(|start| SampleWindow { storm: si, start, n, m }));
            }
        }
    }
    Ok(out)
}

/// Storm indices for each split plus a fingerprint of the training ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub fingerprint: u32,
}

/// Contiguous 70/15/15 split by storm order. Storms never straddle splits.
pub fn split_storms(storms: &[Storm]) -> DatasetSplit {
    let total = storms.len();
    let mut n_train = (total as f64 * 0.70).round() as usize;
    let mut n_val = (total as f64 * 0.15).round() as usize;
    if total >= 3 {
        n_train = n_train.clamp(1, total - 2);
        n_val = n_val.clamp(1, total - n_train - 1);
    } else {
        n_train = total;
        n_val = 0;
    }
    let train: Vec<usize> = (0..n_train).collect();
    let validation = (n_train..n_train + n_val).collect();
    let test = (n_train + n_val..total).collect();
    DatasetSplit { fingerprint: fingerprint(storms, &train), train, validation, test }
}

/// CRC32 over the selected storm ids.
pub fn fingerprint(storms: &[Storm], indices: &[usize]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for &i in indices {
        h.update(storms[i].id.as_bytes());
        h.update(&[0]);
    }
    h.finalize()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::atmosphere::{synth_dataset, SynthParams};

    fn bare_storm(times: &[i64]) -> Storm {
        let params = SynthParams { min_life: times.len(), max_life: times.len(), grid: 8, ..SynthParams::default() };
        let mut s = crate::atmosphere::synth_storm(0, &params).unwrap();
        for (r, &t) in s.records.iter_mut().zip(times) {
            r.valid_time = t;
        }
        s.id = Arc::from("gap");
        s
    }

    #[test]
    fn exact_length_gives_one_window() {
        let s = bare_storm(&(0..12).collect::<Vec<_>>());
        assert_eq!(make_windows(&[s], 4, 8).unwrap().len(), 1);
    }

    #[test]
    fn gaps_split_runs() {
        let times: Vec<i64> = (0..6).chain(10..17).collect();
        let s = bare_storm(&times);
        // runs of 6 and 7, need 5 each
        assert_eq!(make_windows(&[s], 2, 3).unwrap().len(), 2 + 3);
    }

    #[test]
    fn rejects_zero_lengths() {
        assert!(make_windows(&[], 0, 1).is_err());
        assert!(make_windows(&[], 1, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let p = SynthParams { min_life: 5, max_life: 5, grid: 8, ..SynthParams::default() };
        let storms = synth_dataset(20, &p, 0).unwrap();
        let sp = split_storms(&storms);
        assert_eq!((sp.train.len(), sp.validation.len(), sp.test.len()), (14, 3, 3));
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.validation).chain(&sp.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_ne!(sp.fingerprint, fingerprint(&storms, &sp.test));
    }

    #[test]
    fn materialized_window_is_aligned() {
        let p = SynthParams { min_life: 14, max_life: 14, grid: 8, ..SynthParams::default() };
        let storms = synth_dataset(2, &p, 0).unwrap();
        let w = make_windows(&storms, 4, 8).unwrap()[3];
        let d = w.materialize(&storms, &DegradeParams::default(), 9);
        assert_eq!(d.history.len(), 4);
        assert_eq!(d.future.len(), 8);
        assert_eq!(d.history[3].valid_time + 1, d.future[0].valid_time);
        assert_eq!(d, w.materialize(&storms, &DegradeParams::default(), 9));
    }
}
