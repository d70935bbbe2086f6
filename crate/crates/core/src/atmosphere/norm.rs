use super::{ChannelSpec, FieldCube, Storm};
use crate::numerics::Array;

/// Which quantity a statistic belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatKey {
    Channel(ChannelSpec),
    Msw,
    Mslp,
}

/// Identifies the storm set the statistics were fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsSource {
    pub fingerprint: u32,
    pub storms: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub channels: Vec<ChannelSpec>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub msw: (f64, f64),
    pub mslp: (f64, f64),
    pub source: StatsSource,
}

/// Population mean and standard deviation. A degenerate spread falls back to
/// 1 so that every std stays positive.
fn moments(sum: f64, sum_sq: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl NormStats {
    /// Fit on `storms`, which must be the training split only.
    pub fn fit(storms: &[Storm], source: StatsSource) -> Result<Self, String> {
        let first = storms
            .iter()
            .find(|s| !s.is_empty())
            .ok_or("cannot fit statistics on an empty storm set")?;
        let channels: Vec<ChannelSpec> = first.channels.to_vec();
        let c = channels.len();
        // Per-channel sums accumulate in centred form around the first
        // cube's means to keep cancellation small.
        let shift: Vec<f64> = (0..c)
            .map(|ch| {
                let v = first.cubes[0].channel(ch);
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        let mut s1 = vec![0.0; c];
        let mut s2 = vec![0.0; c];
        let mut count = 0.0;
        let (mut w1, mut w2, mut p1, mut p2, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for storm in storms {
            if *storm.channels != *channels {
                return Err(format!("storm {} has a different channel layout", storm.id));
            }
            for cube in &storm.cubes {
                for ch in 0..c {
                    for &v in cube.channel(ch) {
                        let d = v - shift[ch];
                        s1[ch] += d;
                        s2[ch] += d * d;
                    }
                }
                count += (cube.height() * cube.width()) as f64;
            }
            for r in &storm.records {
                w1 += r.msw;
                w2 += r.msw * r.msw;
                p1 += r.mslp;
                p2 += r.mslp * r.mslp;
                n += 1.0;
            }
        }
        let mut channel_mean = Vec::with_capacity(c);
        let mut channel_std = Vec::with_capacity(c);
        for ch in 0..c {
            let (m, s) = moments(s1[ch], s2[ch], count);
            channel_mean.push(m + shift[ch]);
            channel_std.push(s);
        }
        Ok(NormStats {
            channels,
            channel_mean,
            channel_std,
            msw: moments(w1, w2, n),
            mslp: moments(p1, p2, n),
            source,
        })
    }

    pub fn mean_std(&self, key: StatKey) -> Result<(f64, f64), String> {
        match key {
            StatKey::Msw => Ok(self.msw),
            StatKey::Mslp => Ok(self.mslp),
            StatKey::Channel(spec) => self
                .channels
                .iter()
                .position(|c| *c == spec)
                .map(|i| (self.channel_mean[i], self.channel_std[i]))
                .ok_or_else(|| format!("unknown channel {spec}")),
        }
    }

    pub fn normalize(&self, key: StatKey, x: f64) -> Result<f64, String> {
        let (m, s) = self.mean_std(key)?;
        Ok((x - m) / s)
    }

    pub fn denormalize(&self, key: StatKey, z: f64) -> Result<f64, String> {
        let (m, s) = self.mean_std(key)?;
        Ok(z * s + m)
    }

    /// Normalized intensity pair `[msw, mslp]`.
    pub fn normalize_intensity(&self, msw: f64, mslp: f64) -> [f64; 2] {
        [(msw - self.msw.0) / self.msw.1, (mslp - self.mslp.0) / self.mslp.1]
    }

    /// Knots and hPa from a normalized pair.
    pub fn denormalize_intensity(&self, z: [f64; 2]) -> (f64, f64) {
        (z[0] * self.msw.1 + self.msw.0, z[1] * self.mslp.1 + self.mslp.0)
    }

    /// Normalized channels-last `[H, W, C]` copy of a cube.
    pub fn normalize_cube(&self, cube: &FieldCube) -> Result<Array, String> {
        if *cube.channels != *self.channels {
            return Err("cube channels do not match the statistics".into());
        }
        let (c, h, w) = (cube.channel_count(), cube.height(), cube.width());
        let src = cube.grid.data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let (m, s) = (self.channel_mean[ch], self.channel_std[ch]);
            for p in 0..h * w {
                out[p * c + ch] = (src[ch * h * w + p] - m) / s;
            }
        }
        Array::new(vec![h, w, c], out).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{synth_dataset, SynthParams, Variable};
    use super::*;

    fn stats() -> NormStats {
        let p = SynthParams { min_life: 10, max_life: 12, ..SynthParams::default() };
        let storms = synth_dataset(3, &p, 7).unwrap();
        NormStats::fit(&storms, StatsSource { fingerprint: 0, storms: 3 }).unwrap()
    }

    #[test]
    fn centring_and_scale() {
        let st = stats();
        let key = StatKey::Channel(ChannelSpec::surface(Variable::Msl));
        let (m, s) = st.mean_std(key).unwrap();
        assert_eq!(st.normalize(key, m).unwrap(), 0.0);
        assert!((st.normalize(key, m + s).unwrap() - 1.0).abs() < 1e-12);
        let x = 1003.25;
        assert!((st.denormalize(key, st.normalize(key, x).unwrap()).unwrap() - x).abs() < 1e-12);
        assert!(st.channel_std.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn unknown_channel_is_an_error() {
        let st = stats();
        assert!(st.normalize(StatKey::Channel(ChannelSpec::pressure(Variable::Z, 500)), 1.0).is_err());
    }

    #[test]
    fn moments_match_two_pass() {
        let p = SynthParams { min_life: 10, max_life: 12, ..SynthParams::default() };
        let storms = synth_dataset(2, &p, 3).unwrap();
        let st = NormStats::fit(&storms, StatsSource { fingerprint: 0, storms: 2 }).unwrap();
        let vals: Vec<f64> = storms.iter().flat_map(|s| s.cubes.iter().flat_map(|c| c.channel(1).to_vec())).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((st.channel_mean[1] - mean).abs() < 1e-9);
        assert!((st.channel_std[1] - var.sqrt()).abs() < 1e-9);
    }
}
