//! Forecast-field degradation: forecast cubes drift off the true storm
//! position and pick up smooth error, both growing with lead time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FieldCube, Variable};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeParams {
    /// Largest pixel shift reached at the reference lead.
    pub shift_max: f64,
    /// Noise std as a fraction of channel std at the reference lead.
    pub noise_max: f64,
    pub reference_lead: usize,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams { shift_max: 3.0, noise_max: 0.3, reference_lead: 20 }
    }
}

const COARSE: usize = 5;

fn std_of(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

/// Bilinear interpolation of a `COARSE x COARSE` grid onto `h x w`.
fn smooth_field(coarse: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let span = (COARSE - 1) as f64;
    for y in 0..h {
        let fy = if h > 1 { y as f64 / (h - 1) as f64 * span } else { 0.0 };
        let y0 = (fy.floor() as usize).min(COARSE - 2);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = if w > 1 { x as f64 / (w - 1) as f64 * span } else { 0.0 };
            let x0 = (fx.floor() as usize).min(COARSE - 2);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| coarse[yy * COARSE + xx];
            out[y * w + x] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Degrade one cube as a forecast valid `lead` steps ahead.
pub fn degrade_at_lead(cube: &FieldCube, lead: usize, rng: &mut impl Rng, params: &DegradeParams) -> FieldCube {
    if lead == 0 {
        return cube.clone();
    }
    let growth = lead as f64 / params.reference_lead as f64;
    let magnitude = params.shift_max * growth * rng.gen_range(0.5..1.0);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let dy = (magnitude * angle.sin()).round() as isize;
    let dx = (magnitude * angle.cos()).round() as isize;

    let (c, h, w) = (cube.channel_count(), cube.height(), cube.width());
    let src = cube.grid.data();
    let mut out = cube.grid.clone();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let amp = params.noise_max * growth * std_of(plane);
        let coarse: Vec<f64> = (0..COARSE * COARSE).map(|_| rng.sample(StandardNormal)).collect();
        let noise = smooth_field(&coarse, h, w);
        let non_negative = cube.channels[ch].variable == Variable::Q;
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let sy = clamp(y as isize - dy, h);
                let sx = clamp(x as isize - dx, w);
                let mut v = plane[sy * w + sx] + amp * noise[y * w + x];
                if non_negative {
                    v = v.max(0.0);
                }
                dst[y * w + x] = v;
            }
        }
    }
    FieldCube { grid: out, ..cube.clone() }
}

/// Degrade cubes ordered by lead 1..=m.
pub fn degrade_forecast(cubes: &[FieldCube], seed: u64, params: &DegradeParams) -> Vec<FieldCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cubes
        .iter()
        .enumerate()
        .map(|(i, c)| degrade_at_lead(c, i + 1, &mut rng, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{synth_storm, SynthParams};
    use super::*;

    #[test]
    fn zero_lead_is_identity() {
        let s = synth_storm(1, &SynthParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(degrade_at_lead(&s.cubes[0], 0, &mut rng, &DegradeParams::default()), s.cubes[0]);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = synth_storm(1, &SynthParams::default()).unwrap();
        let p = DegradeParams::default();
        let a = degrade_forecast(&s.cubes[..8], 5, &p);
        assert_eq!(a, degrade_forecast(&s.cubes[..8], 5, &p));
        assert_ne!(a, degrade_forecast(&s.cubes[..8], 6, &p));
    }

    #[test]
    fn smooth_field_hits_coarse_corners() {
        let coarse: Vec<f64> = (0..25).map(f64::from).collect();
        let f = smooth_field(&coarse, 9, 9);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[8], 4.0);
        assert_eq!(f[80], 24.0);
        // midpoint between the first two coarse nodes
        assert!((f[1] - 0.5).abs() < 1e-12);
    }
}
