//! Synthetic storms. Each storm lives in a slowly changing thermodynamic
//! environment; its intensity relaxes toward a fixed fraction of the
//! environment's potential intensity with a random wobble. Cubes carry a
//! vortex whose depth and radius follow the intensity, laid over one of `D`
//! large-scale background patterns.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    knots_to_ms, standard_channels, validate_channels, ChannelSpec, FieldCube, IntensityRecord, Level, Storm,
    Variable,
};
use crate::numerics::Array;
use crate::potential_intensity::{potential_intensity, PIConstants, PIInput, Profile};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub grid: usize,
    pub channels: Vec<ChannelSpec>,
    /// Number of distinct background patterns.
    pub patterns: usize,
    pub min_life: usize,
    pub max_life: usize,
    pub constants: PIConstants,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            grid: 24,
            channels: standard_channels(6),
            patterns: 4,
            min_life: 20,
            max_life: 40,
            constants: PIConstants::default(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.grid < 8 {
            return Err(format!("grid {} is below the minimum of 8", self.grid));
        }
        if self.channels.len() < 4 {
            return Err(format!("{} channels is below the minimum of 4", self.channels.len()));
        }
        validate_channels(&self.channels)?;
        if self.patterns < 2 {
            return Err("at least two background patterns are required".into());
        }
        if self.min_life == 0 || self.min_life > self.max_life {
            return Err(format!("bad lifetime range {}..={}", self.min_life, self.max_life));
        }
        Ok(())
    }
}

const ENV_MSL: f64 = 1010.0;
const G: f64 = 9.80665;

/// Wind-pressure relation used to derive central pressure from wind (knots).
fn pressure_from_wind(msw: f64) -> f64 {
    ENV_MSL - (msw / 6.7).powf(1.0 / 0.644)
}

/// Radius of maximum wind in pixels; shrinks as the storm deepens.
fn vortex_radius(msw: f64, grid: usize) -> f64 {
    let scale = grid as f64 / 24.0;
    scale * (1.5 + 4.0 * (-msw / 60.0).exp())
}

/// Thermodynamic state of the environment at one step.
#[derive(Clone, Copy, Debug)]
struct Environment {
    t_sfc: f64,
    t_out: f64,
    rh: f64,
}

impl Environment {
    fn temperature(&self, p: f64) -> f64 {
        if p >= 200.0 {
            let frac = (p / 200.0).ln() / 5f64.ln();
            self.t_out + (self.t_sfc - self.t_out) * frac
        } else {
            self.t_out + 8.0 * (200.0 / p).ln() / 4f64.ln()
        }
    }

    fn humidity(&self, p: f64) -> f64 {
        let t = self.temperature(p);
        let es = 6.112 * (17.67 * (t - 273.15) / (t - 29.65)).exp();
        self.rh * 0.622 * es / (p - 0.378 * es)
    }

    fn pi_knots(&self, c: &PIConstants) -> f64 {
        let input = PIInput {
            t2m: self.t_sfc,
            msl: ENV_MSL,
            temperature: Profile::new(vec![1000.0, 200.0], vec![self.t_sfc, self.t_out]).unwrap(),
            humidity: Profile::new(vec![1000.0], vec![self.humidity(1000.0)]).unwrap(),
        };
        potential_intensity(&input, c).map_or(0.0, |r| r.vmax / knots_to_ms(1.0))
    }
}

/// Standard-atmosphere geopotential (m^2/s^2) at pressure `p`.
fn standard_geopotential(p: f64) -> f64 {
    G * 44331.0 * (1.0 - (p / 1013.25).powf(0.1903))
}

struct BackgroundPattern {
    orientation: f64,
    wavenumber: f64,
    phase: f64,
}

impl BackgroundPattern {
    fn value(&self, y: f64, x: f64, step: usize, channel: usize) -> f64 {
        let along = x * self.orientation.cos() + y * self.orientation.sin();
        (self.wavenumber * along + self.phase + 0.1 * step as f64 + 0.7 * channel as f64).cos()
    }
}

/// Background amplitude per channel in physical units.
fn pattern_amplitude(spec: &ChannelSpec) -> f64 {
    match spec.variable {
        Variable::T2m | Variable::T => 0.6,
        Variable::Msl => 1.5,
        Variable::U10 | Variable::V10 | Variable::U | Variable::V => 3.0,
        Variable::Z => 150.0,
        // relative, applied multiplicatively
        Variable::Q => 0.05,
    }
}

fn build_cube(
    params: &SynthParams,
    channels: &Arc<[ChannelSpec]>,
    env: &Environment,
    pattern: &BackgroundPattern,
    msw: f64,
    mslp: f64,
    step: usize,
) -> FieldCube {
    let h = params.grid;
    let (cy, cx) = ((h / 2) as f64, (h / 2) as f64);
    let radius = vortex_radius(msw, h);
    let vm = knots_to_ms(msw);
    let mut data = vec![0.0; channels.len() * h * h];
    for (ci, spec) in channels.iter().enumerate() {
        let amp = pattern_amplitude(spec);
        let p = match spec.level {
            Level::Surface => 1000.0,
            Level::Pressure(p) => p as f64,
        };
        // vortex strength decays with height
        let depth = (p / 1000.0).powi(2);
        for y in 0..h {
            for x in 0..h {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let r = (dy * dy + dx * dx).sqrt();
                let bg = pattern.value(y as f64, x as f64, step, ci);
                let tangential = if r < radius { vm * r / radius } else { vm * (radius / r).powf(0.6) };
                let (su, sv) = if r > 0.0 { (-dy / r, dx / r) } else { (0.0, 0.0) };
                let core = if r > 0.0 { (-radius / r).exp() } else { 0.0 };
                let value = match spec.variable {
                    Variable::Msl => {
                        let outer = ENV_MSL + amp * bg;
                        mslp + (outer - mslp) * core
                    }
                    Variable::T2m => env.t_sfc + amp * bg,
                    Variable::U10 => tangential * su + amp * bg,
                    Variable::V10 => tangential * sv + amp * bg,
                    Variable::U => depth * tangential * su + amp * bg,
                    Variable::V => depth * tangential * sv + amp * bg,
                    Variable::T => {
                        // weak warm core aloft
                        let warm = 0.04 * (ENV_MSL - mslp) * (1.0 - depth) * (1.0 - core);
                        env.temperature(p) + warm + amp * bg
                    }
                    Variable::Q => env.humidity(p) * (1.0 + amp * bg),
                    Variable::Z => {
                        let anomaly = -8.0 * (ENV_MSL - mslp) * depth * (1.0 - core);
                        standard_geopotential(p) + anomaly + amp * bg
                    }
                };
                data[(ci * h + y) * h + x] = value;
            }
        }
    }
    let grid = Array::new(vec![channels.len(), h, h], data).expect("consistent cube shape");
    FieldCube::new(Arc::clone(channels), grid).expect("generated cube is finite")
}

/// One storm lifetime from `seed`.
pub fn synth_storm(seed: u64, params: &SynthParams) -> Result<Storm, String> {
    synth_storm_with_id(seed, params, Arc::from(format!("S{seed:08}")))
}

fn synth_storm_with_id(seed: u64, params: &SynthParams, id: Arc<str>) -> Result<Storm, String> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let life = rng.gen_range(params.min_life..=params.max_life);
    let channels: Arc<[ChannelSpec]> = params.channels.clone().into();

    let k = rng.gen_range(0..params.patterns);
    let pattern = BackgroundPattern {
        orientation: PI * k as f64 / params.patterns as f64,
        wavenumber: 2.0 * PI / (0.8 * params.grid as f64),
        phase: rng.gen_range(0.0..2.0 * PI),
    };

    let t_base = rng.gen_range(298.5..301.5);
    let t_amp = rng.gen_range(0.0..1.5);
    let t_cool = rng.gen_range(1.0..7.0);
    let t_out0 = rng.gen_range(195.0..205.0);
    let rh0 = rng.gen_range(0.70..0.80);
    let efficiency = rng.gen_range(0.55..0.85);
    let relax = 0.25;
    let wobble = Normal::new(0.0, 2.0).unwrap();
    let p_noise = Normal::new(0.0, 2.0).unwrap();

    let mut msw: f64 = rng.gen_range(25.0..35.0);
    let mut records = Vec::with_capacity(life);
    let mut cubes = Vec::with_capacity(life);
    for step in 0..life {
        let u = if life > 1 { step as f64 / (life - 1) as f64 } else { 0.0 };
        let env = Environment {
            t_sfc: t_base + t_amp * (PI * u).sin() - t_cool * u * u,
            t_out: t_out0 + 3.0 * u,
            rh: rh0 + 0.1 * u,
        };
        if step > 0 {
            let target = efficiency * env.pi_knots(&params.constants);
            msw += relax * (target - msw) + wobble.sample(&mut rng);
        }
        msw = msw.clamp(15.0, 165.0);
        let mslp = (pressure_from_wind(msw) + p_noise.sample(&mut rng)).clamp(855.0, 1015.0);
        records.push(IntensityRecord {
            msw,
            mslp,
            valid_time: step as i64,
            storm_id: Arc::clone(&id),
        });
        cubes.push(build_cube(params, &channels, &env, &pattern, msw, mslp, step));
    }
    Ok(Storm { id, channels, records, cubes })
}

/// `count` storms seeded from `seed`.
pub fn synth_dataset(count: usize, params: &SynthParams, seed: u64) -> Result<Vec<Storm>, String> {
    params.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let s: u64 = master.gen();
            synth_storm_with_id(s, params, Arc::from(format!("S{seed:04}-{i:05}")))
        })
        .collect()
}
