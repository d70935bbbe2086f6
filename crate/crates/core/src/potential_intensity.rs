//! Thermodynamic potential intensity from near-surface values and a sounding.
//!
//! Wind bound: `vmax^2 = (Ck/CD) * (Ts - To)/To * (k0* - k)` with moist
//! enthalpy `k = cp*T + Lv*q`. `Ts` is the 2 m temperature, `To` the outflow
//! temperature, `k0*` the saturation enthalpy at the surface.

use thiserror::Error;

use crate::atmosphere::{FieldCube, Level, Variable};

#[derive(Debug, Error, PartialEq)]
pub enum PiError {
    #[error("{what} = {value} outside physical bounds")]
    OutOfBounds { what: &'static str, value: f64 },
    #[error("pressure {pressure} hPa does not exceed vapour pressure {vapour} hPa")]
    Unphysical { pressure: f64, vapour: f64 },
    #[error("profile is empty")]
    EmptyProfile,
    #[error("profile levels must be strictly decreasing in pressure with matching value count")]
    BadProfile,
    #[error("cube lacks channel {0}")]
    MissingChannel(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PIConstants {
    /// Ratio of enthalpy to momentum exchange coefficients.
    pub ck_cd: f64,
    /// J/(kg K)
    pub cp: f64,
    /// J/kg
    pub lv: f64,
    /// Levels at or above this pressure (hPa) are outflow candidates.
    pub outflow_ceiling_hpa: f64,
    /// kg/m^3, used in the pressure-deficit estimate.
    pub air_density: f64,
    pub pmin_floor_hpa: f64,
}

impl Default for PIConstants {
    fn default() -> Self {
        PIConstants {
            ck_cd: 0.9,
            cp: 1005.0,
            lv: 2.5e6,
            outflow_ceiling_hpa: 250.0,
            air_density: 1.15,
            pmin_floor_hpa: 850.0,
        }
    }
}

impl PIConstants {
    pub fn validate(&self) -> Result<(), PiError> {
        let positive = [
            ("cp", self.cp),
            ("lv", self.lv),
            ("outflow_ceiling_hpa", self.outflow_ceiling_hpa),
            ("air_density", self.air_density),
        ];
        for (what, value) in positive {
            if !(value > 0.0) {
                return Err(PiError::OutOfBounds { what, value });
            }
        }
        if !(self.ck_cd > 0.0 && self.ck_cd < 2.0) {
            return Err(PiError::OutOfBounds { what: "ck_cd", value: self.ck_cd });
        }
        Ok(())
    }
}

/// Values on pressure levels (hPa), ordered surface-first.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub levels: Vec<f64>,
    pub values: Vec<f64>,
}

impl Profile {
    pub fn new(levels: Vec<f64>, values: Vec<f64>) -> Result<Self, PiError> {
        if levels.is_empty() {
            return Err(PiError::EmptyProfile);
        }
        if levels.len() != values.len() || levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(PiError::BadProfile);
        }
        Ok(Profile { levels, values })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PIInput {
    /// 2 m temperature, K; stands in for sea-surface temperature.
    pub t2m: f64,
    /// Sea-level pressure, hPa.
    pub msl: f64,
    /// Temperature sounding, K.
    pub temperature: Profile,
    /// Specific humidity sounding, kg/kg.
    pub humidity: Profile,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PIResult {
    /// m/s
    pub vmax: f64,
    /// hPa
    pub pmin: f64,
}

fn check_temperature(what: &'static str, t: f64) -> Result<(), PiError> {
    if t > 150.0 && t < 350.0 {
        Ok(())
    } else {
        Err(PiError::OutOfBounds { what, value: t })
    }
}

fn check_humidity(q: f64) -> Result<(), PiError> {
    if (0.0..0.04).contains(&q) {
        Ok(())
    } else {
        Err(PiError::OutOfBounds { what: "specific humidity", value: q })
    }
}

impl PIInput {
    pub fn validate(&self) -> Result<(), PiError> {
        check_temperature("t2m", self.t2m)?;
        if !(self.msl > 100.0 && self.msl.is_finite()) {
            return Err(PiError::OutOfBounds { what: "msl", value: self.msl });
        }
        for &t in &self.temperature.values {
            check_temperature("profile temperature", t)?;
        }
        for &q in &self.humidity.values {
            check_humidity(q)?;
        }
        Ok(())
    }
}

/// Moist enthalpy per unit mass, J/kg.
pub fn enthalpy(t: f64, q: f64, c: &PIConstants) -> f64 {
    c.cp * t + c.lv * q
}

/// Bolton saturation vapour pressure (hPa) at temperature `t` (K).
pub fn saturation_vapour_pressure(t: f64) -> f64 {
    6.112 * (17.67 * (t - 273.15) / (t - 29.65)).exp()
}

/// Saturation specific humidity (kg/kg) at `t` (K) and `p` (hPa).
pub fn saturation_specific_humidity(t: f64, p: f64) -> Result<f64, PiError> {
    check_temperature("temperature", t)?;
    if !(p > 100.0) {
        return Err(PiError::OutOfBounds { what: "pressure", value: p });
    }
    let es = saturation_vapour_pressure(t);
    if p <= es {
        return Err(PiError::Unphysical { pressure: p, vapour: es });
    }
    Ok(0.622 * es / (p - 0.378 * es))
}

/// Coldest temperature at or above the outflow ceiling, falling back to the
/// coldest level overall.
pub fn outflow_temperature(t_profile: &[f64], levels: &[f64], c: &PIConstants) -> Result<f64, PiError> {
    if t_profile.is_empty() || levels.is_empty() {
        return Err(PiError::EmptyProfile);
    }
    if t_profile.len() != levels.len() {
        return Err(PiError::BadProfile);
    }
    let qualifying = t_profile
        .iter()
        .zip(levels)
        .filter(|(_, &p)| p <= c.outflow_ceiling_hpa)
        .map(|(&t, _)| t)
        .fold(f64::INFINITY, f64::min);
    if qualifying.is_finite() {
        Ok(qualifying)
    } else {
        Ok(t_profile.iter().cloned().fold(f64::INFINITY, f64::min))
    }
}

/// `sqrt(max(0, ck_cd * (ts - to)/to * dk))`.
pub fn vmax_from_components(ck_cd: f64, ts: f64, to: f64, dk: f64) -> f64 {
    let v2 = ck_cd * (ts - to) / to * dk;
    v2.max(0.0).sqrt()
}

/// Pressure deficit estimate `msl - rho * vmax^2 / 200`, floored.
pub fn pmin_from_vmax(msl: f64, vmax: f64, c: &PIConstants) -> f64 {
    if vmax == 0.0 {
        return msl;
    }
    (msl - c.air_density * vmax * vmax / 200.0).max(c.pmin_floor_hpa.min(msl))
}

pub fn potential_intensity(input: &PIInput, c: &PIConstants) -> Result<PIResult, PiError> {
    input.validate()?;
    let ts = input.t2m;
    let to = outflow_temperature(&input.temperature.values, &input.temperature.levels, c)?;
    // profiles are surface-first, so index 0 is the lowest level
    let q_low = input.humidity.values[0];
    let k = enthalpy(ts, q_low, c);
    let k_sat = enthalpy(ts, saturation_specific_humidity(ts, input.msl)?, c);
    let vmax = vmax_from_components(c.ck_cd, ts, to, k_sat - k);
    Ok(PIResult { vmax, pmin: pmin_from_vmax(input.msl, vmax, c) })
}

/// Channel indices a cube needs for per-pixel potential intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct PiChannels {
    t2m: usize,
    msl: usize,
    /// (channel index, level) sorted surface-first.
    t: Vec<(usize, f64)>,
    q: Vec<(usize, f64)>,
}

impl PiChannels {
    pub fn locate(cube: &FieldCube) -> Result<Self, PiError> {
        let find = |var: Variable, name: &'static str| {
            cube.channels
                .iter()
                .position(|c| c.variable == var)
                .ok_or(PiError::MissingChannel(name))
        };
        let profile = |var: Variable, name: &'static str| {
            let mut v: Vec<(usize, f64)> = cube
                .channels
                .iter()
                .enumerate()
                .filter_map(|(i, c)| match (c.variable == var, c.level) {
                    (true, Level::Pressure(p)) => Some((i, p as f64)),
                    _ => None,
                })
                .collect();
            if v.is_empty() {
                return Err(PiError::MissingChannel(name));
            }
            v.sort_by(|a, b| b.1.total_cmp(&a.1));
            Ok(v)
        };
        Ok(PiChannels {
            t2m: find(Variable::T2m, "t2m")?,
            msl: find(Variable::Msl, "msl")?,
            t: profile(Variable::T, "t")?,
            q: profile(Variable::Q, "q")?,
        })
    }

    /// Input for pixel `(y, x)`.
    pub fn input_at(&self, cube: &FieldCube, y: usize, x: usize) -> Result<PIInput, PiError> {
        let at = |c: usize| cube.value(c, y, x);
        Ok(PIInput {
            t2m: at(self.t2m),
            msl: at(self.msl),
            temperature: Profile::new(
                self.t.iter().map(|&(_, p)| p).collect(),
                self.t.iter().map(|&(i, _)| at(i)).collect(),
            )?,
            humidity: Profile::new(
                self.q.iter().map(|&(_, p)| p).collect(),
                self.q.iter().map(|&(i, _)| at(i)).collect(),
            )?,
        })
    }
}

/// Potential intensity for every pixel, row-major.
pub fn potential_intensity_grid(cube: &FieldCube, c: &PIConstants) -> Result<Vec<PIResult>, PiError> {
    let ch = PiChannels::locate(cube)?;
    let (h, w) = (cube.height(), cube.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(potential_intensity(&ch.input_at(cube, y, x)?, c)?);
        }
    }
    Ok(out)
}

/// Potential intensity from the storm-centre column of a cube.
pub fn potential_intensity_at_center(cube: &FieldCube, c: &PIConstants) -> Result<PIResult, PiError> {
    let ch = PiChannels::locate(cube)?;
    let (y, x) = cube.center_pixel();
    potential_intensity(&ch.input_at(cube, y, x)?, c)
}
