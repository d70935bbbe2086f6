//! Storm data model: intensity records, gridded condition cubes, statistics,
//! the synthetic generator, forecast-field degradation, windowing, and the
//! dataset container.

mod container;
mod degrade;
mod norm;
mod synth;
mod window;

use std::fmt;
use std::sync::Arc;

pub use container::{read_dataset, read_dataset_bytes, write_dataset, write_dataset_bytes, ContainerError};
pub use degrade::{degrade_at_lead, degrade_forecast, DegradeParams};
pub use norm::{NormStats, StatKey, StatsSource};
pub use synth::{synth_dataset, synth_storm, SynthParams};
pub use window::{fingerprint, make_windows, split_storms, DatasetSplit, SampleWindow, WindowData};

use crate::numerics::Array;

/// Knots to metres per second.
pub const KNOT_MS: f64 = 0.5144;

pub fn knots_to_ms(v: f64) -> f64 {
    v * KNOT_MS
}

/// Pressure levels (hPa) a channel may sit on.
pub const PRESSURE_LEVELS: [u32; 13] = [50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variable {
    Z,
    Q,
    U,
    V,
    T,
    U10,
    V10,
    T2m,
    Msl,
}

impl Variable {
    pub fn name(self) -> &'static str {
        match self {
            Variable::Z => "z",
            Variable::Q => "q",
            Variable::U => "u",
            Variable::V => "v",
            Variable::T => "t",
            Variable::U10 => "u10",
            Variable::V10 => "v10",
            Variable::T2m => "t2m",
            Variable::Msl => "msl",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "z" => Variable::Z,
            "q" => Variable::Q,
            "u" => Variable::U,
            "v" => Variable::V,
            "t" => Variable::T,
            "u10" => Variable::U10,
            "v10" => Variable::V10,
            "t2m" => Variable::T2m,
            "msl" => Variable::Msl,
            _ => return None,
        })
    }

    pub fn is_surface(self) -> bool {
        matches!(self, Variable::U10 | Variable::V10 | Variable::T2m | Variable::Msl)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Surface,
    Pressure(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChannelSpec {
    pub variable: Variable,
    pub level: Level,
}

impl ChannelSpec {
    pub fn surface(variable: Variable) -> Self {
        ChannelSpec { variable, level: Level::Surface }
    }

    pub fn pressure(variable: Variable, hpa: u32) -> Self {
        ChannelSpec { variable, level: Level::Pressure(hpa) }
    }

    pub fn validate(&self) -> Result<(), String> {
        match (self.variable.is_surface(), self.level) {
            (true, Level::Surface) => Ok(()),
            (false, Level::Pressure(p)) if PRESSURE_LEVELS.contains(&p) => Ok(()),
            _ => Err(format!("invalid channel {self}")),
        }
    }

    /// Level as stored in the container: 0 marks the surface.
    pub fn level_code(&self) -> f32 {
        match self.level {
            Level::Surface => 0.0,
            Level::Pressure(p) => p as f32,
        }
    }
}

impl fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level {
            Level::Surface => write!(f, "{}", self.variable.name()),
            Level::Pressure(p) => write!(f, "{}{}", self.variable.name(), p),
        }
    }
}

/// The six-channel desk set: surface fields plus outflow temperature and
/// boundary-layer humidity.
pub fn desk_channels() -> Vec<ChannelSpec> {
    vec![
        ChannelSpec::surface(Variable::T2m),
        ChannelSpec::surface(Variable::Msl),
        ChannelSpec::surface(Variable::U10),
        ChannelSpec::surface(Variable::V10),
        ChannelSpec::pressure(Variable::T, 200),
        ChannelSpec::pressure(Variable::Q, 1000),
    ]
}

/// Five upper-air variables on 13 levels plus four surface fields (69).
pub fn full_channels() -> Vec<ChannelSpec> {
    let mut out = Vec::with_capacity(69);
    for var in [Variable::Z, Variable::Q, Variable::U, Variable::V, Variable::T] {
        for p in PRESSURE_LEVELS {
            out.push(ChannelSpec::pressure(var, p));
        }
    }
    for var in [Variable::U10, Variable::V10, Variable::T2m, Variable::Msl] {
        out.push(ChannelSpec::surface(var));
    }
    out
}

/// First `count` channels of the desk set followed by the rest of the full
/// set.
pub fn standard_channels(count: usize) -> Vec<ChannelSpec> {
    let mut out = desk_channels();
    for c in full_channels() {
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.truncate(count);
    out
}

pub fn validate_channels(channels: &[ChannelSpec]) -> Result<(), String> {
    for (i, c) in channels.iter().enumerate() {
        c.validate()?;
        if channels[..i].contains(c) {
            return Err(format!("duplicate channel {c}"));
        }
    }
    Ok(())
}

/// One storm timestep's intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityRecord {
    /// Maximum sustained wind, knots.
    pub msw: f64,
    /// Minimum sea-level pressure, hPa.
    pub mslp: f64,
    /// 6-hour step index.
    pub valid_time: i64,
    pub storm_id: Arc<str>,
}

impl IntensityRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.msw > 0.0 && self.msw.is_finite()) {
            return Err(format!("msw {} must be positive", self.msw));
        }
        if !(self.mslp > 850.0 && self.mslp < 1100.0) {
            return Err(format!("mslp {} outside (850, 1100)", self.mslp));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

/// A `C x H x W` storm-centred atmospheric snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldCube {
    pub channels: Arc<[ChannelSpec]>,
    /// `[C, H, W]`
    pub grid: Array,
    /// Geolocation is optional; the container does not carry it.
    pub center: Option<GeoPoint>,
    pub resolution_deg: Option<f64>,
}

impl FieldCube {
    pub fn new(channels: Arc<[ChannelSpec]>, grid: Array) -> Result<Self, String> {
        let s = grid.shape();
        if s.len() != 3 || s[0] != channels.len() {
            return Err(format!("cube shape {s:?} does not match {} channels", channels.len()));
        }
        if s[1] != s[2] {
            return Err(format!("cube must be square, got {}x{}", s[1], s[2]));
        }
        if !grid.is_finite() {
            return Err("cube contains non-finite values".into());
        }
        Ok(FieldCube { channels, grid, center: None, resolution_deg: None })
    }

    pub fn channel_count(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.grid.data()[(c * h + y) * w + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.grid.data()[c * n..(c + 1) * n]
    }

    pub fn channel_index(&self, spec: &ChannelSpec) -> Option<usize> {
        self.channels.iter().position(|c| c == spec)
    }

    /// Pixel holding the storm centre.
    pub fn center_pixel(&self) -> (usize, usize) {
        (self.height() / 2, self.width() / 2)
    }
}

/// One storm's lifetime: aligned intensity records and condition cubes.
#[derive(Clone, Debug, PartialEq)]
pub struct Storm {
    pub id: Arc<str>,
    pub channels: Arc<[ChannelSpec]>,
    pub records: Vec<IntensityRecord>,
    pub cubes: Vec<FieldCube>,
}

impl Storm {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn grid_size(&self) -> usize {
        self.cubes.first().map_or(0, FieldCube::height)
    }
}

/// Total timesteps over a storm collection.
pub fn timestep_count(storms: &[Storm]) -> usize {
    storms.iter().map(Storm::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knot_conversion() {
        assert_eq!(knots_to_ms(1.0), 0.5144);
        assert_eq!(knots_to_ms(0.0), 0.0);
        assert!((knots_to_ms(100.0) - 51.44).abs() < 1e-12);
    }

    #[test]
    fn channel_sets() {
        assert_eq!(full_channels().len(), 69);
        validate_channels(&full_channels()).unwrap();
        assert_eq!(standard_channels(6), desk_channels());
        assert_eq!(standard_channels(69).len(), 69);
        validate_channels(&standard_channels(69)).unwrap();
        let dup = vec![ChannelSpec::surface(Variable::Msl); 2];
        assert!(validate_channels(&dup).is_err());
        assert!(ChannelSpec::pressure(Variable::T, 333).validate().is_err());
        assert!(ChannelSpec { variable: Variable::Msl, level: Level::Pressure(500) }.validate().is_err());
    }

    #[test]
    fn record_bounds() {
        let mut r = IntensityRecord { msw: 50.0, mslp: 980.0, valid_time: 0, storm_id: "a".into() };
        r.validate().unwrap();
        r.mslp = 840.0;
        assert!(r.validate().is_err());
        r.mslp = 980.0;
        r.msw = 0.0;
        assert!(r.validate().is_err());
    }
}
