//! Mapping trained stages to and from checkpoint entries.

use super::train::{Stage1, Stage2};
use super::{Checkpoint, CheckpointError, RunConfig};
use crate::atmosphere::{ChannelSpec, Level, NormStats, StatsSource, Variable};
use crate::cvqvae::{CodebookState, Cvqvae};
use crate::error::{Error, Result};
use crate::forecaster::{ForecastModel, Forecaster, PiStats};
use crate::numerics::{Adam, Array, ParamSet};

const VARIABLES: [Variable; 9] = [
    Variable::Z,
    Variable::Q,
    Variable::U,
    Variable::V,
    Variable::T,
    Variable::U10,
    Variable::V10,
    Variable::T2m,
    Variable::Msl,
];

fn malformed(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Malformed(msg.into()))
}

fn scalars(ck: &Checkpoint, name: &str, count: usize) -> Result<Vec<f64>> {
    let a = ck.require(name)?;
    if a.len() != count {
        return Err(malformed(format!("{name} holds {} values, expected {count}", a.len())));
    }
    Ok(a.data().to_vec())
}

fn as_u32(v: f64, what: &str) -> Result<u32> {
    if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
        return Err(malformed(format!("{what} is not a u32: {v}")));
    }
    Ok(v as u32)
}

fn stage_of(ck: &Checkpoint) -> Result<u32> {
    as_u32(scalars(ck, "meta.stage", 1)?[0], "meta.stage")
}

fn put_params(ck: &mut Checkpoint, prefix: &str, params: &ParamSet) {
    for (name, a) in params.iter() {
        ck.insert(format!("{prefix}{name}"), a.clone());
    }
}

fn take_params(ck: &Checkpoint, prefix: &str, params: &mut ParamSet) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let a = ck.require(&format!("{prefix}{name}"))?.clone();
        params.set(&name, a).map_err(|e| malformed(format!("{prefix}{name}: {e}")))?;
    }
    Ok(())
}

fn put_optimizer(ck: &mut Checkpoint, prefix: &str, opt: &Adam, params: &ParamSet) {
    ck.insert_scalars(format!("{prefix}steps"), &[opt.steps() as f64]);
    let (m, v) = opt.moments();
    for ((name, _), (m, v)) in params.iter().zip(m.iter().zip(v)) {
        ck.insert(format!("{prefix}m.{name}"), m.clone());
        ck.insert(format!("{prefix}v.{name}"), v.clone());
    }
}

fn take_optimizer(ck: &Checkpoint, prefix: &str, cfg: &RunConfig, params: &ParamSet) -> Result<Adam> {
    let steps = scalars(ck, &format!("{prefix}steps"), 1)?[0];
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, p) in params.iter() {
        let m = ck.require(&format!("{prefix}m.{name}"))?;
        let v = ck.require(&format!("{prefix}v.{name}"))?;
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(malformed(format!("optimizer moments for {name} have the wrong shape")));
        }
        first.push(m.clone());
        second.push(v.clone());
    }
    Ok(Adam::from_state(cfg.adam(), first, second, steps as u64))
}

fn put_norm(ck: &mut Checkpoint, norm: &NormStats) -> Result<()> {
    ck.insert_scalars("norm.channel_mean", &norm.channel_mean);
    ck.insert_scalars("norm.channel_std", &norm.channel_std);
    ck.insert_scalars("norm.intensity", &[norm.msw.0, norm.msw.1, norm.mslp.0, norm.mslp.1]);
    ck.insert_scalars("norm.source", &[norm.source.fingerprint as f64, norm.source.storms as f64]);
    let mut codes = Vec::with_capacity(2 * norm.channels.len());
    for c in &norm.channels {
        let v = VARIABLES.iter().position(|&v| v == c.variable).expect("every variable is listed");
        codes.push(v as f64);
        codes.push(match c.level {
            Level::Surface => 0.0,
            Level::Pressure(p) => p as f64,
        });
    }
    ck.insert("norm.channels", Array::new(vec![norm.channels.len(), 2], codes)?);
    Ok(())
}

fn take_norm(ck: &Checkpoint) -> Result<NormStats> {
    let codes = ck.require("norm.channels")?;
    if codes.rank() != 2 || codes.shape()[1] != 2 {
        return Err(malformed("norm.channels must be [C, 2]"));
    }
    let c = codes.shape()[0];
    let mut channels = Vec::with_capacity(c);
    for row in codes.data().chunks(2) {
        let v = VARIABLES
            .get(as_u32(row[0], "variable code")? as usize)
            .ok_or_else(|| malformed(format!("unknown variable code {}", row[0])))?;
        let level = as_u32(row[1], "level")?;
        let spec = if level == 0 { ChannelSpec::surface(*v) } else { ChannelSpec::pressure(*v, level) };
        spec.validate().map_err(malformed)?;
        channels.push(spec);
    }
    let i = scalars(ck, "norm.intensity", 4)?;
    let s = scalars(ck, "norm.source", 2)?;
    let norm = NormStats {
        channels,
        channel_mean: scalars(ck, "norm.channel_mean", c)?,
        channel_std: scalars(ck, "norm.channel_std", c)?,
        msw: (i[0], i[1]),
        mslp: (i[2], i[3]),
        source: StatsSource { fingerprint: as_u32(s[0], "norm source")?, storms: s[1] as usize },
    };
    if norm.channel_std.iter().chain([&norm.msw.1, &norm.mslp.1]).any(|&s| !(s > 0.0)) {
        return Err(malformed("normalization std must be positive"));
    }
    Ok(norm)
}

fn put_codebook_state(ck: &mut Checkpoint, s: &CodebookState) {
    ck.insert_scalars("cb.cluster_size", &s.cluster_size);
    ck.insert("cb.ema_sum", s.ema_sum.clone());
    ck.insert_scalars("cb.usage", &s.usage.iter().map(|&u| u as f64).collect::<Vec<_>>());
    ck.insert_scalars("cb.last_used", &s.last_used.iter().map(|&u| u as f64).collect::<Vec<_>>());
    ck.insert_scalars("cb.updates", &[s.updates as f64]);
}

fn take_codebook_state(ck: &Checkpoint, vae: &mut Cvqvae) -> Result<()> {
    let j = vae.config.codebook_size;
    let ema_sum = ck.require("cb.ema_sum")?.clone();
    if ema_sum.shape() != [j, vae.config.latent_dim] {
        return Err(malformed("cb.ema_sum has the wrong shape"));
    }
    vae.state = CodebookState {
        cluster_size: scalars(ck, "cb.cluster_size", j)?,
        ema_sum,
        usage: scalars(ck, "cb.usage", j)?.into_iter().map(|u| u as u64).collect(),
        last_used: scalars(ck, "cb.last_used", j)?.into_iter().map(|u| u as u64).collect(),
        updates: scalars(ck, "cb.updates", 1)?[0] as u64,
    };
    Ok(())
}

/// CRC32 over the names and bit patterns of every frozen parameter.
pub fn frozen_fingerprint(vae: &Cvqvae) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (name, a) in vae.params.iter() {
        if Cvqvae::is_encoding_param(name) {
            h.update(name.as_bytes());
            for v in a.data() {
                h.update(&v.to_le_bytes());
            }
        }
    }
    h.finalize()
}

pub fn stage1_checkpoint(s: &Stage1) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(s.config.to_text());
    ck.insert_scalars("meta.stage", &[1.0]);
    ck.insert_scalars("meta.zero_condition", &[s.zero_condition as u8 as f64]);
    put_params(&mut ck, "p.", &s.vae.params);
    put_codebook_state(&mut ck, &s.vae.state);
    put_optimizer(&mut ck, "opt.", &s.optimizer, &s.vae.params);
    put_norm(&mut ck, &s.norm)?;
    Ok(ck)
}

pub fn load_stage1(ck: &Checkpoint) -> Result<Stage1> {
    let stage = stage_of(ck)?;
    if stage != 1 {
        return Err(Error::Config(format!("expected a first-stage checkpoint, found stage {stage}")));
    }
    let config = RunConfig::parse(&ck.config)?;
    let mut vae = Cvqvae::new(config.vae_config(), config.seed)?;
    take_params(ck, "p.", &mut vae.params)?;
    take_codebook_state(ck, &mut vae)?;
    let optimizer = take_optimizer(ck, "opt.", &config, &vae.params)?;
    let norm = take_norm(ck)?;
    if norm.channels.len() != config.channels {
        return Err(malformed("normalization channels disagree with the config"));
    }
    let zero_condition = scalars(ck, "meta.zero_condition", 1)?[0] != 0.0;
    Ok(Stage1 { config, vae, norm, optimizer, zero_condition, log: Vec::new() })
}

pub fn stage2_checkpoint(s: &Stage2) -> Result<Checkpoint> {
    let m = &s.model;
    let mut ck = Checkpoint::new(s.config.to_text());
    ck.insert_scalars("meta.stage", &[2.0]);
    ck.insert_scalars("meta.stage1_fingerprint", &[s.stage1_fingerprint as f64]);
    ck.insert_scalars("meta.frozen", &[frozen_fingerprint(&m.vae) as f64]);
    put_params(&mut ck, "p.", &m.vae.params);
    put_codebook_state(&mut ck, &m.vae.state);
    put_norm(&mut ck, &m.norm)?;
    put_params(&mut ck, "f.", &m.forecaster.params);
    let p = &m.pi_stats;
    ck.insert_scalars("pi_stats", &[p.vmax.0, p.vmax.1, p.pmin.0, p.pmin.1, p.fingerprint as f64]);
    put_optimizer(&mut ck, "optd.", &s.decoder_optimizer, &m.vae.params);
    put_optimizer(&mut ck, "optf.", &s.forecaster_optimizer, &m.forecaster.params);
    Ok(ck)
}

pub fn load_stage2(ck: &Checkpoint) -> Result<Stage2> {
    let stage = stage_of(ck)?;
    if stage != 2 {
        return Err(Error::Config(format!("expected a second-stage checkpoint, found stage {stage}")));
    }
    let config = RunConfig::parse(&ck.config)?;
    let mut vae = Cvqvae::new(config.vae_config(), config.seed)?;
    take_params(ck, "p.", &mut vae.params)?;
    take_codebook_state(ck, &mut vae)?;
    let frozen = as_u32(scalars(ck, "meta.frozen", 1)?[0], "meta.frozen")?;
    if frozen_fingerprint(&vae) != frozen {
        return Err(malformed("frozen parameters do not match their recorded fingerprint"));
    }
    let mut forecaster = Forecaster::new(config.forecaster_config(), config.seed)?;
    take_params(ck, "f.", &mut forecaster.params)?;
    let p = scalars(ck, "pi_stats", 5)?;
    let pi_stats = PiStats { vmax: (p[0], p[1]), pmin: (p[2], p[3]), fingerprint: as_u32(p[4], "pi fingerprint")? };
    let norm = take_norm(ck)?;
    let decoder_optimizer = take_optimizer(ck, "optd.", &config, &vae.params)?;
    let forecaster_optimizer = take_optimizer(ck, "optf.", &config, &forecaster.params)?;
    let stage1_fingerprint = as_u32(scalars(ck, "meta.stage1_fingerprint", 1)?[0], "stage-1 fingerprint")?;
    let model = ForecastModel {
        vae,
        forecaster,
        norm,
        pi_stats,
        pi_constants: config.pi_constants(),
        options: config.forecast_options(),
    };
    Ok(Stage2 { config, model, stage1_fingerprint, decoder_optimizer, forecaster_optimizer, log: Vec::new() })
}
