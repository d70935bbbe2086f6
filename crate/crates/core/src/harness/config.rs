//! Run configuration: `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::atmosphere::{standard_channels, DegradeParams, SynthParams};
use crate::cvqvae::CvqvaeConfig;
use crate::error::{Error, Result};
use crate::forecaster::{ForecastOptions, ForecasterConfig};
use crate::numerics::AdamConfig;
use crate::potential_intensity::PIConstants;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub n: usize,
    pub m: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub token_dim: usize,
    pub patch: usize,
    pub heads: usize,
    pub attn_width: usize,
    pub feature_width: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub beta: f64,
    pub lr: f64,
    pub l1: f64,
    pub ema_decay: f64,
    pub codebook_ema: bool,
    /// Decay of the parameter moving average; 0 disables it.
    pub weight_ema: f64,
    pub dead_after: u64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_forecast: usize,
    /// Stop pretraining once validation reconstruction MAE drops below this;
    /// 0 disables early stopping.
    pub recon_target: f64,
    pub seed: u64,
    pub grid: usize,
    pub channels: usize,
    pub patterns: usize,
    pub storms: usize,
    pub min_life: usize,
    pub max_life: usize,
    pub shift_max: f64,
    pub noise_max: f64,
    pub ck_cd: f64,
    pub use_vq: bool,
    pub use_forecast_fields: bool,
    pub use_pi: bool,
    pub resnap_latents: bool,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            n: 4,
            m: 8,
            codebook_size: 64,
            latent_dim: 32,
            token_dim: 32,
            patch: 3,
            heads: 3,
            attn_width: 48,
            feature_width: 8,
            mlp_hidden: 64,
            dropout: 0.1,
            beta: 0.25,
            lr: 1e-4,
            l1: 1e-5,
            ema_decay: 0.99,
            codebook_ema: true,
            weight_ema: 0.0,
            dead_after: 2000,
            batch_size: 64,
            epochs_pretrain: 200,
            epochs_forecast: 100,
            recon_target: 0.0,
            seed: 0,
            grid: 24,
            channels: 6,
            patterns: 4,
            storms: 80,
            min_life: 20,
            max_life: 40,
            shift_max: 3.0,
            noise_max: 0.3,
            ck_cd: 0.9,
            use_vq: true,
            use_forecast_fields: true,
            use_pi: true,
            resnap_latents: false,
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            codebook_size: 1024,
            latent_dim: 128,
            token_dim: 128,
            patch: 5,
            attn_width: 384,
            feature_width: 256,
            epochs_pretrain: 30,
            epochs_forecast: 30,
            grid: 40,
            channels: 69,
            ..RunConfig::desk()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            pairs.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::desk();
        if let Some((_, _, v)) = pairs.iter().find(|(_, k, _)| k == "profile") {
            cfg = match v.as_str() {
                "desk" => RunConfig::desk(),
                "paper" => RunConfig::paper(),
                other => return Err(Error::Config(format!("unknown profile {other:?}"))),
            };
        }
        for (lineno, k, v) in &pairs {
            if k != "profile" {
                cfg.set(k, v).map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Assign one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {v:?}")),
            }
        }
        match key {
            "n" => self.n = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "token_dim" => self.token_dim = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "attn_width" => self.attn_width = num(key, value)?,
            "feature_width" => self.feature_width = num(key, value)?,
            "mlp_hidden" => self.mlp_hidden = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "l1" => self.l1 = num(key, value)?,
            "ema_decay" => self.ema_decay = num(key, value)?,
            "codebook_ema" => self.codebook_ema = flag(key, value)?,
            "weight_ema" => self.weight_ema = num(key, value)?,
            "dead_after" => self.dead_after = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs_pretrain" => self.epochs_pretrain = num(key, value)?,
            "epochs_forecast" => self.epochs_forecast = num(key, value)?,
            "recon_target" => self.recon_target = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "grid" => self.grid = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "patterns" => self.patterns = num(key, value)?,
            "storms" => self.storms = num(key, value)?,
            "min_life" => self.min_life = num(key, value)?,
            "max_life" => self.max_life = num(key, value)?,
            "shift_max" => self.shift_max = num(key, value)?,
            "noise_max" => self.noise_max = num(key, value)?,
            "ck_cd" => self.ck_cd = num(key, value)?,
            "use_vq" => self.use_vq = flag(key, value)?,
            "use_forecast_fields" => self.use_forecast_fields = flag(key, value)?,
            "use_pi" => self.use_pi = flag(key, value)?,
            "resnap_latents" => self.resnap_latents = flag(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n == 0 || self.m == 0 {
            return fail("n and m must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.l1 >= 0.0) {
            return fail("lr must be positive and l1 non-negative".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.weight_ema) {
            return fail(format!("weight_ema {} outside [0, 1)", self.weight_ema));
        }
        if !(self.ck_cd > 0.0 && self.ck_cd < 2.0) {
            return fail(format!("ck_cd {} outside (0, 2)", self.ck_cd));
        }
        if self.channels > 69 {
            return fail("at most 69 channels are defined".into());
        }
        if !(self.shift_max >= 0.0 && self.noise_max >= 0.0 && self.recon_target >= 0.0) {
            return fail("degradation amplitudes and recon_target must be non-negative".into());
        }
        if self.use_pi && self.channels < 6 {
            return fail(format!("potential intensity needs the t and q channels, so at least 6 channels, got {}", self.channels));
        }
        self.vae_config().validate()?;
        self.synth_params().validate().map_err(Error::Config)?;
        self.pi_constants().validate()?;
        Ok(())
    }

    pub fn vae_config(&self) -> CvqvaeConfig {
        CvqvaeConfig {
            grid: self.grid,
            channels: self.channels,
            patch: self.patch,
            feature_width: self.feature_width,
            token_dim: self.token_dim,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            heads: self.heads,
            attn_width: self.attn_width,
            mlp_hidden: self.mlp_hidden,
            dropout: self.dropout,
            beta: self.beta,
        }
    }

    pub fn forecaster_config(&self) -> ForecasterConfig {
        ForecasterConfig {
            n: self.n,
            latent_dim: self.latent_dim,
            attn_width: self.attn_width,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            dropout: self.dropout,
            use_pi: self.use_pi,
        }
    }

    pub fn forecast_options(&self) -> ForecastOptions {
        ForecastOptions {
            use_vq: self.use_vq,
            use_forecast_fields: self.use_forecast_fields,
            resnap_latents: self.resnap_latents,
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            grid: self.grid,
            channels: standard_channels(self.channels),
            patterns: self.patterns,
            min_life: self.min_life,
            max_life: self.max_life,
            constants: self.pi_constants(),
        }
    }

    pub fn degrade_params(&self) -> DegradeParams {
        DegradeParams { shift_max: self.shift_max, noise_max: self.noise_max, ..DegradeParams::default() }
    }

    pub fn pi_constants(&self) -> PIConstants {
        PIConstants { ck_cd: self.ck_cd, ..PIConstants::default() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            l1: self.l1,
            weight_ema: (self.weight_ema > 0.0).then_some(self.weight_ema),
            ..AdamConfig::default()
        }
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let profile = match self.profile {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        };
        let _ = writeln!(s, "profile = {profile}");
        let entries = [
            ("n", self.n.to_string()),
            ("m", self.m.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("token_dim", self.token_dim.to_string()),
            ("patch", self.patch.to_string()),
            ("heads", self.heads.to_string()),
            ("attn_width", self.attn_width.to_string()),
            ("feature_width", self.feature_width.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("dropout", self.dropout.to_string()),
            ("beta", self.beta.to_string()),
            ("lr", self.lr.to_string()),
            ("l1", self.l1.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("codebook_ema", self.codebook_ema.to_string()),
            ("weight_ema", self.weight_ema.to_string()),
            ("dead_after", self.dead_after.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs_pretrain", self.epochs_pretrain.to_string()),
            ("epochs_forecast", self.epochs_forecast.to_string()),
            ("recon_target", self.recon_target.to_string()),
            ("seed", self.seed.to_string()),
            ("grid", self.grid.to_string()),
            ("channels", self.channels.to_string()),
            ("patterns", self.patterns.to_string()),
            ("storms", self.storms.to_string()),
            ("min_life", self.min_life.to_string()),
            ("max_life", self.max_life.to_string()),
            ("shift_max", self.shift_max.to_string()),
            ("noise_max", self.noise_max.to_string()),
            ("ck_cd", self.ck_cd.to_string()),
            ("use_vq", self.use_vq.to_string()),
            ("use_forecast_fields", self.use_forecast_fields.to_string()),
            ("use_pi", self.use_pi.to_string()),
            ("resnap_latents", self.resnap_latents.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        let d = RunConfig::desk();
        assert_eq!((d.lr, d.l1, d.batch_size, d.beta, d.heads, d.dropout, d.n, d.m), (1e-4, 1e-5, 64, 0.25, 3, 0.1, 4, 8));
    }

    #[test]
    fn parse_with_comments_and_profile() {
        let c = RunConfig::parse("# header\nlatent_dim = 16 # inline\n\nprofile = paper\nuse_pi=false\n").unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert_eq!(c.latent_dim, 16);
        assert_eq!(c.codebook_size, 1024);
        assert!(!c.use_pi);
    }

    #[test]
    fn errors() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("lr").is_err());
        assert!(RunConfig::parse("lr = fast").is_err());
        assert!(RunConfig::parse("heads = 5").is_err());
        assert!(RunConfig::parse("use_pi = yes").is_err());
        assert!(RunConfig::parse("profile = huge").is_err());
        assert!(matches!(RunConfig::parse("patch = 4"), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::desk();
        c.lr = 3.5e-4;
        c.use_vq = false;
        c.seed = 99;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::paper().to_text()).unwrap(), RunConfig::paper());
    }
}
