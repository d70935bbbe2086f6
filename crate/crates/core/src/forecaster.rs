//! Second stage: latent rollout over a sliding window with a potential
//! intensity constraint, decoded against forecast condition cubes.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atmosphere::{FieldCube, IntensityRecord, NormStats, Storm};
use crate::cvqvae::Cvqvae;
use crate::error::{Error, Result};
use crate::layers::{CrossAttention, Linear, Mlp};
use crate::numerics::{Array, Bound, Graph, Mode, ParamSet, Var};
use crate::potential_intensity::{potential_intensity_at_center, PIConstants, PIResult};

#[derive(Clone, Debug, PartialEq)]
pub struct ForecasterConfig {
    /// History length.
    pub n: usize,
    pub latent_dim: usize,
    pub attn_width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub use_pi: bool,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig { n: 4, latent_dim: 32, attn_width: 48, heads: 3, mlp_hidden: 64, dropout: 0.1, use_pi: true }
    }
}

/// Number of attention blocks the window produces: one self block for the
/// oldest latent, then `j + 1` blocks for each later position `j`.
pub fn score_block_count(n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    1 + (1..n).map(|j| j + 1).sum::<usize>()
}

/// `(query, key)` window positions of each block in concatenation order.
pub fn score_block_pairs(n: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    let mut pairs = vec![(0, 0)];
    for j in 1..n {
        for k in 0..=j {
            pairs.push((k, j));
        }
    }
    pairs
}

/// Mean and std of potential intensity over the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct PiStats {
    pub vmax: (f64, f64),
    pub pmin: (f64, f64),
    pub fingerprint: u32,
}

impl PiStats {
    pub fn fit(storms: &[Storm], constants: &PIConstants, fingerprint: u32) -> Result<Self> {
        let mut v = Vec::new();
        let mut p = Vec::new();
        for s in storms {
            for c in &s.cubes {
                let r = potential_intensity_at_center(c, constants)?;
                v.push(r.vmax);
                p.push(r.pmin);
            }
        }
        if v.is_empty() {
            return Err(Error::Data("no training cubes for potential intensity statistics".into()));
        }
        let ms = |x: &[f64]| {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let s = (x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
            (m, if s > 1e-12 { s } else { 1.0 })
        };
        Ok(PiStats { vmax: ms(&v), pmin: ms(&p), fingerprint })
    }

    pub fn normalize(&self, r: &PIResult) -> [f64; 2] {
        [(r.vmax - self.vmax.0) / self.vmax.1, (r.pmin - self.pmin.0) / self.pmin.1]
    }
}

#[derive(Debug)]
pub struct Forecaster {
    pub config: ForecasterConfig,
    pub params: ParamSet,
    pub pairs: Vec<CrossAttention>,
    pub fusion: Mlp,
    pub pi_attn: CrossAttention,
    pub pi_embed: Linear,
    pi_calls: AtomicU64,
}

impl Clone for Forecaster {
    fn clone(&self) -> Self {
        Forecaster {
            config: self.config.clone(),
            params: self.params.clone(),
            pairs: self.pairs.clone(),
            fusion: self.fusion.clone(),
            pi_attn: self.pi_attn.clone(),
            pi_embed: self.pi_embed.clone(),
            pi_calls: AtomicU64::new(self.pi_calls()),
        }
    }
}

impl Forecaster {
    pub fn new(config: ForecasterConfig, seed: u64) -> Result<Self> {
        if config.n == 0 {
            return Err(Error::Config("history length n must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = &config;
        let d = c.latent_dim;
        let attn = |params: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| {
            CrossAttention::new(params, name, d, d, c.attn_width, c.heads, d, c.dropout, rng).map_err(Error::Config)
        };
        let blocks = score_block_count(c.n);
        let pairs = (0..blocks)
            .map(|i| attn(&mut params, &format!("iter.pair{i}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = Mlp::new(&mut params, "iter.fusion", blocks * d, c.mlp_hidden, d, &mut rng);
        let pi_attn = attn(&mut params, "iter.pi_attn", &mut rng)?;
        let pi_embed = Linear::new(&mut params, "pi.embed", 2, d, &mut rng);
        Ok(Forecaster { config, params, pairs, fusion, pi_attn, pi_embed, pi_calls: AtomicU64::new(0) })
    }

    /// How many times the potential intensity embedding has run.
    pub fn pi_calls(&self) -> u64 {
        self.pi_calls.load(Ordering::Relaxed)
    }

    /// `[B, d_z]` embeddings of potential intensity pairs.
    pub fn embed_pi(&self, b: &Bound, g: &mut Graph, pi: &[PIResult], stats: Option<&PiStats>) -> Result<Var> {
        let stats = stats.ok_or_else(|| Error::Model("potential intensity statistics are missing".into()))?;
        if pi.is_empty() {
            return Err(Error::Model("no potential intensity values to embed".into()));
        }
        self.pi_calls.fetch_add(1, Ordering::Relaxed);
        let mut data = Vec::with_capacity(2 * pi.len());
        for r in pi {
            if !(r.vmax.is_finite() && r.pmin.is_finite()) {
                return Err(Error::Model("non-finite potential intensity".into()));
            }
            data.extend(stats.normalize(r));
        }
        let x = g.constant(Array::new(vec![pi.len(), 2], data)?)?;
        let y = self.pi_embed.forward(b, g, x)?;
        Ok(g.gelu(y)?)
    }

    fn attend_single(&self, att: &CrossAttention, b: &Bound, g: &mut Graph, q: Var, kv: Var) -> Result<Var> {
        let s = g.shape(q).to_vec();
        let q3 = g.reshape(q, &[s[0], 1, s[1]])?;
        let kv3 = g.reshape(kv, &[s[0], 1, s[1]])?;
        let out = att.forward(b, g, q3, kv3)?;
        Ok(g.reshape(out, &[s[0], self.config.latent_dim])?)
    }

    /// Concatenated attention blocks `[B, blocks * d_z]` over a window of
    /// `n` latents, each `[B, d_z]`, oldest first.
    pub fn window_scores(&self, b: &Bound, g: &mut Graph, window: &[Var]) -> Result<Var> {
        if window.len() != self.config.n {
            return Err(Error::Model(format!("window holds {} latents, expected {}", window.len(), self.config.n)));
        }
        let mut blocks = Vec::with_capacity(self.pairs.len());
        for (att, (k, j)) in self.pairs.iter().zip(score_block_pairs(self.config.n)) {
            blocks.push(self.attend_single(att, b, g, window[k], window[j])?);
        }
        Ok(g.concat(&blocks, 1)?)
    }

    /// Next latent from the window and this lead's PI embedding.
    pub fn step(&self, b: &Bound, g: &mut Graph, window: &[Var], pi: Option<Var>) -> Result<Var> {
        let scores = self.window_scores(b, g, window)?;
        let s = self.fusion.forward(b, g, scores)?;
        let a = match (self.config.use_pi, pi) {
            (true, Some(p)) => {
                let c = self.attend_single(&self.pi_attn, b, g, s, p)?;
                g.add(s, c)?
            }
            (true, None) => return Err(Error::Model("potential intensity embedding required".into())),
            (false, _) => s,
        };
        Ok(g.add(a, window[self.config.n - 1])?)
    }

    /// `m` latents rolled forward from `history` (oldest first).
    pub fn roll_forecast(&self, b: &Bound, g: &mut Graph, history: &[Var], pi: &[Var], m: usize) -> Result<Vec<Var>> {
        if m == 0 {
            return Err(Error::Model("horizon must be positive".into()));
        }
        if self.config.use_pi && pi.len() < m {
            return Err(Error::Model(format!("{} potential intensity embeddings for horizon {m}", pi.len())));
        }
        let mut window = history.to_vec();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            assert_eq!(window.len(), self.config.n, "window length drifted");
            let next = self.step(b, g, &window, pi.get(i).copied())?;
            out.push(next);
            window.remove(0);
            window.push(next);
        }
        Ok(out)
    }
}

/// Options that change which inputs the forecast path sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastOptions {
    pub use_vq: bool,
    pub use_forecast_fields: bool,
    pub resnap_latents: bool,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        ForecastOptions { use_vq: true, use_forecast_fields: true, resnap_latents: false }
    }
}

/// Everything inference needs: the stage-1 model carrying the fine-tuned
/// decoder, the iteration model, and the training-split statistics.
#[derive(Clone, Debug)]
pub struct ForecastModel {
    pub vae: Cvqvae,
    pub forecaster: Forecaster,
    pub norm: NormStats,
    pub pi_stats: PiStats,
    pub pi_constants: PIConstants,
    pub options: ForecastOptions,
}

/// Prepared inputs for a batch of forecasts.
pub struct ForecastInputs<'a> {
    pub history: &'a [&'a [IntensityRecord]],
    pub history_cubes: &'a [&'a [FieldCube]],
    pub future_cubes: &'a [&'a [FieldCube]],
}

impl ForecastModel {
    fn cube_batch(&self, cubes: &[&FieldCube]) -> Result<Array> {
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for c in cubes {
            let a = self.norm.normalize_cube(c).map_err(Error::Data)?;
            shape = a.shape().to_vec();
            data.extend_from_slice(a.data());
        }
        let mut full = vec![cubes.len()];
        full.extend(shape);
        Ok(Array::new(full, data)?)
    }

    /// Latents for history steps `[B, d_z]` from normalized intensity and
    /// cubes: quantized, or raw encoder output when quantization is off.
    pub fn history_latent(&self, b: &Bound, g: &mut Graph, records: &[&IntensityRecord], cubes: &[&FieldCube]) -> Result<Var> {
        let mut data = Vec::with_capacity(2 * records.len());
        for r in records {
            data.extend(self.norm.normalize_intensity(r.msw, r.mslp));
        }
        let i = g.constant(Array::new(vec![records.len(), 2], data)?)?;
        let c = g.constant(self.cube_batch(cubes)?)?;
        let t = self.vae.extract_patches(b, g, c)?;
        let h = self.vae.encode(b, g, i, t)?;
        if !self.options.use_vq {
            return Ok(h);
        }
        let ix: Vec<usize> = self.vae.quantize_rows(g.value(h))?.into_iter().map(|c| c.index).collect();
        self.vae.gather(b, g, &ix)
    }

    /// Potential intensity at the centre of each cube.
    pub fn pi_for(&self, cubes: &[&FieldCube]) -> Result<Vec<PIResult>> {
        cubes.iter().map(|c| Ok(potential_intensity_at_center(c, &self.pi_constants)?)).collect()
    }

    /// Batched forecast of `m` steps per sample, returned as
    /// `[sample][lead]` records in knots and hPa.
    pub fn forecast_batch(&self, inputs: &ForecastInputs<'_>, m: usize) -> Result<Vec<Vec<IntensityRecord>>> {
        let batch = inputs.history.len();
        let n = self.forecaster.config.n;
        if batch == 0 || inputs.history_cubes.len() != batch || inputs.future_cubes.len() != batch {
            return Err(Error::Data("forecast inputs disagree on batch size".into()));
        }
        for bi in 0..batch {
            if inputs.history[bi].len() != n || inputs.history_cubes[bi].len() != n {
                return Err(Error::Data(format!("history must hold {n} steps")));
            }
            if self.options.use_forecast_fields && inputs.future_cubes[bi].len() < m {
                return Err(Error::Data(format!(
                    "{} forecast cubes for horizon {m}",
                    inputs.future_cubes[bi].len()
                )));
            }
        }
        let mut g = Graph::new(Mode::Eval, 0);
        let vb = self.vae.params.bind(&mut g, |_| false)?;
        let fb = self.forecaster.params.bind(&mut g, |_| false)?;

        let mut history = Vec::with_capacity(n);
        for t in 0..n {
            let recs: Vec<&IntensityRecord> = inputs.history.iter().map(|h| &h[t]).collect();
            let cubes: Vec<&FieldCube> = inputs.history_cubes.iter().map(|h| &h[t]).collect();
            history.push(self.history_latent(&vb, &mut g, &recs, &cubes)?);
        }
        let lead_cubes = |i: usize| -> Vec<&FieldCube> {
            (0..batch)
                .map(|bi| {
                    if self.options.use_forecast_fields {
                        &inputs.future_cubes[bi][i]
                    } else {
                        &inputs.history_cubes[bi][n - 1]
                    }
                })
                .collect()
        };
        let mut pi = Vec::new();
        if self.forecaster.config.use_pi {
            for i in 0..m {
                let values = self.pi_for(&lead_cubes(i))?;
                pi.push(self.forecaster.embed_pi(&fb, &mut g, &values, Some(&self.pi_stats))?);
            }
        }
        let latents = self.forecaster.roll_forecast(&fb, &mut g, &history, &pi, m)?;
        let mut out = vec![Vec::with_capacity(m); batch];
        for (i, z) in latents.into_iter().enumerate() {
            let z = if self.options.resnap_latents {
                let ix: Vec<usize> = self.vae.quantize_rows(g.value(z))?.into_iter().map(|c| c.index).collect();
                self.vae.gather(&vb, &mut g, &ix)?
            } else {
                z
            };
            let c = g.constant(self.cube_batch(&lead_cubes(i))?)?;
            let t = self.vae.extract_patches(&vb, &mut g, c)?;
            let y = self.vae.decode(&vb, &mut g, z, t)?;
            let v = g.value(y).data().to_vec();
            for bi in 0..batch {
                let (msw, mslp) = self.norm.denormalize_intensity([v[2 * bi], v[2 * bi + 1]]);
                let last = &inputs.history[bi][n - 1];
                out[bi].push(IntensityRecord {
                    msw,
                    mslp,
                    valid_time: last.valid_time + i as i64 + 1,
                    storm_id: Arc::clone(&last.storm_id),
                });
            }
        }
        Ok(out)
    }

    /// Forecast one storm `m` steps ahead.
    pub fn forecast_intensity(
        &self,
        history: &[IntensityRecord],
        history_cubes: &[FieldCube],
        future_cubes: &[FieldCube],
        m: usize,
    ) -> Result<Vec<IntensityRecord>> {
        let inputs = ForecastInputs {
            history: &[history],
            history_cubes: &[history_cubes],
            future_cubes: &[future_cubes],
        };
        Ok(self.forecast_batch(&inputs, m)?.remove(0))
    }
}
