//! Two-stage training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RunConfig;
use crate::atmosphere::{make_windows, DatasetSplit, FieldCube, NormStats, StatsSource, Storm};
use crate::cvqvae::{Cvqvae, Stage1Options, DECODER_PREFIX};
use crate::error::{Error, Result};
use crate::forecaster::{ForecastModel, Forecaster, PiStats};
use crate::numerics::{Adam, Array, Graph, Mode, NumericsError, ParamSet};
use crate::potential_intensity::PIResult;

/// Per-step graph seed.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step
}

fn diverged(stage: &'static str, step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerics(NumericsError::NonFinite { op }) => {
            Error::Divergence { stage, step, detail: format!("non-finite value in {op}") }
        }
        other => other,
    }
}

/// Normalized intensity pairs and channels-last cubes for a set of
/// timesteps.
pub struct Stage1Data {
    pub intensity: Vec<[f64; 2]>,
    pub cubes: Vec<Array>,
}

impl Stage1Data {
    pub fn from_storms<'a>(storms: impl IntoIterator<Item = &'a Storm>, norm: &NormStats) -> Result<Self> {
        let mut intensity = Vec::new();
        let mut cubes = Vec::new();
        for s in storms {
            for (r, c) in s.records.iter().zip(&s.cubes) {
                intensity.push(norm.normalize_intensity(r.msw, r.mslp));
                cubes.push(norm.normalize_cube(c).map_err(Error::Data)?);
            }
        }
        Ok(Stage1Data { intensity, cubes })
    }

    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Array, Array)> {
        let i: Vec<f64> = idx.iter().flat_map(|&k| self.intensity[k]).collect();
        let shape = self.cubes[idx[0]].shape().to_vec();
        let mut c = Vec::with_capacity(idx.len() * self.cubes[0].len());
        for &k in idx {
            c.extend_from_slice(self.cubes[k].data());
        }
        let mut cs = vec![idx.len()];
        cs.extend(shape);
        Ok((Array::new(vec![idx.len(), 2], i)?, Array::new(cs, c)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub val_recon: f64,
    pub utilization: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1 {
    pub config: RunConfig,
    pub vae: Cvqvae,
    pub norm: NormStats,
    pub optimizer: Adam,
    pub zero_condition: bool,
    pub log: Vec<Stage1Epoch>,
}

/// Reconstruction quality and codebook use on held-out timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Eval {
    /// Mean absolute error over both normalized intensity components.
    pub recon_mae: f64,
    pub utilization: f64,
    pub indices: Vec<usize>,
}

pub fn evaluate_stage1(vae: &Cvqvae, data: &Stage1Data, zero_condition: bool, batch: usize) -> Result<Stage1Eval> {
    if data.is_empty() {
        return Err(Error::Data("no timesteps to evaluate".into()));
    }
    let mut abs_sum = 0.0;
    let mut indices = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (i, c) = data.batch(chunk)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let b = vae.params.bind(&mut g, |_| false)?;
        let iv = g.constant(i.clone())?;
        let cv = g.constant(c)?;
        let opts = Stage1Options { zero_condition, ema: false };
        let out = vae.stage1_forward(&b, &mut g, iv, cv, opts, None)?;
        abs_sum += g.value(out.reconstruction).data().iter().zip(i.data()).map(|(p, t)| (p - t).abs()).sum::<f64>();
        indices.extend(out.indices);
    }
    let mut used = vec![false; vae.config.codebook_size];
    for &k in &indices {
        used[k] = true;
    }
    Ok(Stage1Eval {
        recon_mae: abs_sum / (2 * data.len()) as f64,
        utilization: used.iter().filter(|&&u| u).count() as f64 / used.len() as f64,
        indices,
    })
}

fn subset<'a>(storms: &'a [Storm], idx: &'a [usize]) -> impl Iterator<Item = &'a Storm> + 'a {
    idx.iter().map(move |&i| &storms[i])
}

/// Training-split statistics tagged with the split fingerprint.
pub fn fit_norm(storms: &[Storm], split: &DatasetSplit) -> Result<NormStats> {
    let train: Vec<Storm> = subset(storms, &split.train).cloned().collect();
    NormStats::fit(&train, StatsSource { fingerprint: split.fingerprint, storms: train.len() }).map_err(Error::Data)
}

/// First stage: fit the conditional autoencoder on the training split.
pub fn pretrain(cfg: &RunConfig, storms: &[Storm], split: &DatasetSplit, zero_condition: bool) -> Result<Stage1> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let norm = fit_norm(storms, split)?;
    let train = Stage1Data::from_storms(subset(storms, &split.train), &norm)?;
    let val_idx = if split.validation.is_empty() { &split.train } else { &split.validation };
    let val = Stage1Data::from_storms(subset(storms, val_idx), &norm)?;
    if train.is_empty() {
        return Err(Error::Data("training split has no timesteps".into()));
    }

    let mut vae = Cvqvae::new(cfg.vae_config(), cfg.seed)?;
    let mut optimizer = Adam::new(cfg.adam(), &vae.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_3101);
    let ema = cfg.codebook_ema;
    let opts = Stage1Options { zero_condition, ema };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs_pretrain {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let (i, c) = train.batch(chunk)?;
            let mut g = Graph::new(Mode::Train, step_seed(cfg.seed, step));
            let bound = vae.params.bind(&mut g, |name| !(ema && name == crate::cvqvae::CODEBOOK_NAME))?;
            let run = |g: &mut Graph| -> Result<_> {
                let iv = g.constant(i.clone())?;
                let cv = g.constant(c.clone())?;
                let out = vae.stage1_forward(&bound, g, iv, cv, opts, None)?;
                g.backward(out.loss.objective)?;
                Ok(out)
            };
            let out = run(&mut g).map_err(diverged("pretrain", step))?;
            let l = out.loss;
            let vals = [g.value(l.total).item(), g.value(l.recon).item(), g.value(l.codebook).item(), g.value(l.commit).item()];
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            batches += 1.0;
            let grads = bound.grads(&g);
            optimizer.step(&mut vae.params, &grads).map_err(|e| diverged("pretrain", step)(e.into()))?;
            let h = g.value(out.h).clone();
            let codebook = vae.codebook;
            if ema {
                let (params, state) = (&mut vae.params, &mut vae.state);
                state.ema_update(params.get_mut(codebook), &h, &out.indices, cfg.ema_decay);
            } else {
                vae.state.record(&out.indices);
            }
            let (params, state) = (&mut vae.params, &mut vae.state);
            state.reseed_dead(params.get_mut(codebook), &h, cfg.dead_after, &mut rng);
        }
        let ev = evaluate_stage1(&vae, &val, zero_condition, cfg.batch_size)?;
        let e = Stage1Epoch {
            epoch,
            total: sums[0] / batches,
            recon: sums[1] / batches,
            codebook: sums[2] / batches,
            commit: sums[3] / batches,
            val_recon: ev.recon_mae,
            utilization: ev.utilization,
        };
        log::info!(
            "pretrain epoch {epoch}: total {:.5} recon {:.5} codebook {:.5} commit {:.5} val_recon {:.5} usage {:.3}",
            e.total,
            e.recon,
            e.codebook,
            e.commit,
            e.val_recon,
            e.utilization
        );
        log.push(e);
        if cfg.recon_target > 0.0 && ev.recon_mae < cfg.recon_target {
            log::info!("validation reconstruction below {} after epoch {epoch}", cfg.recon_target);
            break;
        }
    }
    apply_shadow(&optimizer, &mut vae.params, |name| !(ema && name == crate::cvqvae::CODEBOOK_NAME))?;
    Ok(Stage1 { config: cfg.clone(), vae, norm, optimizer, zero_condition, log })
}

/// Cached inputs for one training window of the second stage.
struct WindowCache {
    history: Vec<Vec<f64>>,
    pi: Vec<PIResult>,
    /// `m` token blocks of `[T, d_p]`, flattened.
    tokens: Vec<f64>,
    /// `[m, 2]` normalized truth.
    target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2 {
    pub config: RunConfig,
    pub model: ForecastModel,
    pub stage1_fingerprint: u32,
    pub decoder_optimizer: Adam,
    pub forecaster_optimizer: Adam,
    pub log: Vec<Stage2Epoch>,
}

/// Frozen-encoder latents `[B, d_z]` (quantized unless disabled) and the
/// tokens of the given cubes.
fn frozen_latents(model: &ForecastModel, records: &[[f64; 2]], cubes: &[Array]) -> Result<Vec<Vec<f64>>> {
    let vae = &model.vae;
    let mut g = Graph::new(Mode::Eval, 0);
    let b = vae.params.bind(&mut g, |_| false)?;
    let i = g.constant(Array::new(vec![records.len(), 2], records.iter().flatten().copied().collect())?)?;
    let mut shape = vec![cubes.len()];
    shape.extend_from_slice(cubes[0].shape());
    let c = g.constant(Array::new(shape, cubes.iter().flat_map(|a| a.data().iter().copied()).collect())?)?;
    let t = vae.extract_patches(&b, &mut g, c)?;
    let h = vae.encode(&b, &mut g, i, t)?;
    let d = vae.config.latent_dim;
    if model.options.use_vq {
        Ok(vae.quantize_rows(g.value(h))?.into_iter().map(|c| c.vector).collect())
    } else {
        Ok(g.value(h).data().chunks(d).map(<[f64]>::to_vec).collect())
    }
}

fn frozen_tokens(vae: &Cvqvae, cubes: &[Array]) -> Result<Vec<f64>> {
    let mut g = Graph::new(Mode::Eval, 0);
    let b = vae.params.bind(&mut g, |_| false)?;
    let mut shape = vec![cubes.len()];
    shape.extend_from_slice(cubes[0].shape());
    let c = g.constant(Array::new(shape, cubes.iter().flat_map(|a| a.data().iter().copied()).collect())?)?;
    let t = vae.extract_patches(&b, &mut g, c)?;
    Ok(g.value(t).data().to_vec())
}

fn build_caches(model: &ForecastModel, cfg: &RunConfig, storms: &[Storm], train: &[usize]) -> Result<Vec<WindowCache>> {
    let train_storms: Vec<Storm> = subset(storms, train).cloned().collect();
    let windows = make_windows(&train_storms, cfg.n, cfg.m).map_err(Error::Data)?;
    if windows.is_empty() {
        return Err(Error::Data(format!("no training storm spans n + m = {} steps", cfg.n + cfg.m)));
    }
    let norm = &model.norm;
    // history latents per timestep
    let mut latents: Vec<Vec<Vec<f64>>> = Vec::with_capacity(train_storms.len());
    for s in &train_storms {
        let recs: Vec<[f64; 2]> = s.records.iter().map(|r| norm.normalize_intensity(r.msw, r.mslp)).collect();
        let cubes = s.cubes.iter().map(|c| norm.normalize_cube(c).map_err(Error::Data)).collect::<Result<Vec<_>>>()?;
        let mut per = Vec::with_capacity(s.len());
        for (r, c) in recs.chunks(64).zip(cubes.chunks(64)) {
            per.extend(frozen_latents(model, r, c)?);
        }
        latents.push(per);
    }
    let degrade = cfg.degrade_params();
    let mut caches = Vec::with_capacity(windows.len());
    for w in &windows {
        let data = w.materialize(&train_storms, &degrade, cfg.seed);
        let lead_cubes: Vec<&FieldCube> = if cfg.use_forecast_fields {
            data.future_cubes.iter().collect()
        } else {
            vec![&data.history_cubes[cfg.n - 1]; cfg.m]
        };
        let pi = if cfg.use_pi { model.pi_for(&lead_cubes)? } else { Vec::new() };
        let normed = lead_cubes.iter().map(|c| norm.normalize_cube(c).map_err(Error::Data)).collect::<Result<Vec<_>>>()?;
        let tokens = frozen_tokens(&model.vae, &normed)?;
        let target = data.future.iter().flat_map(|r| norm.normalize_intensity(r.msw, r.mslp)).collect();
        let history = (w.start..w.start + w.n).map(|t| latents[w.storm][t].clone()).collect();
        caches.push(WindowCache { history, pi, tokens, target });
    }
    Ok(caches)
}

/// Second stage: freeze embedder, encoder, and codebook; fine-tune the
/// decoder and train the latent iteration model.
pub fn train_forecast(
    cfg: &RunConfig,
    stage1: &Stage1,
    stage1_fingerprint: u32,
    storms: &[Storm],
    split: &DatasetSplit,
) -> Result<Stage2> {
    cfg.validate()?;
    if cfg.vae_config() != stage1.vae.config {
        return Err(Error::Config("autoencoder settings differ from the first-stage checkpoint".into()));
    }
    if stage1.norm.source.fingerprint != split.fingerprint {
        return Err(Error::Data("stage-1 statistics were fitted on a different training split".into()));
    }
    let train: Vec<Storm> = subset(storms, &split.train).cloned().collect();
    let pi_stats = PiStats::fit(&train, &cfg.pi_constants(), split.fingerprint)?;
    let forecaster = Forecaster::new(cfg.forecaster_config(), cfg.seed ^ 0x00F0_CA57)?;
    let mut model = ForecastModel {
        vae: stage1.vae.clone(),
        forecaster,
        norm: stage1.norm.clone(),
        pi_stats,
        pi_constants: cfg.pi_constants(),
        options: cfg.forecast_options(),
    };
    let caches = build_caches(&model, cfg, storms, &split.train)?;
    let tokens = model.vae.tokens();
    let token_dim = model.vae.config.token_dim;
    let d = model.vae.config.latent_dim;
    let (n, m) = (cfg.n, cfg.m);

    let mut decoder_optimizer = Adam::new(cfg.adam(), &model.vae.params);
    let mut forecaster_optimizer = Adam::new(cfg.adam(), &model.forecaster.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_3202);
    let mut order: Vec<usize> = (0..caches.len()).collect();
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs_forecast {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let bsz = chunk.len();
            let mut g = Graph::new(Mode::Train, step_seed(cfg.seed ^ 0x2, step));
            let vb = model.vae.params.bind(&mut g, |name| name.starts_with(DECODER_PREFIX))?;
            let fb = model.forecaster.params.bind(&mut g, |_| true)?;
            let run = |g: &mut Graph| -> Result<crate::numerics::Var> {
                let mut history = Vec::with_capacity(n);
                for t in 0..n {
                    let rows: Vec<f64> = chunk.iter().flat_map(|&k| caches[k].history[t].iter().copied()).collect();
                    history.push(g.constant(Array::new(vec![bsz, d], rows)?)?);
                }
                let mut pi = Vec::new();
                if cfg.use_pi {
                    for i in 0..m {
                        let vals: Vec<PIResult> = chunk.iter().map(|&k| caches[k].pi[i]).collect();
                        pi.push(model.forecaster.embed_pi(&fb, g, &vals, Some(&model.pi_stats))?);
                    }
                }
                let latents = model.forecaster.roll_forecast(&fb, g, &history, &pi, m)?;
                let block = tokens * token_dim;
                let mut preds = Vec::with_capacity(m);
                for (i, z) in latents.into_iter().enumerate() {
                    let z = if cfg.resnap_latents {
                        let ix: Vec<usize> =
                            model.vae.quantize_rows(g.value(z))?.into_iter().map(|c| c.index).collect();
                        let e = model.vae.gather(&vb, g, &ix)?;
                        let diff = g.sub(e, z)?;
                        let diff = g.stop_gradient(diff)?;
                        g.add(z, diff)?
                    } else {
                        z
                    };
                    let t: Vec<f64> =
                        chunk.iter().flat_map(|&k| caches[k].tokens[i * block..(i + 1) * block].iter().copied()).collect();
                    let tv = g.constant(Array::new(vec![bsz, tokens, token_dim], t)?)?;
                    preds.push(model.vae.decode(&vb, g, z, tv)?);
                }
                let pred = g.concat(&preds, 1)?;
                let target: Vec<f64> = chunk.iter().flat_map(|&k| caches[k].target.iter().copied()).collect();
                let tv = g.constant(Array::new(vec![bsz, 2 * m], target)?)?;
                let diff = g.sub(pred, tv)?;
                let diff = g.abs(diff)?;
                let loss = g.mean(diff)?;
                g.backward(loss)?;
                Ok(loss)
            };
            let loss = run(&mut g).map_err(diverged("train", step))?;
            loss_sum += g.value(loss).item();
            batches += 1.0;
            let vg = vb.grads(&g);
            let fg = fb.grads(&g);
            decoder_optimizer.step(&mut model.vae.params, &vg).map_err(|e| diverged("train", step)(e.into()))?;
            forecaster_optimizer
                .step(&mut model.forecaster.params, &fg)
                .map_err(|e| diverged("train", step)(e.into()))?;
        }
        let e = Stage2Epoch { epoch, loss: loss_sum / batches };
        log::info!("train epoch {epoch}: loss {:.5}", e.loss);
        log.push(e);
    }
    for (opt, params) in [
        (&decoder_optimizer, &mut model.vae.params),
        (&forecaster_optimizer, &mut model.forecaster.params),
    ] {
        apply_shadow(opt, params, |name| !crate::cvqvae::Cvqvae::is_encoding_param(name))?;
    }
    Ok(Stage2 { config: cfg.clone(), model, stage1_fingerprint, decoder_optimizer, forecaster_optimizer, log })
}

/// Replace trained weights with their moving averages where selected.
fn apply_shadow(opt: &Adam, params: &mut ParamSet, select: impl Fn(&str) -> bool) -> Result<()> {
    if let Some(shadow) = opt.shadow_weights() {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (name, w) in names.iter().zip(shadow) {
            if select(name) {
                params.set(name, w.clone())?;
            }
        }
    }
    Ok(())
}
