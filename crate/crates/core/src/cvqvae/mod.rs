//! Conditional vector-quantized autoencoder: intensity is encoded against
//! patch tokens of the condition cube, snapped to a codebook entry, and
//! decoded against the same tokens.

mod codebook;
mod embedder;

pub use codebook::{init_codebook, quantize, CodebookState, LatentCode, EMA_EPS};
pub use embedder::{pyramid_extents, token_count, PyramidEmbedder, PYRAMID_STRIDES};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{CrossAttention, Mlp};
use crate::numerics::{Array, Bound, Graph, Mode, ParamId, ParamSet, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CvqvaeConfig {
    pub grid: usize,
    pub channels: usize,
    pub patch: usize,
    pub feature_width: usize,
    /// d_p
    pub token_dim: usize,
    /// d_z
    pub latent_dim: usize,
    /// J
    pub codebook_size: usize,
    pub heads: usize,
    pub attn_width: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub beta: f64,
}

impl Default for CvqvaeConfig {
    fn default() -> Self {
        CvqvaeConfig {
            grid: 24,
            channels: 6,
            patch: 3,
            feature_width: 8,
            token_dim: 32,
            latent_dim: 32,
            codebook_size: 64,
            heads: 3,
            attn_width: 48,
            mlp_hidden: 64,
            dropout: 0.1,
            beta: 0.25,
        }
    }
}

impl CvqvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least two entries".into()));
        }
        if self.heads == 0 || !self.attn_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attn_width {} is not divisible by heads {}",
                self.attn_width, self.heads
            )));
        }
        if token_count(self.grid, self.patch).is_none() {
            return Err(Error::Config(format!(
                "grid {} with patch {} does not tile every pyramid level",
                self.grid, self.patch
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.beta >= 0.0) {
            return Err(Error::Config("dropout must lie in [0, 1) and beta be non-negative".into()));
        }
        if [self.latent_dim, self.token_dim, self.feature_width, self.mlp_hidden, self.channels].contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub mlp: Mlp,
    pub attn: CrossAttention,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub attn: CrossAttention,
    pub mlp: Mlp,
}

/// Parameter name prefixes by module.
pub const EMBED_PREFIX: &str = "embed.";
pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";
pub const CODEBOOK_NAME: &str = "codebook.e";

#[derive(Clone, Debug)]
pub struct Cvqvae {
    pub config: CvqvaeConfig,
    pub params: ParamSet,
    pub embedder: PyramidEmbedder,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: ParamId,
    pub state: CodebookState,
}

/// The three loss terms and their weighted total as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct VqLoss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
    /// What backward runs on: `total`, or `total` without the codebook term
    /// when the codebook follows moving averages.
    pub objective: Var,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Stage1Options {
    /// Replace the condition tokens with zeros.
    pub zero_condition: bool,
    /// Codebook follows moving averages; its loss term is reported only.
    pub ema: bool,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub h: Var,
    pub e_q: Var,
    pub reconstruction: Var,
    pub indices: Vec<usize>,
    pub loss: VqLoss,
}

impl Cvqvae {
    pub fn new(config: CvqvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = &config;
        let embedder = PyramidEmbedder::new(
            &mut params,
            c.grid,
            c.channels,
            c.feature_width,
            c.patch,
            c.token_dim,
            &mut rng,
        )?;
        let attn = |params: &mut ParamSet, name: &str, q: usize, out: usize, rng: &mut ChaCha8Rng| {
            CrossAttention::new(params, name, q, c.token_dim, c.attn_width, c.heads, out, c.dropout, rng)
                .map_err(Error::Config)
        };
        let encoder = Encoder {
            mlp: Mlp::new(&mut params, "enc.mlp", 2, c.mlp_hidden, c.attn_width, &mut rng),
            attn: attn(&mut params, "enc.attn", c.attn_width, c.latent_dim, &mut rng)?,
        };
        let decoder = Decoder {
            attn: attn(&mut params, "dec.attn", c.latent_dim, c.attn_width, &mut rng)?,
            mlp: Mlp::new(&mut params, "dec.mlp", c.attn_width, c.mlp_hidden, 2, &mut rng),
        };
        let codebook = params.add(CODEBOOK_NAME, init_codebook(&mut rng, c.codebook_size, c.latent_dim));
        let state = CodebookState::new(c.codebook_size, c.latent_dim);
        Ok(Cvqvae { config, params, embedder, encoder, decoder, codebook, state })
    }

    pub fn codebook(&self) -> &Array {
        self.params.get(self.codebook)
    }

    pub fn tokens(&self) -> usize {
        self.embedder.tokens()
    }

    /// Condition tokens `E_p [B, T, d_p]` from channels-last cubes.
    pub fn extract_patches(&self, b: &Bound, g: &mut Graph, cubes: Var) -> Result<Var> {
        self.embedder.forward(b, g, cubes)
    }

    /// Encoder output `h [B, d_z]` from normalized intensity `[B, 2]`.
    pub fn encode(&self, b: &Bound, g: &mut Graph, intensity: Var, tokens: Var) -> Result<Var> {
        let s = g.shape(intensity).to_vec();
        if s.len() != 2 || s[1] != 2 {
            return Err(Error::Model(format!("intensity batch must be [B, 2], got {s:?}")));
        }
        let q = self.encoder.mlp.forward(b, g, intensity)?;
        let q = g.reshape(q, &[s[0], 1, self.config.attn_width])?;
        let h = self.encoder.attn.forward(b, g, q, tokens)?;
        Ok(g.reshape(h, &[s[0], self.config.latent_dim])?)
    }

    /// Normalized intensity `[B, 2]` from latents `[B, d_z]`.
    pub fn decode(&self, b: &Bound, g: &mut Graph, z: Var, tokens: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::Model(format!("latent batch must be [B, {}], got {s:?}", self.config.latent_dim)));
        }
        let q = g.reshape(z, &[s[0], 1, s[1]])?;
        let a = self.decoder.attn.forward(b, g, q, tokens)?;
        let a = g.reshape(a, &[s[0], self.config.attn_width])?;
        Ok(self.decoder.mlp.forward(b, g, a)?)
    }

    /// Nearest entries for each row of `h`.
    pub fn quantize_rows(&self, h: &Array) -> Result<Vec<LatentCode>> {
        let d = self.config.latent_dim;
        h.data().chunks(d).map(|row| quantize(row, self.codebook())).collect()
    }

    /// Selected codebook rows as a differentiable gather `onehot @ E`.
    pub fn gather(&self, b: &Bound, g: &mut Graph, indices: &[usize]) -> Result<Var> {
        let j = self.config.codebook_size;
        let mut onehot = Array::zeros(&[indices.len(), j]);
        for (r, &i) in indices.iter().enumerate() {
            onehot.data_mut()[r * j + i] = 1.0;
        }
        let onehot = g.constant(onehot)?;
        Ok(g.matmul(onehot, b.var(self.codebook))?)
    }

    /// Full first-stage pass and loss. `indices` overrides the nearest-entry
    /// search, which keeps finite-difference probes on one assignment.
    pub fn stage1_forward(
        &self,
        b: &Bound,
        g: &mut Graph,
        intensity: Var,
        cubes: Var,
        opts: Stage1Options,
        indices: Option<&[usize]>,
    ) -> Result<Stage1Output> {
        let mut tokens = self.extract_patches(b, g, cubes)?;
        if opts.zero_condition {
            let shape = g.shape(tokens).to_vec();
            tokens = g.constant(Array::zeros(&shape))?;
        }
        let h = self.encode(b, g, intensity, tokens)?;
        let indices = match indices {
            Some(ix) => ix.to_vec(),
            None => self.quantize_rows(g.value(h))?.into_iter().map(|c| c.index).collect(),
        };
        let e_q = self.gather(b, g, &indices)?;
        let z = if g.mode() == Mode::Eval {
            e_q
        } else {
            // straight-through: value e_q, gradient of h
            let diff = g.sub(e_q, h)?;
            let diff = g.stop_gradient(diff)?;
            g.add(h, diff)?
        };
        let reconstruction = self.decode(b, g, z, tokens)?;
        let loss = vq_loss(g, intensity, reconstruction, h, e_q, self.config.beta, opts.ema)?;
        Ok(Stage1Output { h, e_q, reconstruction, indices, loss })
    }

    /// Whether a parameter belongs to the frozen-in-stage-2 encoding side.
    pub fn is_encoding_param(name: &str) -> bool {
        name.starts_with(EMBED_PREFIX) || name.starts_with(ENCODER_PREFIX) || name == CODEBOOK_NAME
    }
}

/// `recon = mean|I - Î|`, `codebook = |sg(h) - e_q|^2`,
/// `commit = |h - sg(e_q)|^2` (squared norms averaged over the batch),
/// `total = recon + codebook + beta * commit`.
pub fn vq_loss(g: &mut Graph, target: Var, pred: Var, h: Var, e_q: Var, beta: f64, ema: bool) -> Result<VqLoss> {
    let batch = g.shape(h)[0] as f64;
    let err = g.sub(target, pred)?;
    let err = g.abs(err)?;
    let recon = g.mean(err)?;

    let h_sg = g.stop_gradient(h)?;
    let d = g.sub(h_sg, e_q)?;
    let d = g.square(d)?;
    let d = g.sum(d)?;
    let codebook = g.scale(d, 1.0 / batch)?;

    let e_sg = g.stop_gradient(e_q)?;
    let d = g.sub(h, e_sg)?;
    let d = g.square(d)?;
    let d = g.sum(d)?;
    let commit = g.scale(d, 1.0 / batch)?;

    let weighted = g.scale(commit, beta)?;
    let partial = g.add(recon, weighted)?;
    let total = g.add(partial, codebook)?;
    let objective = if ema { partial } else { total };
    Ok(VqLoss { total, recon, codebook, commit, objective })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::numerics::{grad_check_many, GradCheckOptions};

    fn small() -> CvqvaeConfig {
        CvqvaeConfig {
            grid: 8,
            channels: 4,
            patch: 2,
            feature_width: 3,
            token_dim: 6,
            latent_dim: 4,
            codebook_size: 8,
            heads: 3,
            attn_width: 6,
            mlp_hidden: 5,
            dropout: 0.0,
            beta: 0.25,
        }
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes() {
        let m = Cvqvae::new(small(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(Mode::Eval, 0);
        let b = m.params.bind(&mut g, |_| false).unwrap();
        let i = g.constant(random(&mut rng, &[3, 2])).unwrap();
        let c = g.constant(random(&mut rng, &[3, 8, 8, 4])).unwrap();
        let out = m.stage1_forward(&b, &mut g, i, c, Stage1Options::default(), None).unwrap();
        assert_eq!(g.shape(out.h), &[3, 4]);
        assert_eq!(g.shape(out.reconstruction), &[3, 2]);
        assert_eq!(out.indices.len(), 3);
        assert!(out.indices.iter().all(|&i| i < 8));
    }

    #[test]
    fn conditioning_changes_latent_and_output() {
        let m = Cvqvae::new(small(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let intensity = random(&mut rng, &[1, 2]);
        let z = random(&mut rng, &[1, 4]);
        let run = |cube: Array| {
            let mut g = Graph::new(Mode::Eval, 0);
            let b = m.params.bind(&mut g, |_| false).unwrap();
            let i = g.constant(intensity.clone()).unwrap();
            let c = g.constant(cube).unwrap();
            let t = m.extract_patches(&b, &mut g, c).unwrap();
            let h = m.encode(&b, &mut g, i, t).unwrap();
            let zv = g.constant(z.clone()).unwrap();
            let y = m.decode(&b, &mut g, zv, t).unwrap();
            (g.value(h).clone(), g.value(y).clone())
        };
        let (h1, y1) = run(random(&mut rng, &[1, 8, 8, 4]));
        let (h2, y2) = run(random(&mut rng, &[1, 8, 8, 4]));
        assert!(h1.l2_distance(&h2) > 0.0);
        assert!(y1.l2_distance(&y2) > 0.0);
    }

    #[test]
    fn loss_decomposes() {
        let m = Cvqvae::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(Mode::Train, 0);
        let b = m.params.bind(&mut g, |_| true).unwrap();
        let i = g.constant(random(&mut rng, &[4, 2])).unwrap();
        let c = g.constant(random(&mut rng, &[4, 8, 8, 4])).unwrap();
        let out = m.stage1_forward(&b, &mut g, i, c, Stage1Options::default(), None).unwrap();
        let v = |x: Var| g.value(x).item();
        let l = out.loss;
        assert!((v(l.total) - (v(l.recon) + v(l.codebook) + 0.25 * v(l.commit))).abs() < 1e-12);
        // codebook and commit agree in value, differ only in gradient routing
        assert!((v(l.codebook) - v(l.commit)).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let mut g = Graph::new(Mode::Train, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let i = g.constant(random(&mut rng, &[2, 2])).unwrap();
        let h = g.leaf(random(&mut rng, &[2, 3]), true).unwrap();
        let l = vq_loss(&mut g, i, i, h, h, 0.25, false).unwrap();
        assert_eq!(g.value(l.total).item(), 0.0);
    }

    #[test]
    fn stop_gradient_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(Mode::Train, 0);
        let i = g.constant(random(&mut rng, &[2, 2])).unwrap();
        let p = g.constant(random(&mut rng, &[2, 2])).unwrap();
        let h = g.leaf(random(&mut rng, &[2, 3]), true).unwrap();
        let e = g.leaf(random(&mut rng, &[2, 3]), true).unwrap();
        let l = vq_loss(&mut g, i, p, h, e, 0.25, false).unwrap();
        g.backward(l.codebook).unwrap();
        assert!(g.grad(h).is_none_or(|a| a.data().iter().all(|&v| v == 0.0)));
        assert!(g.grad(e).unwrap().data().iter().any(|&v| v != 0.0));
        g.zero_grad();
        g.backward(l.commit).unwrap();
        assert!(g.grad(e).is_none_or(|a| a.data().iter().all(|&v| v == 0.0)));
        assert!(g.grad(h).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let m = Cvqvae::new(small(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new(Mode::Train, 0);
        let b = m.params.bind(&mut g, |_| false).unwrap();
        let h = g.leaf(random(&mut rng, &[2, 4]), true).unwrap();
        let ix = m.quantize_rows(g.value(h)).unwrap().into_iter().map(|c| c.index).collect::<Vec<_>>();
        let e_q = m.gather(&b, &mut g, &ix).unwrap();
        let diff = g.sub(e_q, h).unwrap();
        let diff = g.stop_gradient(diff).unwrap();
        let z = g.add(h, diff).unwrap();
        let zz = g.leaf(g.value(z).clone(), true).unwrap();
        let w = g.constant(random(&mut rng, &[2, 4])).unwrap();
        let t = g.mul(z, w).unwrap();
        let loss_h = g.sum(t).unwrap();
        let t2 = g.mul(zz, w).unwrap();
        let loss_z = g.sum(t2).unwrap();
        g.backward(loss_h).unwrap();
        g.backward(loss_z).unwrap();
        assert_eq!(g.grad(h).unwrap(), g.grad(zz).unwrap());
    }

    #[test]
    fn end_to_end_gradient_check() {
        let m = Cvqvae::new(small(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let intensity = random(&mut rng, &[2, 2]);
        let cubes = random(&mut rng, &[2, 8, 8, 4]);
        let ix = {
            let mut g = Graph::new(Mode::Check, 0);
            let b = m.params.bind(&mut g, |_| false).unwrap();
            let i = g.constant(intensity.clone()).unwrap();
            let c = g.constant(cubes.clone()).unwrap();
            m.stage1_forward(&b, &mut g, i, c, Stage1Options::default(), None).unwrap().indices
        };
        let err = grad_check_many(
            |g, vars| {
                let b = m.params.bind(g, |_| false)?;
                let c = g.constant(cubes.clone())?;
                let out = m
                    .stage1_forward(&b, g, vars[0], c, Stage1Options::default(), Some(&ix))
                    .map_err(|e| crate::numerics::NumericsError::Invalid(e.to_string()))?;
                Ok(out.loss.total)
            },
            std::slice::from_ref(&intensity),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
