use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{xavier_uniform, Array, Bound, ConvGeometry, Graph, ParamId, ParamSet, Var};

/// Strides of the four pyramid stages.
pub const PYRAMID_STRIDES: [usize; 4] = [1, 2, 2, 1];

/// Spatial extent of each pyramid stage for a square input.
pub fn pyramid_extents(grid: usize) -> Option<Vec<usize>> {
    let mut extents = Vec::with_capacity(PYRAMID_STRIDES.len());
    let mut h = grid;
    for &s in &PYRAMID_STRIDES {
        h = ConvGeometry { kernel: 3, stride: s, pad: 1 }.output_extent(h)?;
        extents.push(h);
    }
    Some(extents)
}

/// Token count for a grid and patch size, or `None` if some stage extent is
/// not a multiple of the patch.
pub fn token_count(grid: usize, patch: usize) -> Option<usize> {
    let extents = pyramid_extents(grid)?;
    if patch == 0 || extents.iter().any(|e| e % patch != 0) {
        return None;
    }
    Some(extents.iter().map(|e| (e / patch) * (e / patch)).sum())
}

/// Strided convolution pyramid; every stage output is cut into `P x P`
/// patches that share one projection to the token width.
#[derive(Clone, Debug)]
pub struct PyramidEmbedder {
    pub convs: Vec<(ParamId, ParamId, ConvGeometry)>,
    pub projection: Linear,
    pub position: ParamId,
    pub extents: Vec<usize>,
    pub patch: usize,
    pub channels: usize,
    pub features: usize,
    pub token_dim: usize,
}

impl PyramidEmbedder {
    pub fn new(
        params: &mut ParamSet,
        grid: usize,
        channels: usize,
        features: usize,
        patch: usize,
        token_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let extents = pyramid_extents(grid).ok_or_else(|| Error::Config(format!("grid {grid} too small")))?;
        let tokens = token_count(grid, patch).ok_or_else(|| {
            Error::Config(format!("pyramid extents {extents:?} are not all divisible by patch {patch}"))
        })?;
        if channels == 0 || features == 0 || token_dim == 0 {
            return Err(Error::Config("embedder widths must be positive".into()));
        }
        let mut convs = Vec::new();
        let mut cin = channels;
        for (i, &stride) in PYRAMID_STRIDES.iter().enumerate() {
            let geom = ConvGeometry { kernel: 3, stride, pad: 1 };
            let w = params.add(
                format!("embed.conv{i}.w"),
                xavier_uniform(rng, &[9 * cin, features], 9 * cin, features),
            );
            let b = params.add(format!("embed.conv{i}.b"), Array::zeros(&[features]));
            convs.push((w, b, geom));
            cin = features;
        }
        let flat = patch * patch * features;
        let projection = Linear::new(params, "embed.proj", flat, token_dim, rng);
        let pos = (0..tokens * token_dim).map(|_| rng.gen_range(-0.02..0.02)).collect();
        let position = params.add("embed.pos", Array::new(vec![tokens, token_dim], pos)?);
        Ok(PyramidEmbedder { convs, projection, position, extents, patch, channels, features, token_dim })
    }

    pub fn tokens(&self) -> usize {
        self.extents.iter().map(|e| (e / self.patch).pow(2)).sum()
    }

    /// `[B, Hs, Hs, F]` to `[B, (Hs/P)^2, P*P*F]`, patches row-major.
    fn patches(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, h, f, p) = (s[0], s[1], s[3], self.patch);
        let n = h / p;
        let x = g.reshape(x, &[b, n, p, n, p, f])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        Ok(g.reshape(x, &[b, n * n, p * p * f])?)
    }

    /// Channels-last cubes `[B, H, W, C]` to tokens `[B, T, d_p]`.
    pub fn forward(&self, b: &Bound, g: &mut Graph, cubes: Var) -> Result<Var> {
        let s = g.shape(cubes).to_vec();
        if s.len() != 4
            || s[1] != s[2]
            || s[3] != self.channels
            || pyramid_extents(s[1]).as_ref() != Some(&self.extents)
        {
            return Err(Error::Model(format!("cube batch {s:?} does not fit the embedder")));
        }
        let mut x = cubes;
        let mut parts = Vec::with_capacity(self.convs.len());
        for (i, &(w, bias, geom)) in self.convs.iter().enumerate() {
            x = g.conv2d(x, b.var(w), Some(b.var(bias)), geom)?;
            x = g.gelu(x)?;
            debug_assert_eq!(g.shape(x)[1], self.extents[i]);
            parts.push(self.patches(g, x)?);
        }
        let tokens = g.concat(&parts, 1)?;
        let projected = self.projection.forward(b, g, tokens)?;
        Ok(g.add_bias(projected, b.var(self.position))?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Mode;

    #[test]
    fn token_counts() {
        assert_eq!(pyramid_extents(40), Some(vec![40, 20, 10, 10]));
        assert_eq!(token_count(40, 5), Some(88));
        assert_eq!(token_count(24, 3), Some(88));
        assert_eq!(token_count(24, 4), None);
        assert_eq!(token_count(16, 2), Some(64 + 16 + 4 + 4));
    }

    #[test]
    fn zero_cube_gives_finite_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let e = PyramidEmbedder::new(&mut p, 24, 6, 4, 3, 8, &mut rng).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let b = p.bind(&mut g, |_| false).unwrap();
        let x = g.constant(Array::zeros(&[2, 24, 24, 6])).unwrap();
        let t = e.forward(&b, &mut g, x).unwrap();
        assert_eq!(g.shape(t), &[2, 88, 8]);
        assert!(g.value(t).is_finite());
    }

    #[test]
    fn indivisible_geometry_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        assert!(PyramidEmbedder::new(&mut p, 24, 6, 4, 4, 8, &mut rng).is_err());
    }
}
