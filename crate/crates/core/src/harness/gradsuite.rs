//! Finite-difference checks for every differentiable op and both training
//! objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cvqvae::{Cvqvae, CvqvaeConfig, Stage1Options, CODEBOOK_NAME};
use crate::error::Error;
use crate::forecaster::{Forecaster, ForecasterConfig, PiStats};
use crate::numerics::{grad_check_many, Array, Bound, ConvGeometry, GradCheckOptions, Graph, Mode, NumericsError, Var};
use crate::potential_intensity::PIResult;

/// Tolerance on the max relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub name: String,
    pub seeds: usize,
    pub worst: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn offset(a: Array, by: f64) -> Array {
    let shape = a.shape().to_vec();
    Array::new(shape, a.data().iter().map(|v| v + by).collect()).unwrap()
}

/// Random weighted sum, so each output element gets its own upstream
/// gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(random(&mut rng, g.shape(y)))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_t", vec![vec![4, 3], vec![2, 4]], |g, v| g.matmul_t(v[0], true, v[1], true)),
        ("batched_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], |g, v| g.add_bias(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| g.scale(v[0], -1.7)),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![3, 5]], |g, v| g.slice(v[0], 1, 1, 3)),
        ("softmax", vec![vec![3, 4]], |g, v| g.softmax(v[0])),
        ("sum", vec![vec![2, 3]], |g, v| {
            let s = g.sum(v[0])?;
            g.square(s)
        }),
        ("mean", vec![vec![2, 3]], |g, v| {
            let s = g.mean(v[0])?;
            g.square(s)
        }),
        ("sum_axis", vec![vec![2, 3, 4]], |g, v| g.sum_axis(v[0], 1)),
        ("abs", vec![vec![6]], |g, v| g.abs(v[0])),
        ("square", vec![vec![6]], |g, v| g.square(v[0])),
        ("sqrt", vec![vec![6]], |g, v| {
            let s = g.square(v[0])?;
            let one = g.constant(Array::full(&[6], 1.0))?;
            let s = g.add(s, one)?;
            g.sqrt(s)
        }),
        ("relu", vec![vec![6]], |g, v| g.relu(v[0])),
        ("gelu", vec![vec![6]], |g, v| g.gelu(v[0])),
        ("stop_gradient", vec![vec![4]], |g, v| {
            let s = g.stop_gradient(v[0])?;
            let q = g.mul(s, v[0])?;
            g.add(q, v[0])
        }),
        ("conv2d", vec![vec![2, 5, 5, 2], vec![18, 3], vec![3]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvGeometry { kernel: 3, stride: 1, pad: 1 })
        }),
        ("conv2d_strided", vec![vec![1, 6, 6, 2], vec![18, 2]], |g, v| {
            g.conv2d(v[0], v[1], None, ConvGeometry { kernel: 3, stride: 2, pad: 1 })
        }),
        ("upsample2d", vec![vec![1, 2, 3, 2]], |g, v| g.upsample2d(v[0], 2)),
    ]
}

fn check_op(name: &str, shapes: &[Vec<usize>], f: OpFn, seeds: u64) -> Result<GradResult, NumericsError> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Array> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let err = grad_check_many(
            |g, v| {
                let y = f(g, v)?;
                probe(g, y, seed)
            },
            &inputs,
            GradCheckOptions { seed, ..Default::default() },
        )?;
        worst = worst.max(err);
    }
    Ok(GradResult { name: name.into(), seeds: seeds as usize, worst })
}

fn numerics(e: Error) -> NumericsError {
    NumericsError::Invalid(e.to_string())
}

fn tiny_vae() -> CvqvaeConfig {
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

/// Stage-1 objective against inputs and a sample of every parameter.
/// Codebook assignments are fixed at the unperturbed point.
///
/// The check point is moved close to the optimum: the intensity sits a small
/// fixed distance from its reconstruction and each assigned codebook row a
/// small distance from its encoding. The loss is then of order `RESIDUAL`,
/// so rounding in the central differences shrinks with it, while the
/// absolute-error term stays clear of its kink.
fn stage1_objective(seeds: u64) -> Result<GradResult, NumericsError> {
    const RESIDUAL: f64 = 1e-3;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let m = Cvqvae::new(tiny_vae(), seed).map_err(numerics)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cubes = random(&mut rng, &[2, 8, 8, 4]);
        let first = rng.gen_range(0..8);
        let ix = vec![first, (first + rng.gen_range(1..8)) % 8];
        let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { RESIDUAL } else { -RESIDUAL };
        let gap: Vec<f64> = (0..4).map(|_| sign(&mut rng)).collect();
        let shift: Vec<f64> = (0..8).map(|_| sign(&mut rng)).collect();
        let cb = m.params.iter().position(|(n, _)| n == CODEBOOK_NAME).expect("codebook is a parameter");

        let forward = |g: &mut Graph, vars: &[Var]| {
            let b = Bound::from_vars(vars[2..].to_vec());
            m.stage1_forward(&b, g, vars[0], vars[1], Stage1Options::default(), Some(&ix)).map_err(numerics)
        };
        let mut inputs = vec![random(&mut rng, &[2, 2]), cubes];
        inputs.extend(m.params.values().iter().cloned());
        // The encoding depends on the intensity and the reconstruction on the
        // codebook, so settle both by a short fixed-point iteration.
        for _ in 0..12 {
            let mut g = Graph::new(Mode::Check, seed);
            let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect::<Result<_, _>>()?;
            let out = forward(&mut g, &vars)?;
            let h = g.value(out.h).data().to_vec();
            let rec = g.value(out.reconstruction).data().to_vec();
            let book = inputs[2 + cb].data_mut();
            for (r, &j) in ix.iter().enumerate() {
                for k in 0..4 {
                    book[j * 4 + k] = h[r * 4 + k] + shift[r * 4 + k];
                }
            }
            let target = inputs[0].data_mut();
            for k in 0..4 {
                target[k] = rec[k] + gap[k];
            }
        }
        let err = grad_check_many(
            |g, vars| Ok(forward(g, vars)?.loss.total),
            &inputs,
            GradCheckOptions { max_elements: Some(4), seed, ..Default::default() },
        )?;
        // A point that failed to settle would put residuals near the kink.
        let mut g = Graph::new(Mode::Check, seed);
        let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect::<Result<_, _>>()?;
        let out = forward(&mut g, &vars)?;
        let settled = g
            .value(out.reconstruction)
            .data()
            .iter()
            .zip(inputs[0].data())
            .all(|(r, t)| (t - r).abs() > 0.5 * RESIDUAL);
        if !settled {
            return Err(NumericsError::Invalid(format!("stage-1 check point did not settle for seed {seed}")));
        }
        worst = worst.max(err);
    }
    Ok(GradResult { name: "stage1_objective".into(), seeds: seeds as usize, worst })
}

/// Stage-2 objective: rollout, decode, and mean absolute error against a
/// target, differentiated through decoder and iteration parameters.
fn stage2_objective(seeds: u64) -> Result<GradResult, NumericsError> {
    let stats = PiStats { vmax: (60.0, 10.0), pmin: (980.0, 15.0), fingerprint: 0 };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let vae = Cvqvae::new(tiny_vae(), seed).map_err(numerics)?;
        let fc = ForecasterConfig { n: 2, latent_dim: 4, attn_width: 6, heads: 3, mlp_hidden: 5, dropout: 0.0, use_pi: true };
        let f = Forecaster::new(fc, seed).map_err(numerics)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let hist: Vec<Array> = (0..2).map(|_| random(&mut rng, &[2, 4])).collect();
        let tokens = random(&mut rng, &[2, vae.tokens(), 6]);
        // Unit-scale parameters keep the attention away from flat logits, and
        // the offset target keeps every residual on one side of the kink.
        let target = offset(random(&mut rng, &[2, 4]), 5.0);
        let pi = [PIResult { vmax: 55.0, pmin: 980.0 }, PIResult { vmax: 70.0, pmin: 960.0 }];
        let vn = vae.params.len();
        let mut inputs: Vec<Array> = vae.params.values().iter().map(|p| random(&mut rng, p.shape())).collect();
        inputs.extend(f.params.values().iter().map(|p| random(&mut rng, p.shape())));
        let err = grad_check_many(
            |g, vars| {
                let vb = Bound::from_vars(vars[..vn].to_vec());
                let fb = Bound::from_vars(vars[vn..].to_vec());
                let h: Vec<Var> = hist.iter().map(|a| g.constant(a.clone())).collect::<Result<_, _>>()?;
                let p: Vec<Var> = (0..2)
                    .map(|_| f.embed_pi(&fb, g, &pi, Some(&stats)).map_err(numerics))
                    .collect::<Result<_, _>>()?;
                let z = f.roll_forecast(&fb, g, &h, &p, 2).map_err(numerics)?;
                let mut preds = Vec::new();
                for zi in z {
                    let t = g.constant(tokens.clone())?;
                    preds.push(vae.decode(&vb, g, zi, t).map_err(numerics)?);
                }
                let y = g.concat(&preds, 1)?;
                let t = g.constant(target.clone())?;
                let d = g.sub(y, t)?;
                let d = g.abs(d)?;
                g.mean(d)
            },
            &inputs,
            GradCheckOptions { max_elements: Some(3), seed, ..Default::default() },
        )?;
        worst = worst.max(err);
    }
    Ok(GradResult { name: "stage2_objective".into(), seeds: seeds as usize, worst })
}

/// Every op over `op_seeds` random draws, then both objectives over
/// `model_seeds`.
pub fn run(op_seeds: u64, model_seeds: u64) -> Result<Vec<GradResult>, NumericsError> {
    let mut out = Vec::new();
    for (name, shapes, f) in ops() {
        out.push(check_op(name, &shapes, f, op_seeds)?);
    }
    out.push(stage1_objective(model_seeds)?);
    out.push(stage2_objective(model_seeds)?);
    Ok(out)
}
