use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, Graph, Mode, NumericsError, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many elements per input, sampled without
    /// replacement. `None` checks every element.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_elements: None, seed: 0 }
    }
}

fn evaluate<F>(f: &F, inputs: &[Array], replay: Option<Vec<Array>>) -> Result<(Graph, Vec<Var>, Var), NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = match replay {
        Some(r) => Graph::with_replay(Mode::Check, 0, r),
        None => Graph::new(Mode::Check, 0),
    };
    let vars = inputs
        .iter()
        .map(|x| g.param(x.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let root = f(&mut g, &vars)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(NumericsError::NonScalarRoot(v.shape().to_vec()));
    }
    if !v.item().is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check objective" });
    }
    Ok((g, vars, root))
}

/// Max relative error between backward and central differences of a scalar
/// function of one array.
pub fn grad_check<F>(f: F, x: &Array, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    grad_check_many(
        |g, v| f(g, v[0]),
        std::slice::from_ref(x),
        GradCheckOptions { eps, ..Default::default() },
    )
}

/// Max over all checked elements of `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// Stop-gradient values are frozen at the unperturbed point, so severed
/// paths stay severed under perturbation.
pub fn grad_check_many<F>(f: F, inputs: &[Array], opts: GradCheckOptions) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    if opts.eps <= 0.0 {
        return Err(NumericsError::Invalid("grad_check step must be positive".into()));
    }
    let (mut g, vars, root) = evaluate(&f, inputs, None)?;
    g.backward(root)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Array::zeros(x.shape())))
        .collect();
    let record = g.take_stop_gradient_record();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let elems: Vec<usize> = match opts.max_elements {
            Some(k) if k < x.len() => sample(&mut rng, x.len(), k).into_vec(),
            _ => (0..x.len()).collect(),
        };
        for k in elems {
            let orig = x.data()[k];
            work[i].data_mut()[k] = orig + opts.eps;
            let (gp, _, rp) = evaluate(&f, &work, Some(record.clone()))?;
            let fp = gp.value(rp).item();
            work[i].data_mut()[k] = orig - opts.eps;
            let (gm, _, rm) = evaluate(&f, &work, Some(record.clone()))?;
            let fm = gm.value(rm).item();
            work[i].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[i].data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
