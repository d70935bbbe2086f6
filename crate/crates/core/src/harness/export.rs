//! Latent export for inspection.

use std::fmt::Write as _;

use crate::atmosphere::{NormStats, Storm};
use crate::cvqvae::{Cvqvae, Stage1Options};
use crate::error::{Error, Result};
use crate::numerics::{Array, Graph, Mode};

/// CSV of encoder outputs and their codebook assignments, one row per
/// timestep: `storm_id,step,index,z0..,msw,mslp`. The intensity label lets
/// external tools colour an embedding by class.
pub fn export_latents(vae: &Cvqvae, norm: &NormStats, storms: &[Storm]) -> Result<String> {
    let d = vae.config.latent_dim;
    let mut s = String::from("storm_id,step,index");
    for k in 0..d {
        write!(s, ",z{k}").unwrap();
    }
    s.push_str(",msw,mslp");
    s.push('\n');
    for storm in storms {
        for (start, recs) in storm.records.chunks(32).enumerate().map(|(i, r)| (32 * i, r)) {
            let cubes = storm.cubes[start..start + recs.len()]
                .iter()
                .map(|c| norm.normalize_cube(c).map_err(Error::Data))
                .collect::<Result<Vec<_>>>()?;
            let i: Vec<f64> = recs.iter().flat_map(|r| norm.normalize_intensity(r.msw, r.mslp)).collect();
            let mut shape = vec![recs.len()];
            shape.extend_from_slice(cubes[0].shape());
            let c: Vec<f64> = cubes.iter().flat_map(|a| a.data().iter().copied()).collect();
            let mut g = Graph::new(Mode::Eval, 0);
            let b = vae.params.bind(&mut g, |_| false)?;
            let iv = g.constant(Array::new(vec![recs.len(), 2], i)?)?;
            let cv = g.constant(Array::new(shape, c)?)?;
            let out = vae.stage1_forward(&b, &mut g, iv, cv, Stage1Options::default(), None)?;
            let h = g.value(out.h);
            let codes = vae.quantize_rows(h)?;
            for (k, code) in codes.iter().enumerate() {
                write!(s, "{},{},{}", storm.id, start + k, code.index).unwrap();
                for v in h.row(k) {
                    write!(s, ",{v}").unwrap();
                }
                write!(s, ",{},{}", recs[k].msw, recs[k].mslp).unwrap();
                s.push('\n');
            }
        }
    }
    Ok(s)
}
