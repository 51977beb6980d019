use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, NodeId};
use super::tensor::{ParamId, ParamStore, TensorError};

/// Gradient magnitude below which errors are measured in absolute terms.
/// Central differences at f64 carry roundoff near `1e-16 * |loss| / eps`.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled without replacement; every coordinate when there are fewer.
    pub coords: usize,
    pub seed: u64,
    /// Graph mode for every evaluation. Train mode replays the same dropout masks.
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords: 100,
            seed: 0,
            mode: Mode::Eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients of `loss` against central differences.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn grad_check<F>(params: &ParamStore, opts: &GradCheckOptions, loss: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph) -> Result<NodeId, TensorError>,
{
    let eval = |p: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new(p, opts.mode);
        let out = loss(&mut g)?;
        let v = g.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "grad_check" })
        }
    };

    let analytic = {
        let mut g = Graph::new(params, opts.mode);
        let out = loss(&mut g)?;
        if !g.scalar(out).is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        g.backward(out)?
    };

    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= opts.coords {
        (0..coords.len()).collect()
    } else {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(opts.seed), coords.len(), opts.coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut work = params.clone();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    for &c in &chosen {
        let (id, i) = coords[c];
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + opts.eps;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - opts.eps;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic.get(id).data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        if rel > max_rel_err || worst.is_none() {
            max_rel_err = f64::max(max_rel_err, rel);
            worst = Some((params.name(id).to_owned(), i));
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked: chosen.len(),
        worst,
    })
}
