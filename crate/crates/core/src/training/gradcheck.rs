//! Central finite-difference checks of tape gradients.

use rand::Rng;
use serde::Serialize;

use crate::autograd::{Graph, NodeId};
use crate::encoder::ModelParams;
use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is zero from dividing rounding noise by itself.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of `build`'s scalar output with central differences
/// on up to `per_tensor` random coordinates of every listed tensor.
pub fn check_gradients<R, F>(
    params: &ModelParams,
    tensors: &[usize],
    per_tensor: usize,
    eps: f64,
    floor: f64,
    rng: &mut R,
    build: F,
) -> Result<GradCheckReport>
where
    R: Rng,
    F: Fn(&mut Graph<'_>, &ModelParams) -> Result<NodeId>,
{
    let mask = vec![true; params.len()];
    let mut g = Graph::new(&params.tensors, &mask);
    let out = build(&mut g, params)?;
    let grads = g.backward(out);
    let eval = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::inference(&p.tensors);
        let out = build(&mut g, p)?;
        Ok(g.scalar(out))
    };
    let mut checks = Vec::new();
    let mut probe = params.clone();
    for &t in tensors {
        let len = params.tensors[t].len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, per_tensor).into_vec()
        };
        for idx in picks {
            let analytic = grads
                .param(crate::autograd::ParamId(t))
                .map_or(0.0, |g| g.data()[idx]);
            let orig = params.tensors[t].data()[idx];
            probe.tensors[t].data_mut()[idx] = orig + eps;
            let plus = eval(&probe)?;
            probe.tensors[t].data_mut()[idx] = orig - eps;
            let minus = eval(&probe)?;
            probe.tensors[t].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            checks.push(CoordinateCheck {
                tensor: params.names[t].clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, floor),
            });
        }
    }
    Ok(GradCheckReport { checks })
}
