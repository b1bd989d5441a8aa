use ndarray::Array2;

use crate::error::{Error, Result};

/// Anything exposing its learnable values as a fixed, ordered list of
/// matrices.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&Array2<f64>>;
    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Parameterized for Vec<Array2<f64>> {
    fn tensors(&self) -> Vec<&Array2<f64>> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.iter_mut().collect()
    }
}

/// Compares `analytic` gradients against central finite differences of
/// `loss` and returns the largest `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
///
/// Each value of `params` is perturbed in place and restored afterwards.
pub fn grad_check<P, F>(
    params: &mut P,
    analytic: &[Array2<f64>],
    epsilon: f64,
    mut loss: F,
) -> Result<f64>
where
    P: Parameterized,
    F: FnMut(&P) -> Result<f64>,
{
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "epsilon must lie in [1e-6, 1e-4], got {epsilon}"
        )));
    }
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.dim()).collect();
    if shapes.len() != analytic.len()
        || shapes.iter().zip(analytic).any(|(s, a)| *s != a.dim())
    {
        return Err(Error::invalid(
            "analytic gradients do not match parameter shapes",
        ));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at unperturbed parameters".into()));
    }
    let mut worst: f64 = 0.0;
    for (t, shape) in shapes.iter().enumerate() {
        for idx in 0..shape.0 * shape.1 {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let original = params.tensors()[t][[r, c]];
            params.tensors_mut()[t][[r, c]] = original + epsilon;
            let plus = loss(params)?;
            params.tensors_mut()[t][[r, c]] = original - epsilon;
            let minus = loss(params)?;
            params.tensors_mut()[t][[r, c]] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while perturbing tensor {t} entry ({r}, {c})"
                )));
            }
            let fd = (plus - minus) / (2.0 * epsilon);
            let ad = analytic[t][[r, c]];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
