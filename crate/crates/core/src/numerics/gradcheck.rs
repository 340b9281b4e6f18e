use super::{NumericsError, Tensor};

/// Central-difference gradient of `f` at `params`.
///
/// Coordinate `i` uses the step `h · max(1, |wᵢ|)` so that large weights are
/// perturbed proportionally.
pub fn finite_diff_gradient<F>(f: F, params: &Tensor, h: f64) -> Result<Tensor, NumericsError>
where
    F: Fn(&Tensor) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(NumericsError::BadStep(h));
    }
    let mut probe = params.clone();
    probe.zero_grad();
    let mut grad = vec![0.0; params.numel()];
    for i in 0..params.numel() {
        let w = params.data()[i];
        let step = h * w.abs().max(1.0);
        probe.data_mut()[i] = w + step;
        let plus = f(&probe);
        probe.data_mut()[i] = w - step;
        let minus = f(&probe);
        probe.data_mut()[i] = w;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite { coordinate: i });
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Tensor::new(params.shape().to_vec(), grad)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// amplifying rounding noise.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
