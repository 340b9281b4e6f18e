use serde::{Deserialize, Serialize};

use crate::model::StudentModel;

use super::AnalysisError;

pub const POWER_ITERATIONS: usize = 200;
pub const POWER_TOLERANCE: f64 = 1e-10;

/// Top-2 principal directions of a reference activation cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub layer: usize,
    pub mean: Vec<f64>,
    /// Two orthonormal rows of length `d_model`.
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    pub total_variance: f64,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn explained_ratio(&self) -> [f64; 2] {
        if self.total_variance == 0.0 {
            return [0.0, 0.0];
        }
        self.explained_variance.map(|v| v / self.total_variance)
    }

    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        self.components.each_ref().map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
    }
}

/// Where centroid distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftSpace {
    #[default]
    Projected,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub layer: usize,
    pub shift: f64,
    pub centroid_before: Vec<f64>,
    pub centroid_after: Vec<f64>,
}

/// Residual-stream activation at the last token of each probe, after `layer`.
pub fn final_token_activations(model: &StudentModel, probe: &[Vec<usize>], layer: usize) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let n_layers = model.config().n_layers;
    if layer >= n_layers {
        return Err(AnalysisError::Layer { layer, n_layers });
    }
    probe
        .iter()
        .map(|ids| {
            let tr = model.forward(ids, true)?;
            let states = tr.all_layer_states.expect("requested all layers");
            Ok(states[layer].row(ids.len() - 1).to_vec())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn remove_along(v: &mut [f64], dirs: &[Vec<f64>]) {
    for d in dirs {
        let c = dot(v, d);
        v.iter_mut().zip(d).for_each(|(x, y)| *x -= c * y);
    }
}

fn mat_vec(c: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| dot(&c[i * d..(i + 1) * d], v)).collect()
}

/// Fallback direction orthogonal to `dirs` when the deflated matrix is null.
fn orthogonal_unit(d: usize, dirs: &[Vec<f64>]) -> Vec<f64> {
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        remove_along(&mut e, dirs);
        if normalize(&mut e) > 1e-6 {
            return e;
        }
    }
    vec![0.0; d]
}

/// Leading eigenpairs of a symmetric PSD matrix by power iteration with deflation.
pub fn top_eigenpairs(cov: &[f64], d: usize, count: usize) -> Vec<(f64, Vec<f64>)> {
    let mut c = cov.to_vec();
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sin()).collect();
        remove_along(&mut v, &found);
        normalize(&mut v);
        for _ in 0..POWER_ITERATIONS {
            let mut next = mat_vec(&c, &v);
            remove_along(&mut next, &found);
            if normalize(&mut next) == 0.0 {
                break;
            }
            let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if change < POWER_TOLERANCE {
                break;
            }
        }
        remove_along(&mut v, &found);
        if normalize(&mut v) < 1e-12 {
            v = orthogonal_unit(d, &found);
        }
        let lambda = dot(&v, &mat_vec(&c, &v)).max(0.0);
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        found.push(v.clone());
        out.push((lambda, v));
    }
    out
}

/// PCA basis from raw activation rows.
pub fn pca_from_activations(acts: &[Vec<f64>], layer: usize) -> Result<PcaBasis, AnalysisError> {
    if acts.len() < 3 {
        return Err(AnalysisError::TooFewProbes(acts.len()));
    }
    let d = acts[0].len();
    let n = acts.len() as f64;
    let mut mean = vec![0.0; d];
    for a in acts {
        mean.iter_mut().zip(a).for_each(|(m, x)| *m += x / n);
    }
    let mut cov = vec![0.0; d * d];
    for a in acts {
        let c: Vec<f64> = a.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n;
            }
        }
    }
    let total_variance = (0..d).map(|i| cov[i * d + i]).sum();
    let pairs = top_eigenpairs(&cov, d, 2);
    Ok(PcaBasis {
        layer,
        mean,
        components: [pairs[0].1.clone(), pairs[1].1.clone()],
        explained_variance: [pairs[0].0, pairs[1].0],
        total_variance,
    })
}

pub fn pca_basis(model: &StudentModel, probe: &[Vec<usize>], layer: usize) -> Result<PcaBasis, AnalysisError> {
    if probe.len() < 3 {
        return Err(AnalysisError::TooFewProbes(probe.len()));
    }
    pca_from_activations(&final_token_activations(model, probe, layer)?, layer)
}

fn centroid(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0.0;
    for r in rows {
        sum.iter_mut().zip(&r).for_each(|(s, x)| *s += x);
        n += 1.0;
    }
    sum.iter().map(|s| s / n).collect()
}

/// Centroid distance between two activation clouds, in the basis's plane or
/// in the full space.
pub fn shift_from_activations(
    basis: &PcaBasis,
    before: &[Vec<f64>],
    after: &[Vec<f64>],
    space: ShiftSpace,
) -> Result<ShiftReport, AnalysisError> {
    if before.is_empty() || after.is_empty() {
        return Err(AnalysisError::TooFewProbes(0));
    }
    let (cb, ca) = match space {
        ShiftSpace::Projected => (
            centroid(before.iter().map(|a| basis.project(a).to_vec()), 2),
            centroid(after.iter().map(|a| basis.project(a).to_vec()), 2),
        ),
        ShiftSpace::Full => (centroid(before.iter().cloned(), basis.dim()), centroid(after.iter().cloned(), basis.dim())),
    };
    let shift = cb.iter().zip(&ca).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(ShiftReport { layer: basis.layer, shift, centroid_before: cb, centroid_after: ca })
}

fn check_pair(basis: &PcaBasis, before: &StudentModel, after: &StudentModel) -> Result<(), AnalysisError> {
    let (b, a) = (before.config(), after.config());
    for (name, x, y) in [("d_model", b.d_model, a.d_model), ("n_layers", b.n_layers, a.n_layers)] {
        if x != y {
            return Err(AnalysisError::ConfigMismatch(format!("{name}: before {x}, after {y}")));
        }
    }
    if basis.dim() != b.d_model {
        return Err(AnalysisError::ConfigMismatch(format!("basis dimension {} vs d_model {}", basis.dim(), b.d_model)));
    }
    Ok(())
}

pub fn pca_shift(
    basis: &PcaBasis,
    before: &StudentModel,
    after: &StudentModel,
    probe: &[Vec<usize>],
    space: ShiftSpace,
) -> Result<ShiftReport, AnalysisError> {
    check_pair(basis, before, after)?;
    let b = final_token_activations(before, probe, basis.layer)?;
    let a = final_token_activations(after, probe, basis.layer)?;
    shift_from_activations(basis, &b, &a, space)
}

/// One shift report per layer, each against a basis built from `before`.
pub fn pca_shift_sweep(
    before: &StudentModel,
    after: &StudentModel,
    probe: &[Vec<usize>],
    space: ShiftSpace,
) -> Result<Vec<ShiftReport>, AnalysisError> {
    (0..before.config().n_layers)
        .map(|layer| {
            let basis = pca_basis(before, probe, layer)?;
            pca_shift(&basis, before, after, probe, space)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn orthonormal(b: &PcaBasis) -> bool {
        let [c0, c1] = &b.components;
        (dot(c0, c0) - 1.0).abs() < 1e-9 && (dot(c1, c1) - 1.0).abs() < 1e-9 && dot(c0, c1).abs() < 1e-9
    }

    #[test]
    fn line_cloud_is_rank_one() {
        let dir = [0.6, -0.8, 0.0];
        let acts: Vec<Vec<f64>> = (0..10).map(|i| dir.iter().map(|d| d * i as f64 + 1.0).collect()).collect();
        let b = pca_from_activations(&acts, 0).unwrap();
        assert!(b.explained_ratio()[0] > 0.999);
        assert!(orthonormal(&b));
        assert!((dot(&b.components[0], &dir).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_cloud_recovers_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 1.0).unwrap();
        let theta: f64 = 0.3;
        let (u, w) = ([theta.cos(), theta.sin(), 0.0], [-theta.sin(), theta.cos(), 0.0]);
        let acts: Vec<Vec<f64>> = (0..4000)
            .map(|_| {
                let (a, b, c) = (3.0 * n.sample(&mut rng), 1.0 * n.sample(&mut rng), 0.2 * n.sample(&mut rng));
                (0..3).map(|i| a * u[i] + b * w[i] + if i == 2 { c } else { 0.0 }).collect()
            })
            .collect();
        let basis = pca_from_activations(&acts, 0).unwrap();
        assert!(dot(&basis.components[0], &u).abs() > 0.999);
        assert!(dot(&basis.components[1], &w).abs() > 0.999);
        assert!(orthonormal(&basis));
    }

    #[test]
    fn three_by_three_eigenvalues() {
        // Symmetric matrix with eigenvalues 4, 2, 1 (computed by hand).
        let cov = [3.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0];
        let pairs = top_eigenpairs(&cov, 3, 3);
        let eig: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        for (got, want) in eig.iter().zip([4.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-8, "{eig:?}");
        }
    }

    #[test]
    fn offset_shift_is_projected_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 1.0).unwrap();
        let before: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| n.sample(&mut rng)).collect()).collect();
        let basis = pca_from_activations(&before, 1).unwrap();
        let offset = [0.3, -1.2, 0.5, 2.0];
        let after: Vec<Vec<f64>> = before.iter().map(|r| r.iter().zip(&offset).map(|(x, o)| x + o).collect()).collect();
        let report = shift_from_activations(&basis, &before, &after, ShiftSpace::Projected).unwrap();
        let proj: f64 = basis.components.iter().map(|c| dot(c, &offset).powi(2)).sum::<f64>().sqrt();
        assert!((report.shift - proj).abs() < 1e-9);
        assert!(report.centroid_before.iter().all(|c| c.abs() < 1e-9));
        let full = shift_from_activations(&basis, &before, &after, ShiftSpace::Full).unwrap();
        assert!((full.shift - dot(&offset, &offset).sqrt()).abs() < 1e-9);
        let mut flipped = basis.clone();
        flipped.components[1].iter_mut().for_each(|x| *x = -*x);
        let again = shift_from_activations(&flipped, &before, &after, ShiftSpace::Projected).unwrap();
        assert!((again.shift - report.shift).abs() < 1e-12);
    }

    #[test]
    fn too_few_probes_rejected() {
        assert!(matches!(pca_from_activations(&[vec![1.0], vec![2.0]], 0), Err(AnalysisError::TooFewProbes(2))));
    }
}
