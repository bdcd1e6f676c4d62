//! Ground metrics: pairwise cost matrices under Euclidean and Mahalanobis
//! distances, and projection of the learnable interaction matrix onto the
//! PSD cone.

use crate::tape::{NodeId, Tape};
use crate::tensor::DenseTensor;
use crate::{Error, Result};

/// Quadratic forms above this (negative) floor are clamped to zero before the
/// square root; anything below signals a non-PSD interaction matrix.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// Pointwise cost between embedding rows.
#[derive(Clone, Debug)]
pub enum GroundMetric {
    Euclidean,
    SquaredEuclidean,
    /// Mahalanobis distance with a symmetric PSD interaction matrix.
    Mahalanobis(DenseTensor),
}

impl GroundMetric {
    /// Mahalanobis metric with validation of the interaction matrix.
    pub fn mahalanobis(m: DenseTensor) -> Result<Self> {
        if m.shape().len() != 2 || m.rows() != m.cols() {
            return Err(Error::ShapeMismatch {
                op: "mahalanobis",
                detail: format!("interaction matrix must be square, got {:?}", m.shape()),
            });
        }
        let d = m.rows();
        for i in 0..d {
            for j in (i + 1)..d {
                if (m.at(i, j) - m.at(j, i)).abs() > 1e-9 {
                    return Err(Error::Domain {
                        op: "mahalanobis",
                        detail: format!("interaction matrix not symmetric at ({i},{j})"),
                    });
                }
            }
        }
        let (eigs, _) = symmetric_eigen(&m)?;
        let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < PSD_TOLERANCE {
            return Err(Error::NotPsd { value: min_eig });
        }
        Ok(GroundMetric::Mahalanobis(m))
    }

    /// Embedding dimension the metric expects, if it constrains one.
    pub fn dimension(&self) -> Option<usize> {
        match self {
            GroundMetric::Mahalanobis(m) => Some(m.rows()),
            _ => None,
        }
    }
}

/// Nonnegative pairwise cost matrix.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    values: DenseTensor,
}

impl CostMatrix {
    pub fn new(values: DenseTensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cost_matrix",
                detail: format!("rank-2 required, got {:?}", values.shape()),
            });
        }
        if values.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain {
                op: "cost_matrix",
                detail: "entries must be nonnegative and finite".into(),
            });
        }
        Ok(CostMatrix { values })
    }

    pub fn values(&self) -> &DenseTensor {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.values.rows(), self.values.cols())
    }
}

/// Mahalanobis distance sqrt((x-y)^T M (x-y)) between two vectors.
///
/// The quadratic form is clamped at zero before the root; values below
/// [`PSD_TOLERANCE`] are rejected as evidence of a non-PSD matrix.
pub fn mahalanobis_distance(x: &[f64], y: &[f64], m: &DenseTensor) -> Result<f64> {
    let d = x.len();
    if y.len() != d || m.rows() != d || m.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "mahalanobis_distance",
            detail: format!("x: {}, y: {}, M: {:?}", x.len(), y.len(), m.shape()),
        });
    }
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += diff[i] * m.at(i, j) * diff[j];
        }
    }
    if quad < PSD_TOLERANCE {
        return Err(Error::NotPsd { value: quad });
    }
    Ok(quad.max(0.0).sqrt())
}

/// Pairwise cost matrix between the rows of `a` (n x d) and `b` (m x d).
pub fn pairwise_cost(a: &DenseTensor, b: &DenseTensor, metric: &GroundMetric) -> Result<CostMatrix> {
    let (n, d) = (a.rows(), a.cols());
    let (m, d2) = (b.rows(), b.cols());
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "pairwise_cost",
            detail: format!("embedding dims differ: {d} vs {d2}"),
        });
    }
    if let Some(md) = metric.dimension() {
        if md != d {
            return Err(Error::ShapeMismatch {
                op: "pairwise_cost",
                detail: format!("metric dimension {md} vs embeddings {d}"),
            });
        }
    }
    let mut out = DenseTensor::zeros(&[n, m]);
    for i in 0..n {
        let xi = &a.data()[i * d..(i + 1) * d];
        for j in 0..m {
            let yj = &b.data()[j * d..(j + 1) * d];
            let c = match metric {
                GroundMetric::Euclidean => {
                    let q: f64 = xi.iter().zip(yj).map(|(x, y)| (x - y) * (x - y)).sum();
                    q.sqrt()
                }
                GroundMetric::SquaredEuclidean => {
                    xi.iter().zip(yj).map(|(x, y)| (x - y) * (x - y)).sum()
                }
                GroundMetric::Mahalanobis(mat) => mahalanobis_distance(xi, yj, mat)?,
            };
            out.set_at(i, j, c);
        }
    }
    CostMatrix::new(out)
}

/// Metric selector for tape-recorded cost construction.
pub enum TapedMetric {
    Euclidean,
    SquaredEuclidean,
    /// Interaction matrix as a tape node (parameter or constant).
    Mahalanobis(NodeId),
}

/// Build the pairwise cost matrix on a tape, differentiable w.r.t. both
/// embedding blocks and (for Mahalanobis) the interaction matrix node.
pub fn pairwise_cost_on_tape(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    metric: &TapedMetric,
) -> Result<NodeId> {
    let (n, d) = (tape.value(a).rows(), tape.value(a).cols());
    let (m, d2) = (tape.value(b).rows(), tape.value(b).cols());
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "pairwise_cost",
            detail: format!("embedding dims differ: {d} vs {d2}"),
        });
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let xi = tape.row(a, i)?;
        let mut entries = Vec::with_capacity(m);
        for j in 0..m {
            let yj = tape.row(b, j)?;
            let diff = tape.sub(xi, yj)?;
            let quad = match metric {
                TapedMetric::Euclidean | TapedMetric::SquaredEuclidean => {
                    let sq = tape.mul(diff, diff)?;
                    tape.sum(sq)?
                }
                TapedMetric::Mahalanobis(mat) => {
                    let dm = tape.matmul(diff, *mat)?;
                    let dt = tape.transpose(diff)?;
                    tape.matmul(dm, dt)?
                }
            };
            let qv = tape.scalar_value(quad);
            if qv < PSD_TOLERANCE {
                return Err(Error::NotPsd { value: qv });
            }
            let entry = match metric {
                TapedMetric::SquaredEuclidean => quad,
                _ => {
                    let clamped = tape.clamp_min(quad, 0.0)?;
                    tape.sqrt(clamped)?
                }
            };
            entries.push(entry);
        }
        rows.push(tape.concat(&entries, 1)?);
    }
    tape.concat(&rows, 0)
}

// ── Symmetric eigendecomposition (cyclic Jacobi) ─────────────────────

/// Eigenvalues and eigenvectors of a symmetric matrix via cyclic Jacobi
/// rotations. Returns (eigenvalues, V) with A = V diag(eigs) V^T; eigenvector
/// k is column k of V. The input is symmetrized first.
pub fn symmetric_eigen(a: &DenseTensor) -> Result<(Vec<f64>, DenseTensor)> {
    let d = a.rows();
    assert_eq!(a.cols(), d, "symmetric_eigen needs a square matrix");

    // Work on (A + A^T) / 2.
    let mut w = DenseTensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            w.set_at(i, j, 0.5 * (a.at(i, j) + a.at(j, i)));
        }
    }
    let mut v = DenseTensor::eye(d, 1.0);
    let scale: f64 = w.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);

    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += w.at(i, j) * w.at(i, j);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            let eigs = (0..d).map(|i| w.at(i, i)).collect();
            return Ok((eigs, v));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = w.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (w.at(q, q) - w.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let wkp = w.at(k, p);
                    let wkq = w.at(k, q);
                    w.set_at(k, p, c * wkp - s * wkq);
                    w.set_at(k, q, s * wkp + c * wkq);
                }
                for k in 0..d {
                    let wpk = w.at(p, k);
                    let wqk = w.at(q, k);
                    w.set_at(p, k, c * wpk - s * wqk);
                    w.set_at(q, k, s * wpk + c * wqk);
                }
                for k in 0..d {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set_at(k, p, c * vkp - s * vkq);
                    v.set_at(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(Error::EigenFailed { sweeps: MAX_SWEEPS })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DenseTensor) -> Result<f64> {
    let (eigs, _) = symmetric_eigen(a)?;
    Ok(eigs.into_iter().fold(f64::INFINITY, f64::min))
}

/// Project a square matrix onto the PSD cone: symmetrize, clamp negative
/// eigenvalues to zero, reconstruct. Idempotent on PSD inputs.
pub fn project_psd(m: &DenseTensor) -> Result<DenseTensor> {
    let d = m.rows();
    if m.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "project_psd",
            detail: format!("square matrix required, got {:?}", m.shape()),
        });
    }
    let (eigs, v) = symmetric_eigen(m)?;
    let clamped: Vec<f64> = eigs.iter().map(|&e| e.max(0.0)).collect();
    // V diag(clamped) V^T, symmetrized against rounding.
    let mut out = DenseTensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in 0..d {
                acc += v.at(i, k) * clamped[k] * v.at(j, k);
            }
            out.set_at(i, j, acc);
            out.set_at(j, i, acc);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_zero_for_identical_points() {
        let a = DenseTensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let c = pairwise_cost(&a, &a, &GroundMetric::Euclidean).unwrap();
        assert_eq!(c.values().at(0, 0), 0.0);
    }

    #[test]
    fn mahalanobis_identity_reduces_to_euclidean() {
        let a = DenseTensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = DenseTensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let m = GroundMetric::mahalanobis(DenseTensor::eye(2, 1.0)).unwrap();
        let c = pairwise_cost(&a, &b, &m).unwrap();
        assert!((c.values().at(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mahalanobis_diagonal_scaling() {
        // M = diag(4, 1), x - y = (1, 0): sqrt(1 * 4) = 2.
        let m = DenseTensor::from_vec(vec![2, 2], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        let d = mahalanobis_distance(&[1.0, 0.0], &[0.0, 0.0], &m).unwrap();
        assert!((d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mahalanobis_hand_evaluated_quadratic_form() {
        // M = [[2,1],[1,2]], diff = (1,1): quad = 6, distance = sqrt(6).
        let m = DenseTensor::from_vec(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let d = mahalanobis_distance(&[1.0, 1.0], &[0.0, 0.0], &m).unwrap();
        assert!((d - 6.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pythagorean_distance_with_identity() {
        let m = DenseTensor::eye(2, 1.0);
        let d = mahalanobis_distance(&[3.0, 4.0], &[0.0, 0.0], &m).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn non_psd_matrix_is_rejected() {
        let m = DenseTensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let r = mahalanobis_distance(&[0.0, 1.0], &[0.0, 0.0], &m);
        assert!(matches!(r, Err(Error::NotPsd { .. })));
    }

    #[test]
    fn project_psd_identity_unchanged() {
        let p = project_psd(&DenseTensor::eye(3, 1.0)).unwrap();
        assert!(p.max_abs_diff(&DenseTensor::eye(3, 1.0)) < 1e-12);
    }

    #[test]
    fn project_psd_clamps_negative_eigenvalue() {
        let m = DenseTensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let p = project_psd(&m).unwrap();
        let want = DenseTensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(p.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn project_psd_symmetrizes_first() {
        // [[0,2],[0,0]] symmetrizes to [[0,1],[1,0]] (eigs ±1), clamping the
        // negative eigenvalue leaves [[0.5,0.5],[0.5,0.5]].
        let m = DenseTensor::from_vec(vec![2, 2], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        let p = project_psd(&m).unwrap();
        let want = DenseTensor::from_vec(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(p.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn eigen_recovers_known_spectrum() {
        let m = DenseTensor::from_vec(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (mut eigs, _) = symmetric_eigen(&m).unwrap();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eigs[0] - 1.0).abs() < 1e-12);
        assert!((eigs[1] - 3.0).abs() < 1e-12);
    }
}
