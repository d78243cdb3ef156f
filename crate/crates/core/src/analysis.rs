//! Geometry and density diagnostics: task-vector angles, the merged-loss
//! interference estimate, weight-concentration metrics, and an exact
//! quadratic-loss oracle for sanity-checking the interference trend.

use crate::error::{Error, Result};
use crate::params::TaskVector;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Angle between two flattened task vectors, in radians, with the cosine
/// clamped to [-1, 1] before the arccos. Zero vectors have no direction.
pub fn angle(tau_a: &TaskVector, tau_b: &TaskVector) -> Result<(f64, f64)> {
    tau_a.delta.check_aligned(&tau_b.delta)?;
    let na = tau_a.delta.norm2();
    let nb = tau_b.delta.norm2();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = (tau_a.delta.dot(&tau_b.delta)? / (na * nb)).clamp(-1.0, 1.0);
    Ok((cos.acos(), cos))
}

/// Interference estimate for a merged model:
/// `lambda1 * lambda2 * ||tau_a|| * ||tau_b|| * (1 - cos phi)`.
pub fn interference(
    lambda1: f64,
    lambda2: f64,
    tau_a: &TaskVector,
    tau_b: &TaskVector,
) -> Result<f64> {
    let (_, cos) = angle(tau_a, tau_b)?;
    Ok(lambda1 * lambda2 * tau_a.delta.norm2() * tau_b.delta.norm2() * (1.0 - cos))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub angle_phi: f64,
    pub cos_phi: f64,
    pub norms: (f64, f64),
    pub interference: f64,
    pub lambda_pair: (f64, f64),
}

pub fn geometry_report(
    lambda1: f64,
    lambda2: f64,
    tau_a: &TaskVector,
    tau_b: &TaskVector,
) -> Result<GeometryReport> {
    let (phi, cos) = angle(tau_a, tau_b)?;
    Ok(GeometryReport {
        angle_phi: phi,
        cos_phi: cos,
        norms: (tau_a.delta.norm2(), tau_b.delta.norm2()),
        interference: lambda1 * lambda2 * tau_a.delta.norm2() * tau_b.delta.norm2() * (1.0 - cos),
        lambda_pair: (lambda1, lambda2),
    })
}

/// Concentration metrics over the absolute entries of a task vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    /// Width of the concentration window (fraction of entries counted as
    /// "top"); the default is 1%.
    pub top_frac: f64,
    /// Share of total absolute mass held by the top window.
    pub top_frac_mass: f64,
    /// Gini coefficient over absolute entries, 0 = perfectly even.
    pub gini: f64,
    pub nonzero_frac: f64,
}

pub fn density(tau: &TaskVector) -> Result<DensityReport> {
    density_with_frac(tau, 0.01)
}

pub fn density_with_frac(tau: &TaskVector, top_frac: f64) -> Result<DensityReport> {
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::InvalidConfig("top_frac must be in (0, 1]".into()));
    }
    let mut mags: Vec<f64> = tau.delta.flatten().iter().map(|v| v.abs()).collect();
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        return Err(Error::ZeroVector);
    }
    let n = mags.len();
    mags.sort_by(|a, b| a.total_cmp(b));

    let window = ((top_frac * n as f64).ceil() as usize).clamp(1, n);
    let top_mass: f64 = mags[n - window..].iter().sum();

    // Gini over the ascending-sorted magnitudes.
    let mut weighted = 0.0;
    for (i, v) in mags.iter().enumerate() {
        weighted += (2.0 * (i as f64 + 1.0) - n as f64 - 1.0) * v;
    }
    let gini = weighted / (n as f64 * total);
    let nonzero = mags.iter().filter(|v| **v > 0.0).count();

    Ok(DensityReport {
        top_frac,
        top_frac_mass: top_mass / total,
        gini,
        nonzero_frac: nonzero as f64 / n as f64,
    })
}

/// One point of a rotation sweep: the exact merged quadratic loss next to
/// the closed-form interference estimate at misalignment angle `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub phi: f64,
    pub exact_loss: f64,
    pub estimate: f64,
}

/// Two quadratic task losses `L_i(theta) = 0.5 (theta - theta_i*)^T H_i
/// (theta - theta_i*)` with the shared base at the origin. Small and
/// exact, so claims about merged-loss growth can be checked against a
/// ground truth instead of a trained model.
pub struct QuadraticOracle {
    h_a: DMatrix<f64>,
    h_b: DMatrix<f64>,
    theta_a: DVector<f64>,
    theta_b: DVector<f64>,
}

impl QuadraticOracle {
    pub fn new(
        h_a: DMatrix<f64>,
        h_b: DMatrix<f64>,
        theta_a: Vec<f64>,
        theta_b: Vec<f64>,
    ) -> Result<Self> {
        let dim = theta_a.len();
        if dim == 0 || dim > 20 {
            return Err(Error::InvalidConfig("oracle dimension must be in 1..=20".into()));
        }
        if theta_b.len() != dim
            || h_a.nrows() != dim
            || h_a.ncols() != dim
            || h_b.nrows() != dim
            || h_b.ncols() != dim
        {
            return Err(Error::InvalidConfig("oracle dimensions disagree".into()));
        }
        for h in [&h_a, &h_b] {
            let sym_err = (h - h.transpose()).abs().max();
            if sym_err > 1e-9 {
                return Err(Error::NotSpd);
            }
            if h.clone().cholesky().is_none() {
                return Err(Error::NotSpd);
            }
        }
        Ok(Self {
            h_a,
            h_b,
            theta_a: DVector::from_vec(theta_a),
            theta_b: DVector::from_vec(theta_b),
        })
    }

    fn loss(h: &DMatrix<f64>, target: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let diff = theta - target;
        0.5 * (h * &diff).dot(&diff)
    }

    /// Exact `L_a + L_b` at the merged point
    /// `theta = lambda1 theta_a* + lambda2 theta_b*`.
    pub fn merged_loss(&self, lambda1: f64, lambda2: f64) -> f64 {
        let merged = &self.theta_a * lambda1 + &self.theta_b * lambda2;
        Self::loss(&self.h_a, &self.theta_a, &merged) + Self::loss(&self.h_b, &self.theta_b, &merged)
    }

    /// Sweeps the misalignment angle: task a's optimum is re-posed at
    /// angle `phi` from task b's optimum (same norm, in a fixed plane
    /// through theta_b*), and the exact merged loss is reported next to
    /// the interference estimate.
    pub fn rotation_sweep(
        &self,
        lambda1: f64,
        lambda2: f64,
        angles: &[f64],
    ) -> Result<Vec<SweepPoint>> {
        let nb = self.theta_b.norm();
        let na = self.theta_a.norm();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector);
        }
        let e1 = &self.theta_b / nb;
        // Orthonormal partner for the rotation plane: prefer the component
        // of theta_a* orthogonal to theta_b*, fall back to a basis vector.
        let mut e2 = &self.theta_a - &e1 * self.theta_a.dot(&e1);
        if e2.norm() < 1e-12 {
            let dim = self.theta_a.len();
            for i in 0..dim {
                let mut candidate = DVector::zeros(dim);
                candidate[i] = 1.0;
                e2 = &candidate - &e1 * candidate.dot(&e1);
                if e2.norm() > 1e-9 {
                    break;
                }
            }
        }
        if e2.norm() < 1e-12 {
            return Err(Error::InvalidConfig(
                "cannot build a rotation plane in dimension 1".into(),
            ));
        }
        e2 /= e2.norm();

        let mut points = Vec::with_capacity(angles.len());
        for &phi in angles {
            let rotated = (&e1 * phi.cos() + &e2 * phi.sin()) * na;
            let merged = &rotated * lambda1 + &self.theta_b * lambda2;
            let exact = Self::loss(&self.h_a, &rotated, &merged)
                + Self::loss(&self.h_b, &self.theta_b, &merged);
            let estimate = lambda1 * lambda2 * na * nb * (1.0 - phi.cos());
            points.push(SweepPoint { phi, exact_loss: exact, estimate });
        }
        Ok(points)
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "rank correlation needs paired samples");
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamSet, Tensor};

    fn tau(values: &[f64]) -> TaskVector {
        let delta = ParamSet::from_entries([(
            "w".to_string(),
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        )])
        .unwrap();
        TaskVector { delta, base_fingerprint: 0 }
    }

    #[test]
    fn angle_basics() {
        let a = tau(&[1.0, 0.0]);
        let (phi, cos) = angle(&a, &a).unwrap();
        assert!(phi.abs() < 1e-12 && (cos - 1.0).abs() < 1e-12);

        let neg = tau(&[-1.0, 0.0]);
        let (phi, _) = angle(&a, &neg).unwrap();
        assert!((phi - std::f64::consts::PI).abs() < 1e-12);

        let b = tau(&[0.0, 1.0]);
        let (phi, cos) = angle(&a, &b).unwrap();
        assert!((phi - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(cos.abs() < 1e-12);

        let zero = tau(&[0.0, 0.0]);
        assert!(matches!(angle(&a, &zero), Err(Error::ZeroVector)));
    }

    #[test]
    fn interference_cases() {
        let a = tau(&[2.0, 0.0]);
        let b = tau(&[4.0, 0.0]);
        assert!(interference(1.0, 1.0, &a, &b).unwrap().abs() < 1e-12);

        let unit_a = tau(&[1.0, 0.0]);
        let unit_b = tau(&[0.0, 1.0]);
        assert!((interference(1.0, 1.0, &unit_a, &unit_b).unwrap() - 1.0).abs() < 1e-12);

        // lambda = 0.3 each, norms 2 and 3, cos = 0.5 -> 0.27.
        let ta = tau(&[2.0, 0.0]);
        let tb = tau(&[1.5, 3.0f64.sqrt() * 1.5]);
        let val = interference(0.3, 0.3, &ta, &tb).unwrap();
        assert!((val - 0.27).abs() < 1e-12, "{val}");
    }

    #[test]
    fn interference_scales_with_norm() {
        let a = tau(&[0.3, -1.0, 0.4]);
        let b = tau(&[1.0, 0.2, -0.5]);
        let base = interference(0.5, 0.7, &a, &b).unwrap();
        let scaled_a = tau(&[0.6, -2.0, 0.8]);
        let scaled = interference(0.5, 0.7, &scaled_a, &b).unwrap();
        assert!((scaled - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn angle_is_symmetric() {
        let a = tau(&[0.1, 0.9, -0.3]);
        let b = tau(&[-0.7, 0.2, 0.5]);
        let (pa, ca) = angle(&a, &b).unwrap();
        let (pb, cb) = angle(&b, &a).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ca, cb);
    }

    #[test]
    fn density_one_hot_is_fully_concentrated() {
        let t = tau(&[0.0, 0.0, 5.0, 0.0]);
        let d = density(&t).unwrap();
        assert_eq!(d.top_frac_mass, 1.0);
        assert!((d.nonzero_frac - 0.25).abs() < 1e-12);
    }

    #[test]
    fn density_constant_vector_has_zero_gini() {
        let t = tau(&[2.0; 8]);
        let d = density(&t).unwrap();
        assert!(d.gini.abs() < 1e-12);
    }

    #[test]
    fn density_hand_case() {
        // Top 10% of 10 entries is one entry; 4 / 13 of the mass.
        let t = tau(&[4.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let d = density_with_frac(&t, 0.1).unwrap();
        assert!((d.top_frac_mass - 4.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn density_invariant_to_permutation_and_scale() {
        let t = tau(&[0.5, -2.0, 1.0, 0.0, 3.0]);
        let permuted = tau(&[3.0, 0.5, 0.0, -2.0, 1.0]);
        let scaled = tau(&[1.0, -4.0, 2.0, 0.0, 6.0]);
        let d0 = density(&t).unwrap();
        let d1 = density(&permuted).unwrap();
        let d2 = density(&scaled).unwrap();
        assert!((d0.top_frac_mass - d1.top_frac_mass).abs() < 1e-12);
        assert!((d0.gini - d1.gini).abs() < 1e-12);
        assert!((d0.top_frac_mass - d2.top_frac_mass).abs() < 1e-12);
        assert!((d0.gini - d2.gini).abs() < 1e-12);
    }

    #[test]
    fn density_zero_vector_is_error() {
        let t = tau(&[0.0, 0.0]);
        assert!(matches!(density(&t), Err(Error::ZeroVector)));
    }

    #[test]
    fn oracle_aligned_tasks_merge_losslessly() {
        let h = DMatrix::identity(3, 3);
        let star = vec![1.0, 2.0, -1.0];
        let oracle = QuadraticOracle::new(h.clone(), h, star.clone(), star).unwrap();
        // Half of each optimum lands exactly on the shared optimum.
        assert!(oracle.merged_loss(0.5, 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_orthogonal_closed_form() {
        let h = DMatrix::identity(2, 2);
        let oracle =
            QuadraticOracle::new(h.clone(), h, vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        // theta_m = (0.5, 0.5); each loss is 0.5 * (0.25 + 0.25) = 0.25.
        assert!((oracle.merged_loss(0.5, 0.5) - 0.5).abs() < 1e-12);
        assert!((oracle.merged_loss(1.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_non_spd() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let good = DMatrix::identity(2, 2);
        assert!(matches!(
            QuadraticOracle::new(bad, good.clone(), vec![1.0, 0.0], vec![0.0, 1.0]),
            Err(Error::NotSpd)
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            QuadraticOracle::new(asym, good, vec![1.0, 0.0], vec![0.0, 1.0]),
            Err(Error::NotSpd)
        ));
    }

    #[test]
    fn sweep_is_monotone_with_identity_hessians() {
        let h = DMatrix::identity(4, 4);
        let oracle = QuadraticOracle::new(
            h.clone(),
            h,
            vec![2.0, 0.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        use std::f64::consts::PI;
        let angles = [0.0, PI / 6.0, PI / 3.0, PI / 2.0];
        let points = oracle.rotation_sweep(0.5, 0.5, &angles).unwrap();
        for w in points.windows(2) {
            assert!(w[1].exact_loss > w[0].exact_loss);
            assert!(w[1].estimate > w[0].estimate);
        }
        let exact: Vec<f64> = points.iter().map(|p| p.exact_loss).collect();
        let est: Vec<f64> = points.iter().map(|p| p.estimate).collect();
        assert_eq!(spearman(&exact, &est), 1.0);
    }

    #[test]
    fn spearman_handles_ties_and_reversals() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!(r > 0.0 && r < 1.0);
    }
}
