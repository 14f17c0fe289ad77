//! Principal component projection.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::SvcError;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `[n × dims]` coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Share of total variance carried by each kept component.
    pub explained_variance_ratio: Vec<f64>,
    /// Covariance eigenvalues of the kept components, largest first.
    pub variances: Vec<f64>,
    /// Unit principal axes, one per kept component, each `d` long.
    pub components: Vec<Vec<f64>>,
}

/// Eigenpairs of the sample covariance, sorted by decreasing eigenvalue,
/// each axis signed so its largest-magnitude entry is positive.
pub fn principal_axes(x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let mut m = DMatrix::<f64>::from_fn(n, d, |i, j| x[i][j]);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = m.transpose() * &m / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let axes = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let mut big = 0;
            for (k, a) in v.iter().enumerate() {
                if a.abs() > v[big].abs() {
                    big = k;
                }
            }
            if v[big] < 0.0 {
                v.iter_mut().for_each(|a| *a = -*a);
            }
            v
        })
        .collect();
    (values, axes)
}

/// Mean-centres `x` and projects it on its top `dims` principal axes.
pub fn project_pca(x: &[Vec<f64>], dims: usize) -> Result<Projection, SvcError> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(SvcError::BadRequest("rows differ in length".into()));
    }
    if dims == 0 || dims > d {
        return Err(SvcError::BadRequest(format!("dims must lie in 1..={d}, got {dims}")));
    }
    if n <= dims {
        return Err(SvcError::BadRequest(format!("need more than {dims} points, got {n}")));
    }
    let (values, axes) = principal_axes(x);
    let total: f64 = values.iter().sum();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let components: Vec<Vec<f64>> = axes.into_iter().take(dims).collect();
    let coords = x
        .iter()
        .map(|r| {
            components
                .iter()
                .map(|c| c.iter().zip(r).zip(&mean).map(|((a, v), m)| a * (v - m)).sum())
                .collect()
        })
        .collect();
    let variances: Vec<f64> = values[..dims].to_vec();
    Ok(Projection {
        coords,
        explained_variance_ratio: variances
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect(),
        variances,
        components,
    })
}
