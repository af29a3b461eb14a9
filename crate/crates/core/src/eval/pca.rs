use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `components[k]` is the k-th unit loading vector.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues, descending.
    pub variances: Vec<f64>,
    /// `projections[t][k]`.
    pub projections: Vec<Vec<f64>>,
    /// Trace of the covariance.
    pub total_variance: f64,
}

impl Pca {
    /// Fraction of the total variance captured by the first `k` components.
    pub fn explained_ratio(&self, k: usize) -> f64 {
        let kept: f64 = self.variances.iter().take(k).sum();
        if self.total_variance > 0.0 {
            (kept / self.total_variance).min(1.0)
        } else {
            0.0
        }
    }
}

/// Principal components of mean-centered points, sorted by decreasing
/// variance, with each component's largest-magnitude loading made positive.
/// Components beyond the data dimension are zero-filled.
pub fn pca_latents(points: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    if points.len() < n_components || points.is_empty() {
        return Err(Error::config(
            "eval",
            format!("need at least {n_components} points for PCA, got {}", points.len()),
        ));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::config("eval", "PCA points have inconsistent dimensions"));
    }
    let n = points.len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / n as f64;
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if n_components > dim {
        log::warn!("requested {n_components} components from {dim}-dimensional data; padding with zeros");
    }
    let mut components = Vec::with_capacity(n_components);
    let mut variances = Vec::with_capacity(n_components);
    for k in 0..n_components {
        match order.get(k) {
            Some(&i) => {
                let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
                if lead < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                components.push(v);
                variances.push(eig.eigenvalues[i].max(0.0));
            }
            None => {
                components.push(vec![0.0; dim]);
                variances.push(0.0);
            }
        }
    }
    let projections = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().enumerate().map(|(j, w)| w * x[(i, j)]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        variances,
        projections,
        total_variance,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
