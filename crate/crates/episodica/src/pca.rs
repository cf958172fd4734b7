//! Post-hoc PCA: fit on training-set embeddings, apply the same
//! transformation matrix to test-set embeddings.
//!
//! The eigendecomposition is a cyclic Jacobi sweep over the sample
//! covariance (normalized by n-1), with a deterministic sign convention
//! so fitted models are bit-reproducible.
//!
//! # Example
//!
//! ```
//! use episodica::pca::{pca_fit, pca_transform};
//! use episodica::tensor::Tensor;
//!
//! // points along one line in 3-d: a single component captures them
//! let x = Tensor::from_rows(&[
//!     vec![0.0, 0.0, 0.0],
//!     vec![1.0, 1.0, 1.0],
//!     vec![2.0, 2.0, 2.0],
//!     vec![3.0, 3.0, 3.0],
//! ])?;
//! let model = pca_fit(&x, 1)?;
//! let y = pca_transform(&model, &x)?;
//! assert_eq!(y.shape(), &[4, 1]);
//! assert!(model.explained_variance.data()[0] > 0.0);
//! # Ok::<(), episodica::Error>(())
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_eten1, write_eten1, Tensor};

/// A fitted PCA transformation: center by `mean`, project onto the rows
/// of `components` (orthonormal, sorted by descending eigenvalue).
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Tensor,
    pub components: Tensor,
    pub explained_variance: Tensor,
}

impl PcaModel {
    pub fn out_dim(&self) -> usize {
        self.components.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.components.shape()[1]
    }

    /// Persist as three ETEN1 files (`mean.eten`, `components.eten`,
    /// `explained_variance.eten`) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Data(format!("pca save {}: {e}", dir.display())))?;
        write_eten1(&dir.join("mean.eten"), &self.mean)?;
        write_eten1(&dir.join("components.eten"), &self.components)?;
        write_eten1(&dir.join("explained_variance.eten"), &self.explained_variance)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = PcaModel {
            mean: read_eten1(&dir.join("mean.eten"))?,
            components: read_eten1(&dir.join("components.eten"))?,
            explained_variance: read_eten1(&dir.join("explained_variance.eten"))?,
        };
        if model.components.rank() != 2
            || model.mean.rank() != 1
            || model.mean.shape()[0] != model.in_dim()
            || model.explained_variance.shape() != [model.out_dim()]
        {
            return Err(Error::Data(format!(
                "pca model in {} has inconsistent shapes",
                dir.display()
            )));
        }
        Ok(model)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// (eigenvalues, eigenvectors as rows), unsorted. Converges when the
/// off-diagonal Frobenius norm drops below 1e-10, capped at 100 sweeps.
fn jacobi_eigh(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    // v starts as identity; rows accumulate the eigenvectors
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q] * a[p * d + q])
            .sum::<f64>()
            .sqrt();
        if off < 1e-10 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                // rotation angle zeroing a[p][q], via the stable tangent
                // formula
                let (s, c) = {
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        1.0 / (tau - (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    (t * c, c)
                };
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vpk = v[p * d + k];
                    let vqk = v[q * d + k];
                    v[p * d + k] = c * vpk - s * vqk;
                    v[q * d + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eigvals, v)
}

/// Fit PCA on an `n x d` matrix, keeping the top `out_dim` principal
/// directions.
pub fn pca_fit(x: &Tensor, out_dim: usize) -> Result<PcaModel> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!("pca_fit expects n x d data, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n < 2 {
        return Err(Error::Data(format!("pca_fit needs at least 2 samples, got {n}")));
    }
    if out_dim == 0 || out_dim > d.min(n - 1) {
        return Err(Error::Config(format!(
            "pca out_dim {out_dim} out of range 1..={}",
            d.min(n - 1)
        )));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &xij) in mean.iter_mut().zip(x.row(i)) {
            *m += xij as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // sample covariance, normalized by n-1
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        let row = x.row(i);
        for p in 0..d {
            let cp = row[p] as f64 - mean[p];
            for q in p..d {
                cov[p * d + q] += cp * (row[q] as f64 - mean[q]);
            }
        }
    }
    for p in 0..d {
        for q in p..d {
            let v = cov[p * d + q] / (n - 1) as f64;
            cov[p * d + q] = v;
            cov[q * d + p] = v;
        }
    }
    let total_var: f64 = (0..d).map(|p| cov[p * d + p]).sum();
    if total_var <= 0.0 {
        return Err(Error::Numeric("pca_fit: data has zero variance".into()));
    }
    let (eigvals, eigvecs) = jacobi_eigh(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap().then(i.cmp(&j)));
    let mut comp = Vec::with_capacity(out_dim * d);
    let mut var = Vec::with_capacity(out_dim);
    for &idx in order.iter().take(out_dim) {
        let row = &eigvecs[idx * d..(idx + 1) * d];
        // sign convention: the largest-magnitude coordinate is positive
        let lead = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap().then(b.0.cmp(&a.0)))
            .map(|(_, &v)| v)
            .unwrap();
        let flip = if lead < 0.0 { -1.0 } else { 1.0 };
        comp.extend(row.iter().map(|&v| (flip * v) as f32));
        var.push(eigvals[idx].max(0.0) as f32);
    }
    Ok(PcaModel {
        mean: Tensor::new(vec![d], mean.iter().map(|&m| m as f32).collect())?,
        components: Tensor::new(vec![out_dim, d], comp)?,
        explained_variance: Tensor::new(vec![out_dim], var)?,
    })
}

/// Project `n x d` data into the fitted subspace: `(X - mean) C^T`.
pub fn pca_transform(model: &PcaModel, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[1] != model.in_dim() {
        return Err(Error::Shape(format!(
            "pca_transform: data {:?} vs model input dim {}",
            x.shape(),
            model.in_dim()
        )));
    }
    let (n, d, k) = (x.shape()[0], model.in_dim(), model.out_dim());
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = x.row(i);
        for c in 0..k {
            let comp = model.components.row(c);
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += (row[j] as f64 - model.mean.data()[j] as f64) * comp[j] as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Map reduced coordinates back to the original space:
/// `Y C + mean`. Composing transform -> lift -> transform is the identity
/// on the projected coordinates.
pub fn pca_lift(model: &PcaModel, y: &Tensor) -> Result<Tensor> {
    if y.rank() != 2 || y.shape()[1] != model.out_dim() {
        return Err(Error::Shape(format!(
            "pca_lift: data {:?} vs model output dim {}",
            y.shape(),
            model.out_dim()
        )));
    }
    let (n, d, k) = (y.shape()[0], model.in_dim(), model.out_dim());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = y.row(i);
        for j in 0..d {
            let mut acc = model.mean.data()[j] as f64;
            for c in 0..k {
                acc += row[c] as f64 * model.components.row(c)[j] as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![n, d], out)
}
