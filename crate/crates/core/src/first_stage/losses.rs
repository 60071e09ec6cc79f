//! Reconstruction losses. Tensors are `(..., N, D)`: any leading batch axes,
//! then entities, then features.

use candle_core::{DType, Device, Tensor, D};
use ndarray::ArrayView3;

use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.rank() < 2 {
        return Err(Error::Shape(format!("{what}: need at least (N, D), got {:?}", a.dims())));
    }
    Ok(())
}

/// `1/N sum_i ||x_i - x_hat_i||^2`, averaged over leading axes.
pub fn loss_pos(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    same_shape(x, x_hat, "loss_pos")?;
    Ok((x - x_hat)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Pairwise distance matrices `(..., N, N)`.
///
/// A tiny constant under the square root keeps the gradient finite on the
/// diagonal; it cancels exactly when two distance matrices are compared.
pub fn distance_matrix(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(D::Minus2)?;
    let a = x.unsqueeze(x.rank() - 1)?;
    let b = x.unsqueeze(x.rank() - 2)?;
    let mut shape = x.dims().to_vec();
    shape.insert(shape.len() - 1, n);
    let diff = (a.broadcast_as(shape.as_slice())? - b.broadcast_as(shape.as_slice())?)?;
    Ok((diff.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?)
}

/// `1/N^2 sum_ij (D_ij(X) - D_ij(X_hat))^2`, averaged over leading axes.
pub fn loss_interdist(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    same_shape(x, x_hat, "loss_interdist")?;
    Ok((distance_matrix(x)? - distance_matrix(x_hat)?)?.sqr()?.mean_all()?)
}

/// One-hot encoding of class indices, `(len, classes)`.
pub fn one_hot(labels: &[usize], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Range {
                what: "class label",
                detail: format!("label {l} with only {classes} classes"),
            });
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), classes), device)?.to_dtype(dtype)?)
}

/// Log-softmax along the last axis.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `1/N sum_n -sum_k y_nk log p_nk` with `p = softmax(logits)`. `targets` are
/// one-hot (or any probability vectors) of the same shape as `logits`.
pub fn loss_ce(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    same_shape(logits, targets, "loss_ce")?;
    if logits.dim(D::Minus1)? < 2 {
        return Err(Error::Shape("cross-entropy needs at least two classes".into()));
    }
    Ok((log_softmax(logits)? * targets)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

/// Mean Euclidean distance per entity-frame, inputs `frames x N x D`.
pub fn reconstruction_error(x: ArrayView3<'_, f32>, x_hat: ArrayView3<'_, f32>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!("reconstruction_error: {:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    let (t, n, _) = x.dim();
    let mut total = 0.0f64;
    for f in 0..t {
        for i in 0..n {
            let d: f64 = x
                .slice(ndarray::s![f, i, ..])
                .iter()
                .zip(x_hat.slice(ndarray::s![f, i, ..]).iter())
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            total += d.sqrt();
        }
    }
    Ok(total / (t * n).max(1) as f64)
}
