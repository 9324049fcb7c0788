//! Forward and backward kernels for the fused operations.

use super::{gemm, Result, Scalar, Strided, Tensor, TensorError};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache<T> {
    mean: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    for (name, t) in [("gain", gain), ("bias", bias)] {
        if t.shape() != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                expected: format!("{} of shape [{}]", name, d),
                found: format!("{:?}", t.shape()),
            });
        }
    }
    let rows = x.leading();
    let eps = T::from_f64(LAYER_NORM_EPS).unwrap();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for row in x.data().chunks(d) {
        let mu = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for ((v, g), b) in row.iter().zip(gain.data()).zip(bias.data()) {
            out.push((*v - mu) * r * *g + *b);
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { mean, rstd },
    ))
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    cache: &LayerNormCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = x.last_dim();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, ((xrow, dyrow), dxrow)) in x
        .data()
        .chunks(d)
        .zip(dy.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
        .enumerate()
    {
        let (mu, rs) = (cache.mean[r], cache.rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (xrow[j] - mu) * rs;
            dxhat[j] = dyrow[j] * gain.data()[j];
            sum_dxhat = sum_dxhat + dxhat[j];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        for j in 0..d {
            dxrow[j] = rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            dgain.data_mut()[j] = dgain.data()[j] + dyrow[j] * xhat[j];
            dbias.data_mut()[j] = dbias.data()[j] + dyrow[j];
        }
    }
    (dx, dgain, dbias)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionDims {
    batch: usize,
    seq: usize,
    heads: usize,
    width: usize,
    head_dim: usize,
}

impl AttentionDims {
    pub fn new<T: Scalar>(q: &Tensor<T>, batch: usize, seq: usize, heads: usize) -> Result<Self> {
        let (rows, width) = q.dims2("causal_attention")?;
        if batch == 0 || seq == 0 || rows != batch * seq {
            return Err(TensorError::Shape {
                op: "causal_attention",
                expected: format!("{} rows (batch {} x seq {})", batch * seq, batch, seq),
                found: format!("{} rows", rows),
            });
        }
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::Shape {
                op: "causal_attention",
                expected: format!("width divisible by {} heads", heads),
                found: format!("width {}", width),
            });
        }
        Ok(Self {
            batch,
            seq,
            heads,
            width,
            head_dim: width / heads,
        })
    }

    fn block_offset(&self, b: usize, h: usize) -> usize {
        b * self.seq * self.width + h * self.head_dim
    }

    fn head_view<'a, T>(&self, data: &'a [T], b: usize, h: usize) -> Strided<'a, T> {
        Strided {
            data,
            offset: self.block_offset(b, h),
            row_stride: self.width,
            col_stride: 1,
        }
    }

    fn head_view_t<'a, T>(&self, data: &'a [T], b: usize, h: usize) -> Strided<'a, T> {
        Strided {
            data,
            offset: self.block_offset(b, h),
            row_stride: 1,
            col_stride: self.width,
        }
    }
}

/// Returns the attention output and the `[batch, heads, seq, seq]` softmax
/// probabilities (zero above the diagonal).
pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dims: AttentionDims,
) -> (Tensor<T>, Vec<T>) {
    let s = dims.seq;
    let dh = dims.head_dim;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![T::zero(); dims.batch * dims.heads * s * s];
    let mut out = vec![T::zero(); q.len()];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let block = &mut probs[(b * dims.heads + h) * s * s..][..s * s];
            gemm(
                s,
                dh,
                s,
                dims.head_view(q.data(), b, h),
                dims.head_view_t(k.data(), b, h),
                T::zero(),
                block,
                0,
                s,
            );
            for i in 0..s {
                let row = &mut block[i * s..(i + 1) * s];
                let mut max = T::neg_infinity();
                for val in row[..=i].iter_mut() {
                    *val = *val * scale;
                    if *val > max {
                        max = *val;
                    }
                }
                let mut total = T::zero();
                for val in row[..=i].iter_mut() {
                    *val = (*val - max).exp();
                    total = total + *val;
                }
                for val in row[..=i].iter_mut() {
                    *val = *val / total;
                }
                for val in row[i + 1..].iter_mut() {
                    *val = T::zero();
                }
            }
            gemm(
                s,
                s,
                dh,
                Strided::row_major(block, s),
                dims.head_view(v.data(), b, h),
                T::zero(),
                &mut out,
                dims.block_offset(b, h),
                dims.width,
            );
        }
    }
    (Tensor::new(q.shape().to_vec(), out).unwrap(), probs)
}

pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dims: AttentionDims,
    probs: &[T],
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dims.seq;
    let dh = dims.head_dim;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dscores = vec![T::zero(); s * s];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let p = &probs[(b * dims.heads + h) * s * s..][..s * s];
            let off = dims.block_offset(b, h);
            // dV = Pᵀ · dO
            gemm(
                s,
                s,
                dh,
                Strided::transposed(p, s),
                dims.head_view(dout.data(), b, h),
                T::zero(),
                &mut dv,
                off,
                dims.width,
            );
            // dP = dO · Vᵀ
            gemm(
                s,
                dh,
                s,
                dims.head_view(dout.data(), b, h),
                dims.head_view_t(v.data(), b, h),
                T::zero(),
                &mut dscores,
                0,
                s,
            );
            for i in 0..s {
                let prow = &p[i * s..(i + 1) * s];
                let drow = &mut dscores[i * s..(i + 1) * s];
                let dot = prow[..=i]
                    .iter()
                    .zip(&drow[..=i])
                    .fold(T::zero(), |acc, (a, b)| acc + *a * *b);
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
                for val in drow[i + 1..].iter_mut() {
                    *val = T::zero();
                }
            }
            // dQ = dS · K,  dK = dSᵀ · Q
            gemm(
                s,
                s,
                dh,
                Strided::row_major(&dscores, s),
                dims.head_view(k.data(), b, h),
                T::zero(),
                &mut dq,
                off,
                dims.width,
            );
            gemm(
                s,
                s,
                dh,
                Strided::transposed(&dscores, s),
                dims.head_view(q.data(), b, h),
                T::zero(),
                &mut dk,
                off,
                dims.width,
            );
        }
    }
    let shape = q.shape().to_vec();
    (
        Tensor::new(shape.clone(), dq).unwrap(),
        Tensor::new(shape.clone(), dk).unwrap(),
        Tensor::new(shape, dv).unwrap(),
    )
}

/// Returns the mean loss and the row-wise softmax probabilities.
pub(crate) fn cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Vec<T>)> {
    let (n, vocab) = logits.dims2("softmax_cross_entropy")?;
    if targets.len() != n {
        return Err(TensorError::Shape {
            op: "softmax_cross_entropy",
            expected: format!("{} targets", n),
            found: format!("{} targets", targets.len()),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(TensorError::Index {
            op: "softmax_cross_entropy",
            index: bad,
            bound: vocab,
        });
    }
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0f64;
    for (row, &t) in logits.data().chunks(vocab).zip(targets) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let log_sum = sum.ln();
        for &v in row {
            probs.push((v - max).exp() / sum);
        }
        total += (log_sum - (row[t] - max)).to_f64().unwrap_or(f64::NAN);
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok((T::from_f64(loss).unwrap(), probs))
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    shape: &[usize],
    targets: &[usize],
    probs: &[T],
    upstream: T,
) -> Tensor<T> {
    let (n, vocab) = (shape[0], shape[1]);
    let scale = upstream / T::from_usize(n).unwrap();
    let mut out = Vec::with_capacity(probs.len());
    for (row, &t) in probs.chunks(vocab).zip(targets) {
        for (j, &p) in row.iter().enumerate() {
            let g = if j == t { p - T::one() } else { p };
            out.push(g * scale);
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}
