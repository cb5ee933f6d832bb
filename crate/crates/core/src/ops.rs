//! Forward kernels and their adjoints.
//!
//! Every function here is a pure function of its inputs. The graph in
//! [`crate::graph`] composes them and calls the `*_backward` adjoints.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn expect_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `out[0,0,i,j] = sum_k c[0,0,k] * d[k,i,j]`.
pub fn channel_contract(c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (n, a, b) = contract_dims(c, d)?;
    let mut out = vec![0.0; a * b];
    let dd = d.data();
    for (k, &ck) in c.data().iter().enumerate() {
        let slab = &dd[k * a * b..(k + 1) * a * b];
        for (o, &v) in out.iter_mut().zip(slab) {
            *o += ck * v;
        }
    }
    debug_assert_eq!(c.len(), n);
    Ok(Tensor::from_parts_unchecked(vec![1, 1, a, b], out))
}

fn contract_dims(c: &Tensor, d: &Tensor) -> Result<(usize, usize, usize)> {
    let cs = c.shape();
    let ds = d.shape();
    let ok = cs.len() == 3 && cs[0] == 1 && cs[1] == 1 && ds.len() == 3 && cs[2] == ds[0];
    if !ok {
        return Err(Error::dim(
            "channel_contract",
            format!("c shape {cs:?} is incompatible with d shape {ds:?}"),
        ));
    }
    Ok((ds[0], ds[1], ds[2]))
}

/// Adjoints of [`channel_contract`] with respect to `c` and `d`.
pub fn channel_contract_backward(c: &Tensor, d: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (n, a, b) = contract_dims(c, d).expect("shapes checked in forward");
    let g = grad.data();
    let dd = d.data();
    let mut gc = vec![0.0; n];
    let mut gd = vec![0.0; n * a * b];
    for k in 0..n {
        let slab = &dd[k * a * b..(k + 1) * a * b];
        gc[k] = slab.iter().zip(g).map(|(x, y)| x * y).sum();
        let ck = c.data()[k];
        for (o, &gv) in gd[k * a * b..(k + 1) * a * b].iter_mut().zip(g) {
            *o = ck * gv;
        }
    }
    (
        Tensor::from_parts_unchecked(c.shape().to_vec(), gc),
        Tensor::from_parts_unchecked(d.shape().to_vec(), gd),
    )
}

struct DeconvDims {
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    s: usize,
}

fn deconv_dims(input: &Tensor, kernel: &Tensor) -> Result<DeconvDims> {
    expect_rank("transposed_conv2d", input, 3)?;
    expect_rank("transposed_conv2d", kernel, 4)?;
    let is = input.shape();
    let ks = kernel.shape();
    if ks[0] != ks[1] {
        return Err(Error::dim(
            "transposed_conv2d",
            format!("kernel {ks:?} must be square in its spatial dims"),
        ));
    }
    if ks[3] != is[2] {
        return Err(Error::dim(
            "transposed_conv2d",
            format!(
                "input {is:?} has {} channels, kernel {ks:?} expects {}",
                is[2], ks[3]
            ),
        ));
    }
    Ok(DeconvDims {
        h: is[0],
        w: is[1],
        c_in: is[2],
        c_out: ks[2],
        s: ks[0],
    })
}

/// Stride-1 transposed convolution cropped to the input's spatial size.
///
/// `input` is `H×W×c_in`, `kernel` is `s×s×c_out×c_in`. The full output grid
/// is `(H+s-1)×(W+s-1)`; only its top-left `H×W` block is kept, so
/// `out[y,x,o] = sum_{dy,dx,i} input[y-dy, x-dx, i] * kernel[dy,dx,o,i]`.
pub fn transposed_conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let DeconvDims {
        h,
        w,
        c_in,
        c_out,
        s,
    } = deconv_dims(input, kernel)?;
    let inp = input.data();
    let ker = kernel.data();
    let mut out = vec![0.0; h * w * c_out];
    for y in 0..h {
        for x in 0..w {
            let src = &inp[(y * w + x) * c_in..(y * w + x + 1) * c_in];
            for dy in 0..s.min(h - y) {
                for dx in 0..s.min(w - x) {
                    let dst_base = ((y + dy) * w + (x + dx)) * c_out;
                    let kbase = (dy * s + dx) * c_out * c_in;
                    for o in 0..c_out {
                        let krow = &ker[kbase + o * c_in..kbase + (o + 1) * c_in];
                        let acc: f64 = krow.iter().zip(src).map(|(k, v)| k * v).sum();
                        out[dst_base + o] += acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![h, w, c_out], out))
}

/// Adjoints of [`transposed_conv2d`] with respect to `input` and `kernel`.
pub fn transposed_conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
) -> (Tensor, Tensor) {
    let DeconvDims {
        h,
        w,
        c_in,
        c_out,
        s,
    } = deconv_dims(input, kernel).expect("shapes checked in forward");
    let inp = input.data();
    let ker = kernel.data();
    let g = grad.data();
    let mut gi = vec![0.0; inp.len()];
    let mut gk = vec![0.0; ker.len()];
    for y in 0..h {
        for x in 0..w {
            let src = &inp[(y * w + x) * c_in..(y * w + x + 1) * c_in];
            let gsrc = &mut gi[(y * w + x) * c_in..(y * w + x + 1) * c_in];
            for dy in 0..s.min(h - y) {
                for dx in 0..s.min(w - x) {
                    let gbase = ((y + dy) * w + (x + dx)) * c_out;
                    let kbase = (dy * s + dx) * c_out * c_in;
                    for o in 0..c_out {
                        let go = g[gbase + o];
                        if go == 0.0 {
                            continue;
                        }
                        let krow = &ker[kbase + o * c_in..kbase + (o + 1) * c_in];
                        for (gs, &kv) in gsrc.iter_mut().zip(krow) {
                            *gs += go * kv;
                        }
                        let gkrow = &mut gk[kbase + o * c_in..kbase + (o + 1) * c_in];
                        for (gkv, &v) in gkrow.iter_mut().zip(src) {
                            *gkv += go * v;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts_unchecked(input.shape().to_vec(), gi),
        Tensor::from_parts_unchecked(kernel.shape().to_vec(), gk),
    )
}

/// Column-wise maximum over the point axis of an `n_pts×f` matrix.
pub fn max_pool_points(features: &Tensor) -> Result<Tensor> {
    expect_rank("max_pool_points", features, 2)?;
    let n = features.shape()[0];
    let (out, _) = max_pool_groups(features, n)?;
    let f = features.shape()[1];
    out.reshape(&[f])
}

/// Max-pool consecutive groups of `group` rows of a `(b*group)×f` matrix.
///
/// Returns the `b×f` maxima and, per output element, the row index of the
/// first (lowest-index) row attaining it.
pub fn max_pool_groups(features: &Tensor, group: usize) -> Result<(Tensor, Vec<usize>)> {
    expect_rank("max_pool_groups", features, 2)?;
    let rows = features.shape()[0];
    let f = features.shape()[1];
    if group == 0 || !rows.is_multiple_of(group) {
        return Err(Error::dim(
            "max_pool_groups",
            format!("{rows} rows cannot be split into groups of {group}"),
        ));
    }
    let b = rows / group;
    let d = features.data();
    let mut out = vec![f64::NEG_INFINITY; b * f];
    let mut arg = vec![0usize; b * f];
    for bi in 0..b {
        let o = &mut out[bi * f..(bi + 1) * f];
        let a = &mut arg[bi * f..(bi + 1) * f];
        for r in bi * group..(bi + 1) * group {
            let row = &d[r * f..(r + 1) * f];
            for j in 0..f {
                if row[j] > o[j] {
                    o[j] = row[j];
                    a[j] = r;
                }
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(vec![b, f], out), arg))
}

/// `sum (a - b)^2`.
pub fn sq_l2_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    expect_same_shape("sq_l2_diff", a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Max-shifted softmax of a non-empty vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::dim("softmax", "empty input"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// Row-wise softmax of an `r×c` matrix.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    expect_rank("softmax_rows", t, 2)?;
    let c = t.shape()[1];
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts_unchecked(t.shape().to_vec(), out))
}

pub fn softmax_rows_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let c = y.shape()[1];
    let mut out = vec![0.0; y.len()];
    for ((o, yr), gr) in out
        .chunks_mut(c)
        .zip(y.data().chunks(c))
        .zip(grad.data().chunks(c))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            o[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::from_parts_unchecked(y.shape().to_vec(), out)
}

/// `m×k` times `k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let g = grad.data();
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &bd[kk * n..(kk + 1) * n];
            ga[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = ad[i * k + kk];
            if av != 0.0 {
                for (o, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
    (
        Tensor::from_parts_unchecked(a.shape().to_vec(), ga),
        Tensor::from_parts_unchecked(b.shape().to_vec(), gb),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), data))
}

/// Adds the vector `bias` to every row of the `r×c` matrix `a`.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("add_row", a, 2)?;
    let c = a.shape()[1];
    if bias.len() != c {
        return Err(Error::dim(
            "add_row",
            format!(
                "bias {:?} does not match rows of {:?}",
                bias.shape(),
                a.shape()
            ),
        ));
    }
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(c) {
        for (o, &bv) in row.iter_mut().zip(bias.data()) {
            *o += bv;
        }
    }
    Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), out))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), data))
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_parts_unchecked(a.shape().to_vec(), data)
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&x| if x > 0.0 { x } else { 0.0 })
        .collect();
    Tensor::from_parts_unchecked(a.shape().to_vec(), data)
}

pub fn mean(a: &Tensor) -> f64 {
    a.data().iter().sum::<f64>() / a.len() as f64
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let probs = softmax_rows(logits)?;
    let (r, c) = (logits.shape()[0], logits.shape()[1]);
    check_labels("cross_entropy", labels, r, c)?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    Ok((loss / r as f64, probs))
}

pub(crate) fn check_labels(
    op: &'static str,
    labels: &[usize],
    rows: usize,
    classes: usize,
) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim(
            op,
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::dim(
            op,
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    Ok(())
}

/// One-hot `rows×classes` matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if classes == 0 || labels.is_empty() {
        return Err(Error::dim(
            "one_hot",
            "need at least one label and one class",
        ));
    }
    check_labels("one_hot", labels, labels.len(), classes)?;
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::from_parts_unchecked(
        vec![labels.len(), classes],
        data,
    ))
}
