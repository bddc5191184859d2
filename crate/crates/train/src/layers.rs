//! Dense and 3x3 convolution kernels.

use ctxnorm::{Error, Result, Tensor};

use crate::gemm::{gemm, Mat};

/// `y[n, o] = Σ_i x[n, i] w[o, i] + b[o]`; the input is `[N, C, L]` viewed
/// as `[N, C·L]` and the output is `[N, out, 1]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let inputs = x.len() / n.max(1);
    let (out, w_in) = w.dims2()?;
    if w_in != inputs || b.len() != out {
        return Err(Error::Shape(format!("dense layer {out}x{w_in} got {inputs} inputs")));
    }
    let mut y = vec![0.0; n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(b.data());
    }
    gemm(Mat::new(x.data(), n, inputs), Mat::new(w.data(), out, inputs).t(), 1.0, &mut y);
    Tensor::from_vec(&[n, out, 1], y)
}

/// Returns `(dx, dw, db)` with `dx` shaped like `x`.
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.shape()[0];
    let inputs = x.len() / n.max(1);
    let (out, _) = w.dims2()?;
    let mut dw = vec![0.0; out * inputs];
    gemm(Mat::new(dy.data(), n, out).t(), Mat::new(x.data(), n, inputs), 0.0, &mut dw);
    let mut db = vec![0.0; out];
    for row in dy.data().chunks(out) {
        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }
    let mut dx = vec![0.0; n * inputs];
    gemm(Mat::new(dy.data(), n, out), Mat::new(w.data(), out, inputs), 0.0, &mut dx);
    Ok((Tensor::from_vec(x.shape(), dx)?, Tensor::from_vec(&[out, inputs], dw)?, Tensor::from_vec(&[out], db)?))
}

/// Output columns `[lo, hi)` of a row whose input pixel `ox + kx − 1` lies
/// inside a row of width `w`.
fn valid_span(kx: usize, w: usize) -> (usize, usize) {
    (usize::from(kx == 0), if kx == 2 { w - 1 } else { w })
}

/// Unfolds one sample `[C, H·W]` into `[C·9, H·W]` patch columns with zero
/// padding of one pixel.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let (lo, hi) = valid_span(kx, w);
                for oy in 0..h {
                    let out = &mut row[oy * w..(oy + 1) * w];
                    let Some(iy) = (oy + ky).checked_sub(1).filter(|&iy| iy < h) else {
                        out.fill(0.0);
                        continue;
                    };
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    out[lo..hi].copy_from_slice(&plane[iy * w + lo + kx - 1..iy * w + hi + kx - 1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch-column gradients into `dx`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let (lo, hi) = valid_span(kx, w);
                for oy in 0..h {
                    let Some(iy) = (oy + ky).checked_sub(1).filter(|&iy| iy < h) else { continue };
                    let dst = &mut plane[iy * w + lo + kx - 1..iy * w + hi + kx - 1];
                    for (d, v) in dst.iter_mut().zip(&row[oy * w + lo..oy * w + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, h: usize, width: usize) -> Result<(usize, usize, usize)> {
    let (n, c, l) = x.dims3()?;
    let (out, taps) = w.dims2()?;
    if l != h * width || taps != c * 9 {
        return Err(Error::Shape(format!(
            "conv3x3 with weight {:?} got input {:?} for a {h}x{width} image",
            w.shape(),
            x.shape()
        )));
    }
    Ok((n, c, out))
}

/// Same-size 3x3 convolution, stride 1. `x` is `[N, C, H·W]`, `w` is
/// `[out, C·9]`.
pub fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor, h: usize, width: usize) -> Result<Tensor> {
    let (n, c, out) = conv_dims(x, w, h, width)?;
    let hw = h * width;
    let mut cols = vec![0.0; c * 9 * hw];
    let mut y = vec![0.0; n * out * hw];
    for s in 0..n {
        im2col(&x.data()[s * c * hw..(s + 1) * c * hw], c, h, width, &mut cols);
        let ys = &mut y[s * out * hw..(s + 1) * out * hw];
        for (o, row) in ys.chunks_mut(hw).enumerate() {
            row.fill(b.data()[o]);
        }
        gemm(Mat::new(w.data(), out, c * 9), Mat::new(&cols, c * 9, hw), 1.0, ys);
    }
    Tensor::from_vec(&[n, out, hw], y)
}

pub fn conv3x3_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    h: usize,
    width: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, out) = conv_dims(x, w, h, width)?;
    let hw = h * width;
    let mut cols = vec![0.0; c * 9 * hw];
    let mut dcols = vec![0.0; c * 9 * hw];
    let mut dw = vec![0.0; out * c * 9];
    let mut db = vec![0.0; out];
    let mut dx = vec![0.0; n * c * hw];
    for s in 0..n {
        let dys = &dy.data()[s * out * hw..(s + 1) * out * hw];
        for (o, row) in dys.chunks(hw).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        im2col(&x.data()[s * c * hw..(s + 1) * c * hw], c, h, width, &mut cols);
        gemm(Mat::new(dys, out, hw), Mat::new(&cols, c * 9, hw).t(), 1.0, &mut dw);
        gemm(Mat::new(w.data(), out, c * 9).t(), Mat::new(dys, out, hw), 0.0, &mut dcols);
        col2im(&dcols, c, h, width, &mut dx[s * c * hw..(s + 1) * c * hw]);
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[out, c * 9], dw)?,
        Tensor::from_vec(&[out], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctxnorm::gradcheck::{finite_diff_grad, max_rel_error, probe_loss};
    use ctxnorm::{Fill, Rng};

    fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::create(shape, Fill::Normal { mean: 0.0, std: 1.0 }, Some(rng)).unwrap()
    }

    #[test]
    fn dense_matches_hand_computation() {
        let x = Tensor::from_vec(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[1.0 - 2.0 + 0.1, 0.5 + 4.0 + 0.2]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut w = Tensor::zeros(&[1, 9]);
        w.data_mut()[4] = 1.0;
        let x = Tensor::from_vec(&[1, 1, 6], (0..6).map(f64::from).collect()).unwrap();
        let y = conv3x3_forward(&x, &w, &Tensor::zeros(&[1]), 2, 3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_box_filter_pads_with_zeros() {
        let w = Tensor::ones(&[1, 9]);
        let x = Tensor::ones(&[1, 1, 9]);
        let y = conv3x3_forward(&x, &w, &Tensor::zeros(&[1]), 3, 3).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let x = normal(&[2, 2, 12], &mut rng);
        let w = normal(&[3, 18], &mut rng);
        let b = normal(&[3], &mut rng);
        let probe = normal(&[2, 3, 12], &mut rng);
        let (dx, dw, db) = conv3x3_backward(&x, &w, &probe, 3, 4).unwrap();
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| Ok(probe_loss(&conv3x3_forward(x, w, b, 3, 4)?, &probe));
        assert!(max_rel_error(&dx, &finite_diff_grad(|t| f(t, &w, &b), &x, 1e-5).unwrap(), 1e-6) < 1e-7);
        assert!(max_rel_error(&dw, &finite_diff_grad(|t| f(&x, t, &b), &w, 1e-5).unwrap(), 1e-6) < 1e-7);
        assert!(max_rel_error(&db, &finite_diff_grad(|t| f(&x, &w, t), &b, 1e-5).unwrap(), 1e-6) < 1e-7);

        let w = normal(&[4, 24], &mut rng);
        let b = normal(&[4], &mut rng);
        let probe = normal(&[2, 4, 1], &mut rng);
        let (dx, dw, db) = dense_backward(&x, &w, &probe).unwrap();
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| Ok(probe_loss(&dense_forward(x, w, b)?, &probe));
        assert!(max_rel_error(&dx, &finite_diff_grad(|t| f(t, &w, &b), &x, 1e-5).unwrap(), 1e-6) < 1e-7);
        assert!(max_rel_error(&dw, &finite_diff_grad(|t| f(&x, t, &b), &w, 1e-5).unwrap(), 1e-6) < 1e-7);
        assert!(max_rel_error(&db, &finite_diff_grad(|t| f(&x, &w, t), &b, 1e-5).unwrap(), 1e-6) < 1e-7);
    }
}
