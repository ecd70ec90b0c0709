//! Forward and backward kernels on raw tensors. Every reduction runs in a
//! fixed order so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) {
        return Err(Error::dim("dense", x.shape(), w.shape()));
    }
    let (n, fan_in, fan_out) = (x.dim(0), w.dim(0), w.dim(1));
    if b.shape() != [fan_out] {
        return Err(Error::dim("dense bias", w.shape(), b.shape()));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(n * fan_out);
    for row in xd.chunks_exact(fan_in) {
        let mut acc = bd.to_vec();
        for (i, &xv) in row.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wrow = &wd[i * fan_out..(i + 1) * fan_out];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a = *a + xv * wv;
            }
        }
        out.extend_from_slice(&acc);
    }
    Tensor::new(vec![n, fan_out], out)
}

/// Returns (dx, dw, db).
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (fan_in, fan_out) = (w.dim(0), w.dim(1));
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dw = vec![T::zero(); fan_in * fan_out];
    let mut db = vec![T::zero(); fan_out];
    for (row, grow) in xd.chunks_exact(fan_in).zip(dyd.chunks_exact(fan_out)) {
        for (d, &g) in db.iter_mut().zip(grow) {
            *d = *d + g;
        }
        for (i, &xv) in row.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let dwrow = &mut dw[i * fan_out..(i + 1) * fan_out];
            for (d, &g) in dwrow.iter_mut().zip(grow) {
                *d = *d + xv * g;
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(xd.len());
        for grow in dyd.chunks_exact(fan_out) {
            for wrow in wd.chunks_exact(fan_out) {
                dx.push(wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum());
            }
        }
        Tensor::new(x.shape().to_vec(), dx).expect("dense dx shape")
    });
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).expect("dense dw shape"),
        Tensor::new(vec![fan_out], db).expect("dense db shape"),
    )
}

/// Valid output range along one axis for a kernel tap offset `d` in {-1,0,1}.
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)) as usize;
    (lo, hi.max(lo))
}

fn check_conv<T: Real>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if x.rank() != 4 || k.rank() != 4 {
        return Err(Error::dim("conv2d", x.shape(), k.shape()));
    }
    if k.dim(2) != 3 || k.dim(3) != 3 {
        return Err(Error::dim(
            "conv2d kernel must be 3x3",
            x.shape(),
            k.shape(),
        ));
    }
    if x.dim(1) != k.dim(1) {
        return Err(Error::dim("conv2d channels", x.shape(), k.shape()));
    }
    if b.shape() != [k.dim(0)] {
        return Err(Error::dim("conv2d bias", k.shape(), b.shape()));
    }
    Ok(())
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv2d<T: Real>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_conv(x, k, b)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let f = k.dim(0);
    let plane = h * w;
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    let mut out = vec![T::zero(); n * f * plane];
    for ni in 0..n {
        for fi in 0..f {
            let o = &mut out[(ni * f + fi) * plane..(ni * f + fi + 1) * plane];
            o.iter_mut().for_each(|v| *v = bd[fi]);
            for ci in 0..c {
                let inp = &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                let kk = &kd[(fi * c + ci) * 9..(fi * c + ci + 1) * 9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..3 {
                        let wv = kk[ky * 3 + kx];
                        let dx = kx as isize - 1;
                        let (x0, x1) = tap_range(w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let irow = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov = *ov + wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, f, h, w], out)
}

/// Returns (dx, dk, db).
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let f = k.dim(0);
    let plane = h * w;
    let (xd, kd, gd) = (x.data(), k.data(), dy.data());
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); f];
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    for ni in 0..n {
        for fi in 0..f {
            let g = &gd[(ni * f + fi) * plane..(ni * f + fi + 1) * plane];
            db[fi] = db[fi] + g.iter().copied().sum::<T>();
            for ci in 0..c {
                let inp = &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                let kbase = (fi * c + ci) * 9;
                for ky in 0..3 {
                    let dyo = ky as isize - 1;
                    let (y0, y1) = tap_range(h, dyo);
                    for kx in 0..3 {
                        let dxo = kx as isize - 1;
                        let (x0, x1) = tap_range(w, dxo);
                        let sx0 = (x0 as isize + dxo) as usize;
                        let span = x1 - x0;
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dyo) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let irow = &inp[sy * w + sx0..sy * w + sx0 + span];
                            acc = acc + grow.iter().zip(irow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        dk[kbase + ky * 3 + kx] = dk[kbase + ky * 3 + kx] + acc;
                        if need_dx {
                            let wv = kd[kbase + ky * 3 + kx];
                            let dplane = &mut dx[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                            for y in y0..y1 {
                                let sy = (y as isize + dyo) as usize;
                                let grow = &g[y * w + x0..y * w + x1];
                                let drow = &mut dplane[sy * w + sx0..sy * w + sx0 + span];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d = *d + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("conv dx shape")),
        Tensor::new(k.shape().to_vec(), dk).expect("conv dk shape"),
        Tensor::new(vec![f], db).expect("conv db shape"),
    )
}

/// 2x2 non-overlapping max pool. Also returns, per output cell, the flat
/// input index of the first maximal element in row-major window order.
pub fn maxpool2d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 4 || !x.dim(2).is_multiple_of(2) || !x.dim(3).is_multiple_of(2) {
        return Err(Error::dim(
            "maxpool2d needs even spatial dims",
            x.shape(),
            &[2, 2],
        ));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward<T: Real>(
    x_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::dim("upsample2x", x.shape(), &[4]));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len() * 4);
    for nc in 0..n * c {
        for y in 0..h {
            let row = &xd[(nc * h + y) * w..(nc * h + y + 1) * w];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out)
}

pub fn upsample2x_backward<T: Real>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let ow = 2 * w;
    let gd = dy.data();
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for (i, d) in dx.data_mut().iter_mut().enumerate() {
        let nc = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        let base = nc * 4 * h * w + 2 * y * ow + 2 * x;
        *d = gd[base] + gd[base + 1] + gd[base + ow] + gd[base + ow + 1];
    }
    dx
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax over the last axis of a 2-D tensor.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::dim("softmax", x.shape(), &[2]));
    }
    let k = x.dim(1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean negative log-likelihood and the softmax used for its gradient.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let k = logits.dim(1);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    let mut total = T::zero();
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total = total + (lse - row[y]);
    }
    let n = T::of(labels.len() as f64);
    Ok((total / n, softmax(logits)?))
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse", a.shape(), b.shape()));
    }
    let s: T = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(s / T::of(a.len() as f64))
}
