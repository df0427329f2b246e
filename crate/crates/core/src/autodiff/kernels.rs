//! Forward and backward kernels on raw tensors. The tape in the parent module
//! wires these together; they are also usable standalone.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Zero padding applied around the input of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Output has the same spatial extent as the input.
    pub fn same(kh: usize, kw: usize) -> Self {
        Padding {
            top: kh / 2,
            bottom: kh / 2,
            left: kw / 2,
            right: kw / 2,
        }
    }

    /// Same-size output whose receptive field extends upwards only: equivalent to
    /// prepending `kh / 2` zero rows, convolving with same padding and cropping
    /// the bottom `kh / 2` rows.
    pub fn upward(kh: usize, kw: usize) -> Self {
        Padding {
            top: 2 * (kh / 2),
            bottom: 0,
            left: kw / 2,
            right: kw / 2,
        }
    }
}

fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: Padding,
) -> Result<(usize, usize, usize, usize)> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(Error::config(format!(
            "conv2d expects 4-D input and kernel, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (_, cin, h, wd) = x.dims4();
    let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::config(format!("conv2d kernel {kh}x{kw} must be odd")));
    }
    if wcin != cin {
        return Err(Error::config(format!(
            "conv2d input has {cin} channels, kernel expects {wcin}"
        )));
    }
    if b.len() != cout {
        return Err(Error::config(format!(
            "conv2d bias has {} entries, kernel has {cout} outputs",
            b.len()
        )));
    }
    let oh = (h + pad.top + pad.bottom)
        .checked_sub(kh - 1)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::config("conv2d output would be empty"))?;
    let ow = (wd + pad.left + pad.right)
        .checked_sub(kw - 1)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::config("conv2d output would be empty"))?;
    Ok((kh, kw, oh, ow))
}

fn is_pointwise(kh: usize, kw: usize, pad: Padding) -> bool {
    kh == 1 && kw == 1 && pad == Padding::same(1, 1)
}

/// Unfold one `[C, H, W]` image into a `[KH*KW*C, OH*OW]` matrix. Row index is
/// `(kh * KW + kw) * C + c`, matching the HWIO kernel layout flattened row-major.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: Padding,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let hw = oh * ow;
    for ky in 0..kh {
        for kx in 0..kw {
            // valid output columns: 0 <= ox + kx - left < w
            let ox_lo = pad.left.saturating_sub(kx).min(ow);
            let ox_hi = (w + pad.left).saturating_sub(kx).min(ow).max(ox_lo);
            for ci in 0..c {
                let row = &mut col[((ky * kw + kx) * c + ci) * hw..][..hw];
                let plane = &src[ci * h * w..][..h * w];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..][..ow];
                    let iy = (oy + ky) as isize - pad.top as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..][..w];
                    dst[..ox_lo].fill(T::zero());
                    dst[ox_hi..].fill(T::zero());
                    if ox_lo == ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo + kx - pad.left;
                    dst[ox_lo..ox_hi].copy_from_slice(&srow[ix0..ix0 + (ox_hi - ox_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the column matrix back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: Padding,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let hw = oh * ow;
    for ky in 0..kh {
        for kx in 0..kw {
            let ox_lo = pad.left.saturating_sub(kx).min(ow);
            let ox_hi = (w + pad.left).saturating_sub(kx).min(ow).max(ox_lo);
            for ci in 0..c {
                let row = &col[((ky * kw + kx) * c + ci) * hw..][..hw];
                let plane = &mut dst[ci * h * w..][..h * w];
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - pad.top as isize;
                    if iy < 0 || iy >= h as isize || ox_lo == ox_hi {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..][..w];
                    let ix0 = ox_lo + kx - pad.left;
                    let src = &row[oy * ow + ox_lo..oy * ow + ox_hi];
                    for (d, &s) in drow[ix0..ix0 + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (kh, kw, oh, ow) = conv_geometry(x, w, b, pad)?;
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[3];
    let k = kh * kw * cin;
    let hw = oh * ow;
    let pointwise = is_pointwise(kh, kw, pad);
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * hw] };
    for img in 0..n {
        let src = &x.data()[img * cin * h * wd..][..cin * h * wd];
        let dst = &mut out.data_mut()[img * cout * hw..][..cout * hw];
        for (co, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(b.data()[co]);
        }
        let cols: &[T] = if pointwise {
            src
        } else {
            im2col(src, cin, h, wd, kh, kw, pad, oh, ow, &mut col);
            &col
        };
        // out[cout, hw] += W^T[cout, k] * col[k, hw]
        unsafe {
            T::gemm(
                cout,
                k,
                hw,
                T::one(),
                w.data().as_ptr(),
                1,
                cout as isize,
                cols.as_ptr(),
                hw as isize,
                1,
                T::one(),
                dst.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: Padding,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (kh, kw, oh, ow) = conv_geometry(x, w, b, pad)?;
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[3];
    let k = kh * kw * cin;
    let hw = oh * ow;
    let pointwise = is_pointwise(kh, kw, pad);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(b.shape());
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * hw] };
    let mut dcol = if pointwise { Vec::new() } else { vec![T::zero(); k * hw] };
    for img in 0..n {
        let src = &x.data()[img * cin * h * wd..][..cin * h * wd];
        let g = &dout.data()[img * cout * hw..][..cout * hw];
        for (co, plane) in g.chunks(hw).enumerate() {
            db.data_mut()[co] += plane.iter().copied().sum::<T>();
        }
        let cols: &[T] = if pointwise {
            src
        } else {
            im2col(src, cin, h, wd, kh, kw, pad, oh, ow, &mut col);
            &col
        };
        // dW[k, cout] += col[k, hw] * g^T[hw, cout]
        unsafe {
            T::gemm(
                k,
                hw,
                cout,
                T::one(),
                cols.as_ptr(),
                hw as isize,
                1,
                g.as_ptr(),
                1,
                hw as isize,
                T::one(),
                dw.data_mut().as_mut_ptr(),
                cout as isize,
                1,
            );
        }
        let dsrc = &mut dx.data_mut()[img * cin * h * wd..][..cin * h * wd];
        // dcol[k, hw] = W[k, cout] * g[cout, hw]
        let (target, beta) = if pointwise {
            (dsrc.as_mut_ptr(), T::zero())
        } else {
            (dcol.as_mut_ptr(), T::zero())
        };
        unsafe {
            T::gemm(
                k,
                cout,
                hw,
                T::one(),
                w.data().as_ptr(),
                cout as isize,
                1,
                g.as_ptr(),
                hw as isize,
                1,
                beta,
                target,
                hw as isize,
                1,
            );
        }
        if !pointwise {
            col2im(&dcol, cin, h, wd, kh, kw, pad, oh, ow, dsrc);
        }
    }
    Ok((dx, dw, db))
}

pub fn leaky_relu_forward<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, slope: T, dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = dout.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d *= slope;
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Returns the output and, for every output
/// element, the flat input index it was taken from. Ties go to the first
/// element in row-major order.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "2x2 max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                od[o] = xd[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    dout: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        d[i as usize] += g;
    }
    dx
}

pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            let srow = &xd[(p * h + oy / 2) * w..][..w];
            let drow = &mut od[(p * oh + oy) * ow..][..ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dout: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = dout.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let g = dout.data();
    let d = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            let grow = &g[(p * oh + oy) * ow..][..ow];
            let drow = &mut d[(p * h + oy / 2) * w..][..w];
            for (ox, &v) in grow.iter().enumerate() {
                drow[ox / 2] += v;
            }
        }
    }
    dx
}

pub fn concat_channels_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::config(format!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for img in 0..n {
        data.extend_from_slice(&a.data()[img * ca * plane..][..ca * plane]);
        data.extend_from_slice(&b.data()[img * cb * plane..][..cb * plane]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

pub fn concat_channels_backward<T: Real>(ca: usize, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = dout.dims4();
    let cb = c - ca;
    let plane = h * w;
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for img in 0..n {
        let g = &dout.data()[img * c * plane..][..c * plane];
        da.extend_from_slice(&g[..ca * plane]);
        db.extend_from_slice(&g[ca * plane..]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], da).expect("consistent split"),
        Tensor::from_vec(&[n, cb, h, w], db).expect("consistent split"),
    )
}

/// `out[y][x] = in[y - dy][x - dx]`, zero where the source is out of bounds.
/// Positive `dy` moves content down, positive `dx` moves it right.
pub fn shift_forward<T: Real>(x: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    let x_lo = dx.max(0) as usize;
    let x_hi = (w as isize + dx).clamp(0, w as isize) as usize;
    for p in 0..n * c {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                continue;
            }
            let srow = &xd[(p * h + sy as usize) * w..][..w];
            let drow = &mut od[(p * h + y) * w..][..w];
            let sx0 = (x_lo as isize - dx) as usize;
            drow[x_lo..x_hi].copy_from_slice(&srow[sx0..sx0 + (x_hi - x_lo)]);
        }
    }
    out
}

pub fn shift_backward<T: Real>(dout: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    shift_forward(dout, -dy, -dx)
}

/// Rotate one square plane counter-clockwise by `quarter_turns * 90` degrees.
fn rotate_plane<T: Copy>(src: &[T], dst: &mut [T], s: usize, quarter_turns: usize) {
    for i in 0..s {
        for j in 0..s {
            dst[i * s + j] = match quarter_turns % 4 {
                0 => src[i * s + j],
                1 => src[j * s + (s - 1 - i)],
                2 => src[(s - 1 - i) * s + (s - 1 - j)],
                _ => src[(s - 1 - j) * s + i],
            };
        }
    }
}

fn check_square<T: Real>(x: &Tensor<T>, what: &str) -> Result<()> {
    let (_, _, h, w) = x.dims4();
    if h != w {
        return Err(Error::config(format!("{what} needs square input, got {h}x{w}")));
    }
    Ok(())
}

/// `[N, C, S, S] -> [4N, C, S, S]`; batch block `k` holds the input rotated by
/// `k * 90` degrees counter-clockwise.
pub fn rotate_stack_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_square(x, "rotate_stack")?;
    let (n, c, s, _) = x.dims4();
    let plane = s * s;
    let block = n * c * plane;
    let mut out = Tensor::zeros(&[4 * n, c, s, s]);
    for k in 0..4 {
        for p in 0..n * c {
            rotate_plane(
                &x.data()[p * plane..][..plane],
                &mut out.data_mut()[k * block + p * plane..][..plane],
                s,
                k,
            );
        }
    }
    Ok(out)
}

pub fn rotate_stack_backward<T: Real>(dout: &Tensor<T>) -> Tensor<T> {
    let (n4, c, s, _) = dout.dims4();
    let n = n4 / 4;
    let plane = s * s;
    let block = n * c * plane;
    let mut dx = Tensor::zeros(&[n, c, s, s]);
    let mut tmp = vec![T::zero(); plane];
    for k in 0..4 {
        for p in 0..n * c {
            rotate_plane(&dout.data()[k * block + p * plane..][..plane], &mut tmp, s, 4 - k);
            for (d, &v) in dx.data_mut()[p * plane..][..plane].iter_mut().zip(&tmp) {
                *d += v;
            }
        }
    }
    dx
}

/// `[4N, C, S, S] -> [N, 4C, S, S]`: undo each block's rotation and stack the
/// four blocks along channels (block `k` lands in channels `k*C .. (k+1)*C`).
pub fn unrotate_combine_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_square(x, "unrotate_combine")?;
    let (n4, c, s, _) = x.dims4();
    if n4 % 4 != 0 {
        return Err(Error::config(format!(
            "unrotate_combine needs a batch divisible by 4, got {n4}"
        )));
    }
    let n = n4 / 4;
    let plane = s * s;
    let mut out = Tensor::zeros(&[n, 4 * c, s, s]);
    for k in 0..4 {
        for img in 0..n {
            for ch in 0..c {
                let src = &x.data()[((k * n + img) * c + ch) * plane..][..plane];
                let dst = &mut out.data_mut()[(img * 4 * c + k * c + ch) * plane..][..plane];
                rotate_plane(src, dst, s, (4 - k) % 4);
            }
        }
    }
    Ok(out)
}

pub fn unrotate_combine_backward<T: Real>(dout: &Tensor<T>) -> Tensor<T> {
    let (n, c4, s, _) = dout.dims4();
    let c = c4 / 4;
    let plane = s * s;
    let mut dx = Tensor::zeros(&[4 * n, c, s, s]);
    for k in 0..4 {
        for img in 0..n {
            for ch in 0..c {
                let src = &dout.data()[(img * 4 * c + k * c + ch) * plane..][..plane];
                let dst = &mut dx.data_mut()[((k * n + img) * c + ch) * plane..][..plane];
                rotate_plane(src, dst, s, k);
            }
        }
    }
    dx
}
