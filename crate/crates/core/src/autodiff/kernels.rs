//! Numeric kernels behind the graph ops. Batch items are processed in
//! parallel; reductions across the batch are summed in item order so
//! results do not depend on thread scheduling.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: [usize; 4],
        k: [usize; 4],
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> std::result::Result<Self, String> {
        let [n, cin, h, w] = x;
        let [cout, kcin, kh, kw] = k;
        if kcin != cin {
            return Err(format!("kernel expects {kcin} input channels, input has {cin}"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err("stride must be >= 1".into());
        }
        if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
            return Err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad.0,
                w + 2 * pad.1
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            ho: (h + 2 * pad.0 - kh) / stride.0 + 1,
            wo: (w + 2 * pad.1 - kw) / stride.1 + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let (kk, p) = (g.k(), g.p());
    let items: Vec<Vec<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let mut col = vec![T::zero(); kk * p];
            im2col(x.item(n), g, &mut col);
            let mut out = vec![T::zero(); g.cout * p];
            if let Some(b) = bias {
                for (co, chunk) in out.chunks_mut(p).enumerate() {
                    chunk.fill(b.data()[co]);
                }
            }
            // SAFETY: dimensions match the contiguous buffers above.
            unsafe {
                T::gemm(
                    g.cout,
                    kk,
                    p,
                    T::one(),
                    k.data().as_ptr(),
                    kk as isize,
                    1,
                    col.as_ptr(),
                    p as isize,
                    1,
                    T::one(),
                    out.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            out
        })
        .collect();
    Tensor::new([g.n, g.cout, g.ho, g.wo], items.concat()).expect("conv output shape")
}

/// Returns (dx, dkernel, dbias).
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dout: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (kk, p) = (g.k(), g.p());
    let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let mut col = vec![T::zero(); kk * p];
            im2col(x.item(n), g, &mut col);
            let d = dout.item(n);
            let mut dk = vec![T::zero(); g.cout * kk];
            // SAFETY: d is cout×p, col is kk×p (read transposed), dk is cout×kk.
            unsafe {
                T::gemm(
                    g.cout,
                    p,
                    kk,
                    T::one(),
                    d.as_ptr(),
                    p as isize,
                    1,
                    col.as_ptr(),
                    1,
                    p as isize,
                    T::zero(),
                    dk.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
            let db: Vec<T> = d.chunks(p).map(|c| c.iter().copied().sum()).collect();
            let mut dx = Vec::new();
            if need_dx {
                // SAFETY: kernel read transposed (kk×cout), d is cout×p, col is kk×p.
                unsafe {
                    T::gemm(
                        kk,
                        g.cout,
                        p,
                        T::one(),
                        k.data().as_ptr(),
                        1,
                        kk as isize,
                        d.as_ptr(),
                        p as isize,
                        1,
                        T::zero(),
                        col.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                dx = vec![T::zero(); g.cin * g.h * g.w];
                col2im(&col, g, &mut dx);
            }
            (dx, dk, db)
        })
        .collect();
    let mut dk = vec![T::zero(); g.cout * kk];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = Vec::with_capacity(if need_dx { g.n * g.cin * g.h * g.w } else { 0 });
    for (pdx, pdk, pdb) in parts {
        for (a, b) in dk.iter_mut().zip(pdk) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pdb) {
            *a += b;
        }
        dx.extend(pdx);
    }
    (
        need_dx.then(|| Tensor::new([g.n, g.cin, g.h, g.w], dx).expect("dx shape")),
        Tensor::new([g.cout, g.cin, g.kh, g.kw], dk).expect("dk shape"),
        Tensor::new([g.cout, 1, 1, 1], db).expect("db shape"),
    )
}

/// Per-channel statistics for normalization, as (mean, biased variance).
pub(crate) fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Vec<(T, T)> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = T::of(n * hw);
    (0..c)
        .map(|ci| {
            let mut s = T::zero();
            for b in 0..n {
                s += x.item(b)[ci * hw..(ci + 1) * hw].iter().copied().sum::<T>();
            }
            let mean = s / count;
            let mut v = T::zero();
            for b in 0..n {
                for &e in &x.item(b)[ci * hw..(ci + 1) * hw] {
                    v += (e - mean) * (e - mean);
                }
            }
            (mean, v / count)
        })
        .collect()
}

/// Applies `f(channel, value)` elementwise.
pub(crate) fn per_channel<T: Scalar>(x: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
    let [_, c, h, w] = x.shape();
    let hw = h * w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f((i / hw) % c, v))
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Sum over (batch, height, width) of `f(value_index)` per channel.
pub(crate) fn channel_sums<T: Scalar>(shape: [usize; 4], f: impl Fn(usize) -> T) -> Vec<T> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let base = (b * c + ci) * hw;
            for i in base..base + hw {
                *o += f(i);
            }
        }
    }
    out
}

fn up_taps<T: Scalar>(n: usize) -> Vec<(usize, usize, T, T)> {
    let q = T::of(0.25);
    let tq = T::of(0.75);
    (0..2 * n)
        .map(|i| {
            let k = i / 2;
            if i % 2 == 0 {
                if k == 0 {
                    (0, 0, T::one(), T::zero())
                } else {
                    (k - 1, k, q, tq)
                }
            } else if k + 1 >= n {
                (n - 1, n - 1, T::one(), T::zero())
            } else {
                (k, k + 1, tq, q)
            }
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let tx = up_taps::<T>(w);
    let ty = up_taps::<T>(h);
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                let bot = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                out.push(top * wy0 + bot * wy1);
            }
        }
    }
    Tensor::new([n, c, 2 * h, 2 * w], out).expect("upsample shape")
}

pub(crate) fn upsample2x_backward<T: Scalar>(dout: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let tx = up_taps::<T>(w);
    let ty = up_taps::<T>(h);
    let mut dx = Tensor::zeros(in_shape);
    for (plane, dplane) in dx.data_mut().chunks_mut(h * w).zip(dout.data().chunks(4 * h * w)) {
        let mut k = 0;
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let g = dplane[k];
                k += 1;
                plane[y0 * w + x0] += g * wy0 * wx0;
                plane[y0 * w + x1] += g * wy0 * wx1;
                plane[y1 * w + x0] += g * wy1 * wx0;
                plane[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    dx
}

/// Sample geometry for one output pixel of the warp op.
#[derive(Clone, Copy)]
struct WarpTap<T> {
    i00: usize,
    ax: T,
    ay: T,
}

fn warp_tap<T: Scalar>(w: usize, h: usize, x: usize, y: usize, fx: T, fy: T) -> Option<WarpTap<T>> {
    let sx = T::of(x) - fx;
    let sy = T::of(y) - fy;
    if !(sx >= T::zero() && sx <= T::of(w - 1) && sy >= T::zero() && sy <= T::of(h - 1)) {
        return None;
    }
    let x0 = sx.floor().to_usize()?.min(w - 2);
    let y0 = sy.floor().to_usize()?.min(h - 2);
    Some(WarpTap {
        i00: y0 * w + x0,
        ax: sx - T::of(x0),
        ay: sy - T::of(y0),
    })
}

pub(crate) fn warp_forward<T: Scalar>(img: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = img.shape();
    let hw = h * w;
    let one = T::one();
    let items: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let f = flow.item(b);
            let src = img.item(b);
            let mut out = vec![T::zero(); c * hw];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let Some(t) = warp_tap(w, h, x, y, f[p], f[hw + p]) else {
                        continue;
                    };
                    for ci in 0..c {
                        let s = &src[ci * hw..];
                        out[ci * hw + p] = (one - t.ax) * (one - t.ay) * s[t.i00]
                            + t.ax * (one - t.ay) * s[t.i00 + 1]
                            + (one - t.ax) * t.ay * s[t.i00 + w]
                            + t.ax * t.ay * s[t.i00 + w + 1];
                    }
                }
            }
            out
        })
        .collect();
    Tensor::new(img.shape(), items.concat()).expect("warp shape")
}

/// Returns (d image, d flow).
pub(crate) fn warp_backward<T: Scalar>(
    img: &Tensor<T>,
    flow: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = img.shape();
    let hw = h * w;
    let one = T::one();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let f = flow.item(b);
            let src = img.item(b);
            let d = dout.item(b);
            let mut dimg = vec![T::zero(); c * hw];
            let mut dflow = vec![T::zero(); 2 * hw];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let Some(t) = warp_tap(w, h, x, y, f[p], f[hw + p]) else {
                        continue;
                    };
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for ci in 0..c {
                        let g = d[ci * hw + p];
                        let o = ci * hw;
                        let (v00, v10, v01, v11) = (
                            src[o + t.i00],
                            src[o + t.i00 + 1],
                            src[o + t.i00 + w],
                            src[o + t.i00 + w + 1],
                        );
                        dimg[o + t.i00] += g * (one - t.ax) * (one - t.ay);
                        dimg[o + t.i00 + 1] += g * t.ax * (one - t.ay);
                        dimg[o + t.i00 + w] += g * (one - t.ax) * t.ay;
                        dimg[o + t.i00 + w + 1] += g * t.ax * t.ay;
                        gx += g * ((one - t.ay) * (v10 - v00) + t.ay * (v11 - v01));
                        gy += g * ((one - t.ax) * (v01 - v00) + t.ax * (v11 - v10));
                    }
                    // sample position is p - flow
                    dflow[p] = -gx;
                    dflow[hw + p] = -gy;
                }
            }
            (dimg, dflow)
        })
        .collect();
    let (di, df): (Vec<Vec<T>>, Vec<Vec<T>>) = parts.into_iter().unzip();
    (
        Tensor::new(img.shape(), di.concat()).expect("dimg shape"),
        Tensor::new(flow.shape(), df.concat()).expect("dflow shape"),
    )
}
