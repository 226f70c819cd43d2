//! Window least-squares estimators: iterative Lucas-Kanade on the census
//! Hamming mean for lateral residuals and a masked box mean for depth
//! residuals.
//!
//! Census codes of smooth surfaces are piecewise constant, so most windows
//! carry little motion signal. After every iteration the flow is replaced by
//! a local affine fit weighted by the smaller eigenvalue of each pixel's
//! normal matrix, which carries confident estimates into flat regions and
//! leaves rigid motion unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CensusMap, DepthMap, FlowField, Grid, Planes};
use crate::scalar::Scalar;
use crate::census::{census_channels, census_transform};
use crate::warp::{backward_warp, bilinear_taps};

/// Cauchy scale of the robust flow refit, in pixels.
const ROBUST_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalParams {
    /// Lucas-Kanade window radius.
    pub radius: usize,
    pub iterations: usize,
    /// Pixels whose normal matrix exceeds this condition number keep a zero
    /// residual.
    pub max_condition: f64,
    /// Box radius applied to every channel before matching; 0 disables.
    pub presmooth_radius: usize,
    /// Box radius of the depth difference estimator.
    pub depth_radius: usize,
    /// Largest update length per iteration, in pixels.
    pub max_step: f64,
    /// Fraction of each Gauss-Newton update that is applied. Census images
    /// are nearly binary, so full steps overshoot and oscillate.
    pub damping: f64,
    /// Radius of the confidence-weighted local affine fit applied to the
    /// flow after every iteration; 0 disables.
    pub fill_radius: usize,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        Self {
            radius: 7,
            iterations: 5,
            max_condition: 1e4,
            presmooth_radius: 1,
            depth_radius: 2,
            max_step: 1.0,
            damping: 0.5,
            fill_radius: 64,
        }
    }
}

impl ClassicalParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("classical iterations must be >= 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("damping must lie in (0, 1]"));
        }
        if !(self.max_step.is_finite() && self.max_step > 0.0) {
            return Err(Error::config("max_step must be > 0"));
        }
        if !(self.max_condition.is_finite() && self.max_condition >= 1.0) {
            return Err(Error::config("max_condition must be >= 1"));
        }
        Ok(())
    }
}

/// Window sums with radius `r`, windows clipped at the border.
pub fn box_sum<T: Scalar>(src: &[T], w: usize, h: usize, r: usize) -> Vec<T> {
    // vertical running sum, one output row at a time
    let mut out = Vec::with_capacity(w * h);
    let mut acc: Vec<T> = vec![T::zero(); w];
    for row in src.chunks(w).take(r + 1) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    for y in 0..h {
        out.extend_from_slice(&acc);
        if y + r + 1 < h {
            for (a, &v) in acc.iter_mut().zip(&src[(y + r + 1) * w..(y + r + 2) * w]) {
                *a += v;
            }
        }
        if y >= r {
            for (a, &v) in acc.iter_mut().zip(&src[(y - r) * w..(y - r + 1) * w]) {
                *a -= v;
            }
        }
    }
    // horizontal running sum in place
    let mut line = vec![T::zero(); w];
    for row in out.chunks_mut(w) {
        line.copy_from_slice(row);
        let mut s = line[..(r + 1).min(w)].iter().copied().sum::<T>();
        for x in 0..w {
            row[x] = s;
            if x + r + 1 < w {
                s += line[x + r + 1];
            }
            if x >= r {
                s -= line[x - r];
            }
        }
    }
    out
}

/// Mean of valid samples per window; 0 where a window holds none.
pub fn masked_box_mean<T: Scalar>(src: &[T], valid: &[bool], w: usize, h: usize, r: usize) -> Vec<T> {
    let masked: Vec<T> = src.iter().zip(valid).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
    let counts: Vec<T> = valid.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let sums = box_sum(&masked, w, h, r);
    let counts = box_sum(&counts, w, h, r);
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > T::of(0.5) { s / c } else { T::zero() })
        .collect()
}

/// Lateral residual and the pixels whose normal matrix was ill-conditioned.
#[derive(Debug, Clone, PartialEq)]
pub struct LkResult<T> {
    pub residual: FlowField<T>,
    pub ill_conditioned: Vec<bool>,
}

fn central_diff<T: Scalar>(p: &[T], w: usize, h: usize, x: usize, y: usize) -> (T, T) {
    let i = y * w + x;
    let half = T::of(0.5);
    let gx = if x == 0 {
        p[i + 1] - p[i]
    } else if x == w - 1 {
        p[i] - p[i - 1]
    } else {
        (p[i + 1] - p[i - 1]) * half
    };
    let gy = if y == 0 {
        p[i + w] - p[i]
    } else if y == h - 1 {
        p[i] - p[i - w]
    } else {
        (p[i + w] - p[i - w]) * half
    };
    (gx, gy)
}

fn stencil_valid(valid: &[bool], w: usize, h: usize, x: usize, y: usize) -> bool {
    let i = y * w + x;
    valid[i]
        && (x == 0 || valid[i - 1])
        && (x == w - 1 || valid[i + 1])
        && (y == 0 || valid[i - w])
        && (y == h - 1 || valid[i + w])
}

/// Warps every plane of `a` by `flow` (sampling at `p - flow`) and reports
/// pixels whose non-zero taps are all valid.
fn warp_with_mask<T: Scalar>(a: &Planes<T>, valid: &[bool], fx: &[T], fy: &[T]) -> (Planes<T>, Vec<bool>) {
    let (w, h) = (a.width(), a.height());
    let taps: Vec<Option<([(usize, T); 4], usize)>> = (0..w * h)
        .into_par_iter()
        .map(|i| bilinear_taps(w, h, T::of(i % w) - fx[i], T::of(i / w) - fy[i]))
        .collect();
    let mut out = Planes::zeros(w, h, a.channels()).expect("same extent as input");
    for c in 0..a.channels() {
        let src = a.plane(c);
        let dst = out.plane_mut(c);
        for (i, t) in taps.iter().enumerate() {
            if let Some((t, k)) = t {
                dst[i] = t[..*k].iter().fold(T::zero(), |acc, &(j, wt)| acc + src[j] * wt);
            }
        }
    }
    let mask = taps
        .iter()
        .map(|t| t.is_some_and(|(t, k)| t[..k].iter().all(|&(j, _)| valid[j])))
        .collect();
    (out, mask)
}

fn smooth<T: Scalar>(p: &Planes<T>, valid: &[bool], r: usize) -> Planes<T> {
    if r == 0 {
        return p.clone();
    }
    let (w, h) = (p.width(), p.height());
    let mut data = Vec::with_capacity(p.data().len());
    for c in 0..p.channels() {
        data.extend(masked_box_mean(p.plane(c), valid, w, h, r));
    }
    Planes::new(w, h, p.channels(), data).expect("same extent as input")
}

/// One Gauss-Newton update of the window least-squares system between an
/// aligned source `aw` and target `b`, summed over channels. Adds the
/// clamped update to `(ux, uy)` and marks ill-conditioned pixels in `ill`.
fn lk_update<T: Scalar>(
    aw: &Planes<T>,
    valid_w: &[bool],
    b: &Planes<T>,
    valid_b: &[bool],
    params: &ClassicalParams,
    ux: &mut [T],
    uy: &mut [T],
    ill: &mut [bool],
) -> Vec<T> {
    let (w, h, ch) = (b.width(), b.height(), b.channels());
    let n = w * h;
    let half = T::of(0.5);
    // per-pixel sums over channels of the five normal-equation terms
    let terms: Vec<[T; 5]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if !(stencil_valid(valid_w, w, h, x, y) && stencil_valid(valid_b, w, h, x, y)) {
                return [T::zero(); 5];
            }
            let mut t = [T::zero(); 5];
            for c in 0..ch {
                let (pa, pb) = (aw.plane(c), b.plane(c));
                let (ax, ay) = central_diff(pa, w, h, x, y);
                let (bx, by) = central_diff(pb, w, h, x, y);
                let gx = (ax + bx) * half;
                let gy = (ay + by) * half;
                let it = pa[i] - pb[i];
                t[0] += gx * gx;
                t[1] += gx * gy;
                t[2] += gy * gy;
                t[3] += gx * it;
                t[4] += gy * it;
            }
            t
        })
        .collect();
    let sums: Vec<Vec<T>> = (0..5)
        .into_par_iter()
        .map(|k| {
            let plane: Vec<T> = terms.iter().map(|t| t[k]).collect();
            box_sum(&plane, w, h, params.radius)
        })
        .collect();
    let tiny = T::of(1e-9);
    let max_cond = T::of(params.max_condition);
    let max_step = T::of(params.max_step);
    let damping = T::of(params.damping);
    let mut conf = vec![T::zero(); n];
    for i in 0..n {
        let (sxx, sxy, syy, sxt, syt) = (sums[0][i], sums[1][i], sums[2][i], sums[3][i], sums[4][i]);
        let half_tr = (sxx + syy) * half;
        let det = sxx * syy - sxy * sxy;
        let disc = (half_tr * half_tr - det).max(T::zero()).sqrt();
        let (lmax, lmin) = (half_tr + disc, half_tr - disc);
        if lmin <= tiny || lmax > max_cond * lmin {
            ill[i] = true;
            continue;
        }
        ill[i] = false;
        conf[i] = lmin;
        let dx = (syy * sxt - sxy * syt) / det * damping;
        let dy = (sxx * syt - sxy * sxt) / det * damping;
        let len = (dx * dx + dy * dy).sqrt();
        let k = if len > max_step { max_step / len } else { T::one() };
        ux[i] += dx * k;
        uy[i] += dy * k;
    }
    conf
}

/// `conf`-weighted local affine fit of `(ux, uy)` over a window of radius
/// `r`, evaluated at every pixel; affine motion passes unchanged. Falls back to the
/// weighted mean where the fit is degenerate; pixels without confident
/// neighbors keep their value.
fn affine_fit<T: Scalar>(ux: &[T], uy: &[T], conf: &[T], w: usize, h: usize, r: usize) -> (Vec<T>, Vec<T>) {
    let n = w * h;
    // window moments in coordinates centered on the image middle
    let (cx, cy) = (T::of(w as f64 / 2.0), T::of(h as f64 / 2.0));
    let xs: Vec<T> = (0..n).map(|i| T::of(i % w) - cx).collect();
    let ys: Vec<T> = (0..n).map(|i| T::of(i / w) - cy).collect();
    let c = conf;
    let cx: Vec<T> = (0..n).map(|i| c[i] * xs[i]).collect();
    let cy: Vec<T> = (0..n).map(|i| c[i] * ys[i]).collect();
    let cu: Vec<T> = (0..n).map(|i| c[i] * ux[i]).collect();
    let cv: Vec<T> = (0..n).map(|i| c[i] * uy[i]).collect();
    let sources: [Vec<T>; 12] = [
        c.to_vec(),
        cx.clone(),
        cy.clone(),
        (0..n).map(|i| cx[i] * xs[i]).collect(),
        (0..n).map(|i| cx[i] * ys[i]).collect(),
        (0..n).map(|i| cy[i] * ys[i]).collect(),
        cu.clone(),
        (0..n).map(|i| cu[i] * xs[i]).collect(),
        (0..n).map(|i| cu[i] * ys[i]).collect(),
        cv.clone(),
        (0..n).map(|i| cv[i] * xs[i]).collect(),
        (0..n).map(|i| cv[i] * ys[i]).collect(),
    ];
    let planes: Vec<Vec<T>> = sources.par_iter().map(|p| box_sum(p, w, h, r)).collect();
    let eps = T::of(1e-9);
    let (mut fx, mut fy) = (ux.to_vec(), uy.to_vec());
    for i in 0..n {
        let m = |k: usize| planes[k][i];
        let s0 = m(0);
        if s0 <= T::zero() {
            continue;
        }
        // shift moments to the pixel itself
        let (x0, y0) = (xs[i], ys[i]);
        let sx = m(1) - s0 * x0;
        let sy = m(2) - s0 * y0;
        let sxx = m(3) - T::of(2.0) * x0 * m(1) + s0 * x0 * x0;
        let sxy = m(4) - x0 * m(2) - y0 * m(1) + s0 * x0 * y0;
        let syy = m(5) - T::of(2.0) * y0 * m(2) + s0 * y0 * y0;
        let fit = |v: T, vx: T, vy: T| -> T {
            let bx = vx - x0 * v;
            let by = vy - y0 * v;
            // intercept of [s0 sx sy; sx sxx sxy; sy sxy syy] [a b c] = [v bx by]
            let c00 = sxx * syy - sxy * sxy;
            let c01 = sy * sxy - sx * syy;
            let c02 = sx * sxy - sy * sxx;
            let det = s0 * c00 + sx * c01 + sy * c02;
            if det.abs() <= eps * s0 * s0 * s0 * T::of((r * r) as f64).powi(2) {
                return v / s0;
            }
            (c00 * v + c01 * bx + c02 * by) / det
        };
        fx[i] = fit(m(6), m(7), m(8));
        fy[i] = fit(m(9), m(10), m(11));
    }
    (fx, fy)
}

/// Replaces `(ux, uy)` by a robust local affine fit. Pixels are weighted by
/// `conf` and down-weighted (Cauchy) by how far this iteration moved them
/// away from `(px, py)`.
fn propagate<T: Scalar>(ux: &mut [T], uy: &mut [T], px: &[T], py: &[T], conf: &[T], w: usize, h: usize, r: usize) {
    if r == 0 {
        return;
    }
    let scale = T::of(ROBUST_SCALE * ROBUST_SCALE);
    let robust: Vec<T> = (0..w * h)
        .map(|i| {
            let (dx, dy) = (ux[i] - px[i], uy[i] - py[i]);
            conf[i] / (T::one() + (dx * dx + dy * dy) / scale)
        })
        .collect();
    let (fx, fy) = affine_fit(ux, uy, &robust, w, h, r);
    ux.copy_from_slice(&fx);
    uy.copy_from_slice(&fy);
}

fn finish<T: Scalar>(prior: &FlowField<T>, ux: &[T], uy: &[T], ill: Vec<bool>) -> Result<LkResult<T>> {
    let (px, py) = (prior.channel(0), prior.channel(1));
    let n = ux.len();
    let mut data = Vec::with_capacity(2 * n);
    data.extend((0..n).map(|i| if ill[i] { T::zero() } else { ux[i] - px[i] }));
    data.extend((0..n).map(|i| if ill[i] { T::zero() } else { uy[i] - py[i] }));
    Ok(LkResult {
        residual: FlowField::new(prior.width(), prior.height(), 2, data)?,
        ill_conditioned: ill,
    })
}

/// Iterative multi-channel Lucas-Kanade between planes `a` and `b`,
/// starting from zero flow. Returns the flow under the backward-warp
/// convention.
pub fn lucas_kanade<T: Scalar>(
    a: &Planes<T>,
    valid_a: &[bool],
    b: &Planes<T>,
    valid_b: &[bool],
    params: &ClassicalParams,
) -> Result<LkResult<T>> {
    params.validate()?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if b.width() != w || b.height() != h || b.channels() != ch {
        return Err(Error::domain(format!(
            "inputs differ: {w}x{h}x{ch} vs {}x{}x{}",
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let n = w * h;
    if valid_a.len() != n || valid_b.len() != n {
        return Err(Error::domain("validity masks do not match the grid"));
    }
    let a = smooth(a, valid_a, params.presmooth_radius);
    let b = smooth(b, valid_b, params.presmooth_radius);
    let (mut ux, mut uy, mut ill) = (vec![T::zero(); n], vec![T::zero(); n], vec![false; n]);
    for _ in 0..params.iterations {
        let (aw, valid_w) = warp_with_mask(&a, valid_a, &ux, &uy);
        let (px, py) = (ux.clone(), uy.clone());
        let conf = lk_update(&aw, &valid_w, &b, valid_b, params, &mut ux, &mut uy, &mut ill);
        propagate(&mut ux, &mut uy, &px, &py, &conf, w, h, params.fill_radius);
    }
    finish(&FlowField::zeros(w, h, 2)?, &ux, &uy, ill)
}

/// Hamming mean of the census channels, one plane.
fn matching_image<T: Scalar>(c: &CensusMap) -> Planes<T> {
    let p: Planes<T> = census_channels(c);
    let (w, h) = (p.width(), p.height());
    let eighth = T::of(0.125);
    let data = (0..w * h)
        .map(|i| (0..8).fold(T::zero(), |acc, ch| acc + p.plane(ch)[i]) * eighth)
        .collect();
    Planes::new(w, h, 1, data).expect("same extent")
}

/// Refines `prior` between depth levels `a` and `b` by Lucas-Kanade on
/// census channels. Every iteration warps the original depth `a` by the
/// total flow and recomputes its census, so the data term vanishes exactly
/// at the true flow. Returns the residual on top of `prior`.
pub fn classical_stage_estimate<T: Scalar>(
    a: &DepthMap<T>,
    b: &DepthMap<T>,
    prior: &FlowField<T>,
    params: &ClassicalParams,
) -> Result<LkResult<T>> {
    params.validate()?;
    let (w, h) = (a.width(), a.height());
    if b.width() != w || b.height() != h {
        return Err(Error::domain(format!(
            "stage inputs differ: {w}x{h} vs {}x{}",
            b.width(),
            b.height()
        )));
    }
    if !prior.same_grid(w, h) || prior.channels() != 2 {
        return Err(Error::domain("prior does not match the stage grid"));
    }
    let n = w * h;
    let cb = census_transform(b)?;
    let pb = smooth(&matching_image(&cb), cb.valid(), params.presmooth_radius);
    let mut ux = prior.channel(0).to_vec();
    let mut uy = prior.channel(1).to_vec();
    let mut ill = vec![false; n];
    for _ in 0..params.iterations {
        let flow = FlowField::new(w, h, 2, ux.iter().chain(&uy).copied().collect())?;
        let ca = census_transform(&backward_warp(a, &flow)?.warped)?;
        let pa = smooth(&matching_image(&ca), ca.valid(), params.presmooth_radius);
        let (px, py) = (ux.clone(), uy.clone());
        let conf = lk_update(&pa, ca.valid(), &pb, cb.valid(), params, &mut ux, &mut uy, &mut ill);
        propagate(&mut ux, &mut uy, &px, &py, &conf, w, h, params.fill_radius);
    }
    finish(prior, &ux, &uy, ill)
}

/// `box_mean(b - (a + prior))` over mutually valid pixels.
pub fn depth_residual<T: Scalar>(a: &DepthMap<T>, b: &DepthMap<T>, prior: &Grid<T>, radius: usize) -> Result<Grid<T>> {
    let (w, h) = (b.width(), b.height());
    if a.width() != w || a.height() != h || prior.width() != w || prior.height() != h {
        return Err(Error::domain("depth stage inputs differ in size"));
    }
    let mask: Vec<bool> = a.valid().iter().zip(b.valid()).map(|(&p, &q)| p && q).collect();
    let diff: Vec<T> = (0..w * h)
        .map(|i| {
            if mask[i] {
                b.values()[i] - a.values()[i] - prior.data()[i]
            } else {
                T::zero()
            }
        })
        .collect();
    Grid::new(w, h, masked_box_mean(&diff, &mask, w, h, radius))
}
