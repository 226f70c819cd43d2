//! Backward bilinear warping and 2.5D flow assembly.
//!
//! Flow lives on the grid of the target frame and stores the displacement
//! of scene content from source to target, so target pixel `p` is sampled
//! from the source at `p - flow(p)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{DepthMap, FlowField, Grid, Planes};
use crate::scalar::Scalar;

/// Bilinear taps for a continuous coordinate: up to four `(index, weight)`
/// pairs with non-zero weight, or `None` outside `[0, w-1] x [0, h-1]`.
#[inline]
pub fn bilinear_taps<T: Scalar>(w: usize, h: usize, x: T, y: T) -> Option<([(usize, T); 4], usize)> {
    let wmax = T::of(w - 1);
    let hmax = T::of(h - 1);
    if !(x >= T::zero() && x <= wmax && y >= T::zero() && y <= hmax) {
        return None;
    }
    let x0 = x.floor().to_usize()?.min(w.saturating_sub(2));
    let y0 = y.floor().to_usize()?.min(h.saturating_sub(2));
    let fx = x - T::of(x0);
    let fy = y - T::of(y0);
    let one = T::one();
    let mut taps = [(0usize, T::zero()); 4];
    let mut n = 0;
    let candidates = [
        (x0, y0, (one - fx) * (one - fy)),
        (x0 + 1, y0, fx * (one - fy)),
        (x0, y0 + 1, (one - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (cx, cy, wt) in candidates {
        if wt != T::zero() {
            taps[n] = (cy * w + cx, wt);
            n += 1;
        }
    }
    Some((taps, n))
}

/// Samples `values` at `(x, y)`. Returns `None` when the sample leaves the
/// image or touches an invalid pixel with non-zero weight.
#[inline]
pub fn sample_bilinear<T: Scalar>(
    values: &[T],
    valid: Option<&[bool]>,
    w: usize,
    h: usize,
    x: T,
    y: T,
) -> Option<T> {
    let (taps, n) = bilinear_taps(w, h, x, y)?;
    let mut acc = T::zero();
    for &(i, wt) in &taps[..n] {
        if let Some(mask) = valid {
            if !mask[i] {
                return None;
            }
        }
        acc += values[i] * wt;
    }
    Some(acc)
}

/// Output of [`backward_warp`].
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult<T> {
    /// Invalid where the sample leaves the image or touches an invalid pixel.
    pub warped: DepthMap<T>,
    /// Samples outside `[0, w-1] x [0, h-1]`.
    pub out_of_bounds: Vec<bool>,
}

fn check_flow<T: Scalar>(flow: &FlowField<T>, w: usize, h: usize) -> Result<()> {
    if !flow.same_grid(w, h) {
        return Err(Error::domain(format!(
            "flow is {}x{}, image is {w}x{h}",
            flow.width(),
            flow.height()
        )));
    }
    // FlowField construction already rejects non-finite components.
    Ok(())
}

/// Samples `z_src` at `p - flow(p)` for every target pixel.
pub fn backward_warp<T: Scalar>(z_src: &DepthMap<T>, flow: &FlowField<T>) -> Result<WarpResult<T>> {
    let (w, h) = (z_src.width(), z_src.height());
    check_flow(flow, w, h)?;
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let (values, valid) = (z_src.values(), z_src.valid());
    let (samples, out_of_bounds): (Vec<Option<T>>, Vec<bool>) = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let sx = T::of(i % w) - fx[i];
            let sy = T::of(i / w) - fy[i];
            let outside = bilinear_taps::<T>(w, h, sx, sy).is_none();
            (sample_bilinear(values, Some(valid), w, h, sx, sy), outside)
        })
        .unzip();
    let warped = DepthMap::new(
        w,
        h,
        samples.iter().map(|s| s.unwrap_or(T::zero())).collect(),
        samples.iter().map(Option::is_some).collect(),
    )?;
    Ok(WarpResult {
        warped,
        out_of_bounds,
    })
}

/// Warps every plane of `planes` by `flow`; out-of-image samples become 0
/// and are reported in the returned mask.
pub fn warp_planes<T: Scalar>(planes: &Planes<T>, flow: &FlowField<T>) -> Result<(Planes<T>, Vec<bool>)> {
    let (w, h) = (planes.width(), planes.height());
    check_flow(flow, w, h)?;
    let n = w * h;
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let taps: Vec<Option<([(usize, T); 4], usize)>> = (0..n)
        .into_par_iter()
        .map(|i| bilinear_taps(w, h, T::of(i % w) - fx[i], T::of(i / w) - fy[i]))
        .collect();
    let mut out = Planes::zeros(w, h, planes.channels())?;
    for c in 0..planes.channels() {
        let src = planes.plane(c);
        let dst = out.plane_mut(c);
        for (i, t) in taps.iter().enumerate() {
            if let Some((taps, k)) = t {
                dst[i] = taps[..*k].iter().fold(T::zero(), |a, &(j, wt)| a + src[j] * wt);
            }
        }
    }
    let oob = taps.iter().map(Option::is_none).collect();
    Ok((out, oob))
}

/// `z + dz` pixelwise; validity follows `z`.
pub fn apply_depth_flow<T: Scalar>(z: &DepthMap<T>, dz: &Grid<T>) -> Result<DepthMap<T>> {
    if z.width() != dz.width() || z.height() != dz.height() {
        return Err(Error::domain("depth flow and depth map differ in size"));
    }
    DepthMap::new(
        z.width(),
        z.height(),
        z.values().iter().zip(dz.data()).map(|(&a, &b)| a + b).collect(),
        z.valid().to_vec(),
    )
}

/// Concatenates lateral flow and depth flow into a (Δx, Δy, Δz) field.
pub fn compose_25d<T: Scalar>(lateral: &FlowField<T>, dz: &Grid<T>) -> Result<FlowField<T>> {
    if lateral.channels() != 2 {
        return Err(Error::domain("lateral flow must have 2 channels"));
    }
    if !lateral.same_grid(dz.width(), dz.height()) {
        return Err(Error::domain("lateral and depth flow differ in size"));
    }
    let mut data = lateral.data().to_vec();
    data.extend_from_slice(dz.data());
    FlowField::new(lateral.width(), lateral.height(), 3, data)
}

/// Inverse of [`compose_25d`].
pub fn decompose_25d<T: Scalar>(flow: &FlowField<T>) -> Result<(FlowField<T>, Grid<T>)> {
    let dz = flow
        .depth_channel()
        .ok_or_else(|| Error::domain("flow has no depth channel"))?;
    Ok((flow.lateral(), dz))
}
