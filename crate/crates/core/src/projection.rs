//! Arg-MIP: per-ray depth index of the brightest voxel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{DepthMap, Volume};
use crate::scalar::Scalar;

/// Projects `v` along its depth axis. Each pixel stores the smallest depth
/// index attaining the ray maximum; rays whose maximum is below
/// `min_intensity` are marked invalid with depth 0.
pub fn argmax_projection<T: Scalar>(v: &Volume<T>, min_intensity: T) -> Result<DepthMap<T>> {
    if !min_intensity.is_finite() {
        return Err(Error::domain("min_intensity must be finite"));
    }
    let (w, h, d) = (v.width(), v.height(), v.depth());
    let plane = w * h;
    let voxels = v.voxels();
    let (values, valid): (Vec<T>, Vec<bool>) = (0..plane)
        .into_par_iter()
        .map(|p| {
            let mut best = voxels[p];
            let mut arg = 0usize;
            for z in 1..d {
                let s = voxels[p + plane * z];
                if s > best {
                    best = s;
                    arg = z;
                }
            }
            if best < min_intensity {
                (T::zero(), false)
            } else {
                (T::of(arg), true)
            }
        })
        .unzip();
    DepthMap::new(w, h, values, valid)
}
