//! Scale pyramids and coarse-to-fine residual flow composition.
//!
//! Level 0 is the coarsest. Pixel `i` at a coarse level covers fine pixels
//! `2i` and `2i + 1`, so its center sits at fine coordinate `2i + 0.5`.
//! Lateral displacements are expressed in pixels of the level they live on:
//! they double on upsampling and halve on downsampling. Depth displacements
//! are unaffected by lateral scale.

use crate::error::{Error, Result};
use crate::field::{DepthMap, FlowField, Grid};
use crate::scalar::Scalar;

fn check_even(w: usize, h: usize) -> Result<()> {
    if !w.is_multiple_of(2) || !h.is_multiple_of(2) {
        return Err(Error::domain(format!(
            "2x downsampling needs even dimensions, got {w}x{h}"
        )));
    }
    Ok(())
}

fn pool_plane<T: Scalar>(src: &[T], w: usize, h: usize, scale: T) -> Vec<T> {
    let (ow, oh) = (w / 2, h / 2);
    let quarter = T::of(0.25) * scale;
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let r0 = &src[2 * y * w..(2 * y + 1) * w];
        let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
        for x in 0..ow {
            out.push((r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter);
        }
    }
    out
}

/// 2×2 mean pooling of a plain grid.
pub fn downsample2x<T: Scalar>(g: &Grid<T>) -> Result<Grid<T>> {
    check_even(g.width(), g.height())?;
    Grid::new(
        g.width() / 2,
        g.height() / 2,
        pool_plane(g.data(), g.width(), g.height(), T::one()),
    )
}

/// 2×2 mean pooling of a depth map; a pooled pixel is invalid if any of its
/// four sources is.
pub fn downsample2x_map<T: Scalar>(z: &DepthMap<T>) -> Result<DepthMap<T>> {
    let (w, h) = (z.width(), z.height());
    check_even(w, h)?;
    let (ow, oh) = (w / 2, h / 2);
    let v = z.valid();
    let mut valid = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            valid.push(v[i] && v[i + 1] && v[i + w] && v[i + w + 1]);
        }
    }
    let values = pool_plane(z.values(), w, h, T::one())
        .into_iter()
        .zip(&valid)
        .map(|(p, &ok)| if ok { p } else { T::zero() })
        .collect();
    DepthMap::new(ow, oh, values, valid)
}

/// Mean-pools a flow field to half resolution, halving lateral components so
/// the result is expressed in coarse-level pixels.
pub fn downsample_flow2x<T: Scalar>(f: &FlowField<T>) -> Result<FlowField<T>> {
    let (w, h) = (f.width(), f.height());
    check_even(w, h)?;
    let half = T::of(0.5);
    let mut data = Vec::with_capacity(w * h / 4 * f.channels());
    for c in 0..f.channels() {
        let scale = if c < 2 { half } else { T::one() };
        data.extend(pool_plane(f.channel(c), w, h, scale));
    }
    FlowField::new(w / 2, h / 2, f.channels(), data)
}

/// Validity mask pooled like [`downsample2x_map`].
pub fn downsample_mask(mask: &[bool], w: usize, h: usize) -> Result<Vec<bool>> {
    check_even(w, h)?;
    let (ow, oh) = (w / 2, h / 2);
    Ok((0..ow * oh)
        .map(|k| {
            let i = 2 * (k / ow) * w + 2 * (k % ow);
            mask[i] && mask[i + 1] && mask[i + w] && mask[i + w + 1]
        })
        .collect())
}

/// Source taps for 2× bilinear upsampling with half-pixel centers:
/// output `i` samples input coordinate `i / 2 - 0.25`, clamped to the edge.
fn upsample_taps<T: Scalar>(n: usize) -> Vec<(usize, usize, T, T)> {
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

fn upsample_plane<T: Scalar>(src: &[T], w: usize, h: usize, scale: T) -> Vec<T> {
    let tx = upsample_taps::<T>(w);
    let ty = upsample_taps::<T>(h);
    let mut out = Vec::with_capacity(4 * w * h);
    for &(y0, y1, wy0, wy1) in &ty {
        for &(x0, x1, wx0, wx1) in &tx {
            let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
            let bottom = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
            out.push((top * wy0 + bottom * wy1) * scale);
        }
    }
    out
}

/// Bilinear 2× upsampling of a flow field; Δx and Δy are doubled, Δz kept.
pub fn upsample_flow2x<T: Scalar>(f: &FlowField<T>) -> FlowField<T> {
    let (w, h) = (f.width(), f.height());
    let two = T::of(2.0);
    let mut data = Vec::with_capacity(4 * w * h * f.channels());
    for c in 0..f.channels() {
        let scale = if c < 2 { two } else { T::one() };
        data.extend(upsample_plane(f.channel(c), w, h, scale));
    }
    FlowField::new(2 * w, 2 * h, f.channels(), data).expect("upsampling preserves finiteness")
}

/// Bilinear 2× upsampling of a scalar grid (depth flow), values unscaled.
pub fn upsample_grid2x<T: Scalar>(g: &Grid<T>) -> Grid<T> {
    Grid::new(
        2 * g.width(),
        2 * g.height(),
        upsample_plane(g.data(), g.width(), g.height(), T::one()),
    )
    .expect("non-zero dims")
}

/// `residual + u(previous)` where `u` is [`upsample_flow2x`].
pub fn compose_residual<T: Scalar>(residual: &FlowField<T>, previous: &FlowField<T>) -> Result<FlowField<T>> {
    let up = upsample_flow2x(previous);
    if !residual.same_grid(up.width(), up.height()) || residual.channels() != up.channels() {
        return Err(Error::domain(format!(
            "residual {}x{}x{} does not match upsampled prior {}x{}x{}",
            residual.width(),
            residual.height(),
            residual.channels(),
            up.width(),
            up.height(),
            up.channels()
        )));
    }
    residual.zip_map(&up, |a, b| a + b)
}

/// Depth-flow analogue of [`compose_residual`].
pub fn compose_depth_residual<T: Scalar>(residual: &Grid<T>, previous: &Grid<T>) -> Result<Grid<T>> {
    let up = upsample_grid2x(previous);
    if residual.width() != up.width() || residual.height() != up.height() {
        return Err(Error::domain("depth residual does not match upsampled prior"));
    }
    Grid::new(
        up.width(),
        up.height(),
        residual.data().iter().zip(up.data()).map(|(&a, &b)| a + b).collect(),
    )
}

/// Depth maps at `num_levels` scales, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePyramid<T> {
    levels: Vec<DepthMap<T>>,
}

impl<T: Scalar> ScalePyramid<T> {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, s: usize) -> &DepthMap<T> {
        &self.levels[s]
    }

    pub fn finest(&self) -> &DepthMap<T> {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn levels(&self) -> &[DepthMap<T>] {
        &self.levels
    }
}

/// Checks that `w` and `h` are divisible by `2^(levels - 1)`.
pub fn check_pyramid_dims(w: usize, h: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::domain("pyramid needs at least one level"));
    }
    let f = 1usize
        .checked_shl(levels as u32 - 1)
        .ok_or_else(|| Error::domain("too many pyramid levels"))?;
    if !w.is_multiple_of(f) || !h.is_multiple_of(f) || w < f || h < f {
        return Err(Error::domain(format!(
            "{w}x{h} is not divisible by {f} for {levels} pyramid levels"
        )));
    }
    Ok(())
}

pub fn build_pyramid<T: Scalar>(z: &DepthMap<T>, levels: usize) -> Result<ScalePyramid<T>> {
    check_pyramid_dims(z.width(), z.height(), levels)?;
    let mut out = vec![z.clone()];
    for _ in 1..levels {
        let next = downsample2x_map(out.last().expect("non-empty"))?;
        out.push(next);
    }
    out.reverse();
    Ok(ScalePyramid { levels: out })
}

/// Ground-truth flow at every level, coarsest first, by repeated
/// [`downsample_flow2x`].
pub fn flow_pyramid<T: Scalar>(f: &FlowField<T>, levels: usize) -> Result<Vec<FlowField<T>>> {
    check_pyramid_dims(f.width(), f.height(), levels)?;
    let mut out = vec![f.clone()];
    for _ in 1..levels {
        let next = downsample_flow2x(out.last().expect("non-empty"))?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Mask pyramid, coarsest first.
pub fn mask_pyramid(mask: &[bool], w: usize, h: usize, levels: usize) -> Result<Vec<Vec<bool>>> {
    check_pyramid_dims(w, h, levels)?;
    let mut out = vec![mask.to_vec()];
    let (mut cw, mut ch) = (w, h);
    for _ in 1..levels {
        let next = downsample_mask(out.last().expect("non-empty"), cw, ch)?;
        cw /= 2;
        ch /= 2;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_pool_examples() {
        let g = Grid::new(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(downsample2x(&g).unwrap().data(), &[2.5]);
        let c = Grid::filled(6, 4, 7.25f64).unwrap();
        assert!(downsample2x(&c).unwrap().data().iter().all(|&v| v == 7.25));
        let ramp = Grid::from_fn(4, 4, |x, _| x as f64).unwrap();
        assert_eq!(downsample2x(&ramp).unwrap().data(), &[0.5, 2.5, 0.5, 2.5]);
        assert!(downsample2x(&Grid::filled(3, 4, 0.0f64).unwrap()).is_err());
    }

    #[test]
    fn pooled_validity() {
        let mut valid = vec![true; 16];
        valid[5] = false;
        let z = DepthMap::new(4, 4, vec![1.0f32; 16], valid).unwrap();
        let d = downsample2x_map(&z).unwrap();
        assert_eq!(d.valid(), &[false, true, true, true]);
    }

    #[test]
    fn pyramid_levels() {
        let z = DepthMap::from_values(512, 512, vec![0.0f32; 512 * 512]).unwrap();
        let p = build_pyramid(&z, 4).unwrap();
        let sizes: Vec<usize> = p.levels().iter().map(|l| l.width()).collect();
        assert_eq!(sizes, [64, 128, 256, 512]);
        assert_eq!(build_pyramid(&z, 1).unwrap().levels(), std::slice::from_ref(&z));
        let odd = DepthMap::from_values(100, 100, vec![0.0f32; 10000]).unwrap();
        assert!(matches!(build_pyramid(&odd, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_flow_upsampling() {
        let f = FlowField::constant(64, 64, &[1.0f32, 0.0]).unwrap();
        let up = upsample_flow2x(&f);
        assert_eq!((up.width(), up.height()), (128, 128));
        assert!(up.channel(0).iter().all(|&v| v == 2.0));
        assert!(up.channel(1).iter().all(|&v| v == 0.0));
        let z = FlowField::<f32>::zeros(5, 3, 2).unwrap();
        assert!(upsample_flow2x(&z).data().iter().all(|&v| v == 0.0));
        let v3 = FlowField::constant(4, 4, &[1.0f32, -1.0, 3.0]).unwrap();
        let up3 = upsample_flow2x(&v3);
        assert!(up3.channel(2).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn down_then_up_constant_is_exact() {
        let f = FlowField::constant(16, 8, &[1.5f32, -0.75, 2.0]).unwrap();
        let back = upsample_flow2x(&downsample_flow2x(&f).unwrap());
        assert_eq!(back, f);
    }

    #[test]
    fn chained_composition_with_zero_residuals() {
        let mut v = FlowField::constant(8, 8, &[1.0f32, 0.0]).unwrap();
        for _ in 1..4 {
            let r = FlowField::zeros(v.width() * 2, v.height() * 2, 2).unwrap();
            v = compose_residual(&r, &v).unwrap();
        }
        assert_eq!((v.width(), v.height()), (64, 64));
        assert!(v.channel(0).iter().all(|&x| x == 8.0));
        assert!(v.channel(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn residual_examples() {
        let prev = FlowField::constant(2, 2, &[1.0f32, 0.0]).unwrap();
        let r = FlowField::constant(4, 4, &[1.0f32, 1.0]).unwrap();
        let out = compose_residual(&r, &prev).unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 3.0));
        assert!(out.channel(1).iter().all(|&v| v == 1.0));
        let zero = FlowField::<f32>::zeros(2, 2, 2).unwrap();
        assert_eq!(compose_residual(&r, &zero).unwrap(), r);
        assert!(compose_residual(&FlowField::zeros(3, 4, 2).unwrap(), &zero).is_err());
    }

    #[test]
    fn gt_pyramid_matches_affine_field() {
        // a linear field sampled on the fine grid pools to the same linear
        // field on the coarse grid (coarse pixel i sits at fine 2i + 0.5)
        let fine = FlowField::from_fn(16, 16, 2, |x, y, c| {
            if c == 0 { 0.1 * x as f64 - 0.05 * y as f64 + 3.0 } else { 0.02 * x as f64 + 1.0 }
        })
        .unwrap();
        let coarse = downsample_flow2x(&fine).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let (fx, fy) = (2.0 * x as f64 + 0.5, 2.0 * y as f64 + 0.5);
                let expect0 = (0.1 * fx - 0.05 * fy + 3.0) / 2.0;
                let expect1 = (0.02 * fx + 1.0) / 2.0;
                assert!((coarse.get(x, y, 0) - expect0).abs() < 1e-12);
                assert!((coarse.get(x, y, 1) - expect1).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn residual_linearity(a in -8.0f64..8.0, b in -8.0f64..8.0, c in -8.0f64..8.0) {
            let q = |v: f64| (v * 16.0).round() / 16.0;
            let prev = FlowField::from_fn(3, 3, 2, |x, y, k| q(a) * x as f64 + q(c) * (y + k) as f64).unwrap();
            let ra = FlowField::from_fn(6, 6, 2, |x, y, k| q(b) * (x * y + k) as f64).unwrap();
            let rb = FlowField::from_fn(6, 6, 2, |x, y, _| q(c) - x as f64 + y as f64).unwrap();
            let sum = ra.zip_map(&rb, |p, q| p + q).unwrap();
            let lhs = compose_residual(&sum, &prev).unwrap();
            let rhs = compose_residual(&ra, &prev).unwrap().zip_map(&rb, |p, q| p + q).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }

        #[test]
        fn pooling_preserves_mean(vals in prop::collection::vec(-100.0f64..100.0, 64)) {
            let g = Grid::new(8, 8, vals).unwrap();
            let d = downsample2x(&g).unwrap();
            let m0: f64 = g.data().iter().sum::<f64>() / 64.0;
            let m1: f64 = d.data().iter().sum::<f64>() / 16.0;
            prop_assert!((m0 - m1).abs() < 1e-9);
        }
    }
}
