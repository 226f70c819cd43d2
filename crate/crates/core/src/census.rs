//! 3×3 census transform over depth maps.
//!
//! Bit `i` (bit 0 = most significant) is set when neighbor `i` is strictly
//! smaller than the center, with neighbors enumerated row-major:
//! NW, N, NE, W, E, SW, S, SE. Equal values produce 0.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{CensusMap, DepthMap, Grid, Planes};
use crate::scalar::Scalar;

/// Neighbor offsets in bit order.
pub const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Sentinel returned by [`hamming_distance_map`] where either input is invalid.
pub const HAMMING_INVALID: i8 = -1;

pub fn census_transform<T: Scalar>(z: &DepthMap<T>) -> Result<CensusMap> {
    let (w, h) = (z.width(), z.height());
    if w < 3 || h < 3 {
        return Err(Error::domain(format!(
            "census transform needs at least 3x3, got {w}x{h}"
        )));
    }
    let values = z.values();
    let valid = z.valid();
    let (codes, mask): (Vec<u8>, Vec<bool>) = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                return (0, false);
            }
            let center = values[i];
            let mut code = 0u8;
            for (bit, (dx, dy)) in NEIGHBORS.iter().enumerate() {
                let j = (y as isize + dy) as usize * w + (x as isize + dx) as usize;
                if !valid[j] {
                    return (0, false);
                }
                if values[j] < center {
                    code |= 0x80 >> bit;
                }
            }
            if valid[i] {
                (code, true)
            } else {
                (0, false)
            }
        })
        .unzip();
    CensusMap::new(w, h, codes, mask)
}

/// Unpacks codes into 8 binary planes (plane `i` holds bit `i`).
pub fn census_channels<T: Scalar>(c: &CensusMap) -> Planes<T> {
    let n = c.width() * c.height();
    let mut data = vec![T::zero(); 8 * n];
    for (i, (&code, &ok)) in c.codes().iter().zip(c.valid()).enumerate() {
        if !ok {
            continue;
        }
        for bit in 0..8 {
            if code & (0x80 >> bit) != 0 {
                data[bit * n + i] = T::one();
            }
        }
    }
    Planes::new(c.width(), c.height(), 8, data).expect("census dimensions already validated")
}

/// Repacks binary planes (values > 0.5 count as set) into codes. Pixels are
/// marked valid according to `valid`.
pub fn pack_channels<T: Scalar>(planes: &Planes<T>, valid: &[bool]) -> Result<CensusMap> {
    if planes.channels() != 8 {
        return Err(Error::domain("census planes need 8 channels"));
    }
    let n = planes.width() * planes.height();
    let half = T::of(0.5);
    let codes = (0..n)
        .map(|i| {
            (0..8).fold(0u8, |acc, bit| {
                if valid[i] && planes.plane(bit)[i] > half {
                    acc | (0x80 >> bit)
                } else {
                    acc
                }
            })
        })
        .collect();
    CensusMap::new(planes.width(), planes.height(), codes, valid.to_vec())
}

/// Per-pixel Hamming distance; [`HAMMING_INVALID`] where either map is invalid.
pub fn hamming_distance_map(a: &CensusMap, b: &CensusMap) -> Result<Grid<f32>> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::domain(format!(
            "census maps differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let data = a
        .codes()
        .iter()
        .zip(b.codes())
        .zip(a.valid().iter().zip(b.valid()))
        .map(|((&ca, &cb), (&va, &vb))| {
            if va && vb {
                (ca ^ cb).count_ones() as f32
            } else {
                HAMMING_INVALID as f32
            }
        })
        .collect();
    Grid::new(a.width(), a.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: usize, h: usize, vals: &[f64]) -> DepthMap<f64> {
        DepthMap::from_values(w, h, vals.to_vec()).unwrap()
    }

    fn single_code(code: u8) -> CensusMap {
        CensusMap::new(1, 1, vec![code], vec![true]).unwrap()
    }

    #[test]
    fn ramp_patch_code() {
        let c = census_transform(&map(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.])).unwrap();
        assert_eq!(c.code(1, 1), 0xF0);
        assert!(c.is_valid(1, 1));
        assert!(!c.is_valid(0, 0));
        assert_eq!(c.code(0, 0), 0);
    }

    #[test]
    fn constant_patch_is_zero() {
        let c = census_transform(&map(3, 3, &[4.0; 9])).unwrap();
        assert_eq!(c.code(1, 1), 0);
    }

    #[test]
    fn too_small() {
        assert!(matches!(
            census_transform(&map(2, 3, &[0.0; 6])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn invalid_neighbor_invalidates_window() {
        let mut valid = vec![true; 16];
        valid[0] = false;
        let z = DepthMap::new(4, 4, (0..16).map(f64::from).collect(), valid).unwrap();
        let c = census_transform(&z).unwrap();
        assert!(!c.is_valid(1, 1));
        assert!(c.is_valid(2, 2));
    }

    #[test]
    fn channels_unpack_and_repack() {
        let c = CensusMap::new(3, 1, vec![0xF0, 0x00, 0x5A], vec![true, true, false]).unwrap();
        let p = census_channels::<f32>(&c);
        let bits: Vec<f32> = (0..8).map(|b| p.get(0, 0, b)).collect();
        assert_eq!(bits, [1., 1., 1., 1., 0., 0., 0., 0.]);
        assert!((0..8).all(|b| p.get(1, 0, b) == 0.0));
        assert!((0..8).all(|b| p.get(2, 0, b) == 0.0));
        let back = pack_channels(&p, c.valid()).unwrap();
        assert_eq!(back.codes()[..2], c.codes()[..2]);
    }

    #[test]
    fn hamming_examples() {
        let d = |a, b| hamming_distance_map(&single_code(a), &single_code(b)).unwrap().get(0, 0);
        assert_eq!(d(0xF0, 0x0F), 8.0);
        assert_eq!(d(0xF0, 0xF1), 1.0);
        assert_eq!(d(0x3C, 0x3C), 0.0);
        let invalid = CensusMap::new(1, 1, vec![0], vec![false]).unwrap();
        assert_eq!(
            hamming_distance_map(&invalid, &single_code(1)).unwrap().get(0, 0),
            -1.0
        );
        let big = CensusMap::new(2, 1, vec![0, 0], vec![true, true]).unwrap();
        assert!(hamming_distance_map(&big, &single_code(0)).is_err());
    }

    #[test]
    fn hamming_is_a_metric_over_all_codes() {
        let d = |a: u8, b: u8| (a ^ b).count_ones();
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(d(a, b), d(b, a));
                assert_eq!(d(a, b) == 0, a == b);
                // triangle inequality over a sparse third code sweep
                for c in (0..=255u8).step_by(17) {
                    assert!(d(a, b) <= d(a, c) + d(c, b));
                }
            }
        }
        let a = CensusMap::new(2, 2, vec![1, 2, 3, 4], vec![true; 4]).unwrap();
        let g = hamming_distance_map(&a, &a).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn offset_and_monotone_invariance(
            w in 3usize..12, h in 3usize..12, vals in prop::collection::vec(-50i32..50, 144), c in -1000.0f64..1000.0
        ) {
            let z = DepthMap::from_values(w, h, vals[..w * h].iter().map(|&v| v as f64).collect()).unwrap();
            let base = census_transform(&z).unwrap();
            prop_assert_eq!(&census_transform(&z.offset(c)).unwrap(), &base);
            prop_assert_eq!(&census_transform(&z.map_values(|v| v * v * v + 3.0 * v)).unwrap(), &base);
        }
    }
}
