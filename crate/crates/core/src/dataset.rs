//! Semi-synthetic pairs: procedural base depth maps moved by random rigid
//! in-plane motions with exact ground-truth 2.5D flow.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{read_depth_map, read_flow, write_depth_map, write_flow, DepthMap, FlowField};
use crate::scalar::Scalar;
use crate::stream_seed;
use crate::warp::sample_bilinear;

/// Depth values span `[0, DEPTH_RANGE]` voxels.
pub const DEPTH_RANGE: f64 = 511.0;
/// Pairs whose target overlaps the source on less than this fraction are
/// resampled.
pub const MIN_OVERLAP: f64 = 0.25;
pub const MAX_RETRIES: u32 = 10;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub translation_sigma_vox: f64,
    pub rotation_sigma_rad: f64,
    pub depth_translation_sigma_vox: f64,
    /// Noise standard deviation as a fraction of [`DEPTH_RANGE`].
    pub noise_sigma: f64,
    pub pairs_per_base: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            translation_sigma_vox: 0.15 * 512.0,
            rotation_sigma_rad: 0.25,
            depth_translation_sigma_vox: 0.15 * 512.0,
            noise_sigma: 0.1,
            pairs_per_base: 1024,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("translation_sigma_vox", self.translation_sigma_vox),
            ("rotation_sigma_rad", self.rotation_sigma_rad),
            ("depth_translation_sigma_vox", self.depth_translation_sigma_vox),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.pairs_per_base == 0 {
            return Err(Error::config("pairs_per_base must be >= 1"));
        }
        Ok(())
    }
}

/// Shape parameters of [`generate_base_map`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseMapParams {
    pub gaussians: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Peak amplitude as a fraction of [`DEPTH_RANGE`].
    pub amplitude: f64,
    pub steps_min: usize,
    pub steps_max: usize,
    pub step_height_min: f64,
    pub step_height_max: f64,
    /// Plane offset; drawn from the middle of the range when unset.
    pub base_level: Option<f64>,
    /// Largest plane slope in voxels per pixel.
    pub max_slope: f64,
}

impl Default for BaseMapParams {
    fn default() -> Self {
        Self {
            gaussians: 30,
            radius_min: 8.0,
            radius_max: 64.0,
            amplitude: 0.2,
            steps_min: 2,
            steps_max: 5,
            step_height_min: 10.0,
            step_height_max: 40.0,
            base_level: None,
            max_slope: 0.3,
        }
    }
}

impl BaseMapParams {
    /// Flat map at `level` with no features.
    pub fn flat(level: f64) -> Self {
        Self {
            gaussians: 0,
            steps_min: 0,
            steps_max: 0,
            base_level: Some(level),
            max_slope: 0.0,
            ..Self::default()
        }
    }
}

/// Sloped plane plus random Gaussian bumps plus hard step edges, clipped to
/// `[0, DEPTH_RANGE]`.
pub fn generate_base_map<T: Scalar>(width: usize, height: usize, seed: u64, p: &BaseMapParams) -> Result<DepthMap<T>> {
    if width < 3 || height < 3 {
        return Err(Error::domain(format!("base maps need at least 3x3, got {width}x{height}")));
    }
    if p.radius_min <= 0.0 || p.radius_max < p.radius_min || p.steps_max < p.steps_min {
        return Err(Error::config("inconsistent base map parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0xBA5E]));
    let (w, h) = (width as f64, height as f64);
    let level = p
        .base_level
        .unwrap_or_else(|| rng.random_range(0.35 * DEPTH_RANGE..0.65 * DEPTH_RANGE));
    let slope = if p.max_slope > 0.0 {
        (rng.random_range(-p.max_slope..=p.max_slope), rng.random_range(-p.max_slope..=p.max_slope))
    } else {
        (0.0, 0.0)
    };
    let amp = p.amplitude * DEPTH_RANGE;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..p.gaussians)
        .map(|_| {
            (
                rng.random_range(0.0..w),
                rng.random_range(0.0..h),
                rng.random_range(p.radius_min..=p.radius_max),
                rng.random_range(-amp..=amp),
            )
        })
        .collect();
    let n_steps = rng.random_range(p.steps_min..=p.steps_max);
    let steps: Vec<(f64, f64, f64, f64)> = (0..n_steps)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let height = rng.random_range(p.step_height_min..=p.step_height_max);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (rng.random_range(0.0..w), rng.random_range(0.0..h), angle, sign * height)
        })
        .collect();
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let raw: Vec<f64> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            let mut z = slope.0 * (x - cx) + slope.1 * (y - cy);
            for &(bx, by, r, a) in &bumps {
                let d2 = (x - bx).powi(2) + (y - by).powi(2);
                z += a * (-d2 / (2.0 * r * r)).exp();
            }
            for &(sx, sy, angle, height) in &steps {
                if (x - sx) * angle.cos() + (y - sy) * angle.sin() > 0.0 {
                    z += height;
                }
            }
            z
        })
        .collect();
    // centre the surface's range on the base level so clipping stays rare
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &z| (l.min(z), h.max(z)));
    let shift = level - (lo + hi) / 2.0;
    let values: Vec<T> = raw.iter().map(|&z| T::of((z + shift).clamp(0.0, DEPTH_RANGE))).collect();
    DepthMap::from_values(width, height, values)
}

/// Rigid in-plane motion about the image center plus a depth offset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineParams {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub omega: f64,
}

impl AffineParams {
    /// `A(q) = R(q - c) + c + t` for center `c`.
    pub fn apply(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.omega.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (c * dx - s * dy + cx + self.tx, s * dx + c * dy + cy + self.ty)
    }

    /// `A^-1(p) = R^T(p - c - t) + c`.
    pub fn invert(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.omega.sin_cos();
        let (dx, dy) = (x - cx - self.tx, y - cy - self.ty);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    }

    /// Fraction of a stride-4 lattice whose preimage lies inside the image.
    pub fn overlap(&self, w: usize, h: usize) -> f64 {
        let (mut inside, mut total) = (0usize, 0usize);
        for y in (0..h).step_by(4) {
            for x in (0..w).step_by(4) {
                let (sx, sy) = self.invert(x as f64, y as f64, w, h);
                total += 1;
                if (0.0..=(w - 1) as f64).contains(&sx) && (0.0..=(h - 1) as f64).contains(&sy) {
                    inside += 1;
                }
            }
        }
        inside as f64 / total as f64
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("validated sigma")
}

/// Independent zero-mean Gaussian translations and rotation.
pub fn sample_affine(cfg: &AugmentConfig, rng: &mut impl Rng) -> AffineParams {
    let t = normal(cfg.translation_sigma_vox);
    AffineParams {
        tx: t.sample(rng),
        ty: t.sample(rng),
        tz: normal(cfg.depth_translation_sigma_vox).sample(rng),
        omega: normal(cfg.rotation_sigma_rad).sample(rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair<T> {
    pub first: DepthMap<T>,
    pub second: DepthMap<T>,
    /// `(Δx, Δy, Δz)` on the grid of `second`; meaningful where `second` is valid.
    pub flow: FlowField<T>,
}

/// Moves `base` by `params` and adds Gaussian noise of standard deviation
/// `noise_sigma * DEPTH_RANGE` to the valid target pixels.
pub fn synthesize_pair<T: Scalar>(
    base: &DepthMap<T>,
    params: &AffineParams,
    noise_sigma: f64,
    noise_seed: u64,
) -> Result<SyntheticPair<T>> {
    let (w, h) = (base.width(), base.height());
    let n = w * h;
    let noise = normal(noise_sigma * DEPTH_RANGE);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut values = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut flow = vec![T::zero(); 3 * n];
    for i in 0..n {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let (sx, sy) = params.invert(x, y, w, h);
        flow[i] = T::of(x - sx);
        flow[n + i] = T::of(y - sy);
        flow[2 * n + i] = T::of(params.tz);
        match sample_bilinear(base.values(), Some(base.valid()), w, h, T::of(sx), T::of(sy)) {
            Some(v) => {
                let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                values.push(v + T::of(params.tz + eps));
                valid.push(true);
            }
            None => {
                values.push(T::zero());
                valid.push(false);
            }
        }
    }
    Ok(SyntheticPair {
        first: base.clone(),
        second: DepthMap::new(w, h, values, valid)?,
        flow: FlowField::new(w, h, 3, flow)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// The last base is test, the one before it validation, the rest train.
    pub fn for_base(base: usize, num_bases: usize) -> Split {
        if base + 1 == num_bases {
            Split::Test
        } else if base + 2 == num_bases {
            Split::Val
        } else {
            Split::Train
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: usize,
    pub base: usize,
    pub split: Split,
    pub source: String,
    pub target: String,
    pub flow: String,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub omega: f64,
    pub noise_seed: u64,
    /// Low-overlap draws rejected before this one.
    pub retries: u32,
}

impl PairRecord {
    pub fn params(&self) -> AffineParams {
        AffineParams {
            tx: self.tx,
            ty: self.ty,
            tz: self.tz,
            omega: self.omega,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Fails if a base id appears under more than one split.
    pub fn check_hygiene(&self) -> Result<()> {
        let mut seen: std::collections::HashMap<usize, Split> = std::collections::HashMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert(r.base, r.split) {
                if prev != r.split {
                    return Err(Error::format(format!(
                        "base {} appears in both {} and {}",
                        r.base,
                        prev.name(),
                        r.split.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format(e.to_string()))
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes());
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<PairRecord>, _>>()
            .map_err(|e| Error::format(format!("manifest: {e}")))?;
        let m = Self { records };
        m.check_hygiene()?;
        Ok(m)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, self.to_tsv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_tsv(&text)
    }
}

fn base_file(b: usize) -> String {
    format!("base_{b}.zmap")
}

/// Draws motion parameters for every pair without synthesizing anything.
/// Each pair's stream depends only on `(seed, base, pair)`.
pub fn plan_dataset(num_bases: usize, width: usize, height: usize, cfg: &AugmentConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    if num_bases < 3 {
        return Err(Error::config(format!(
            "need at least 3 bases (train, val, test), got {num_bases}"
        )));
    }
    let per = cfg.pairs_per_base;
    let records = (0..num_bases * per)
        .into_par_iter()
        .map(|id| {
            let (base, k) = (id / per, id % per);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, base as u64, k as u64]));
            let mut params = sample_affine(cfg, &mut rng);
            let mut retries = 0;
            while params.overlap(width, height) < MIN_OVERLAP && retries < MAX_RETRIES {
                params = sample_affine(cfg, &mut rng);
                retries += 1;
            }
            PairRecord {
                id,
                base,
                split: Split::for_base(base, num_bases),
                source: base_file(base),
                target: format!("pair_{id:06}_target.zmap"),
                flow: format!("pair_{id:06}_flow.sf25"),
                tx: params.tx,
                ty: params.ty,
                tz: params.tz,
                omega: params.omega,
                noise_seed: rng.random(),
                retries,
            }
        })
        .collect();
    let m = DatasetManifest { records };
    m.check_hygiene()?;
    Ok(m)
}

/// Plans, synthesizes and writes a dataset into `dir`, which must exist.
pub fn build_dataset(bases: &[DepthMap<f64>], cfg: &AugmentConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let first = bases.first().ok_or_else(|| Error::config("no base maps"))?;
    let (w, h) = (first.width(), first.height());
    if bases.iter().any(|b| b.width() != w || b.height() != h) {
        return Err(Error::config("base maps differ in size"));
    }
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let manifest = plan_dataset(bases.len(), w, h, cfg)?;
    for (b, base) in bases.iter().enumerate() {
        write_depth_map(dir.join(base_file(b)), &base.cast::<f32>())?;
    }
    manifest.records.par_iter().try_for_each(|r| -> Result<()> {
        let pair = synthesize_pair(&bases[r.base], &r.params(), cfg.noise_sigma, r.noise_seed)?;
        write_depth_map(dir.join(&r.target), &pair.second.cast::<f32>())?;
        write_flow(dir.join(&r.flow), &pair.flow.cast::<f32>())
    })?;
    manifest.write(dir)?;
    let cfg_path = dir.join("augment.toml");
    let text = toml::to_string(cfg).map_err(|e| Error::format(e.to_string()))?;
    fs::write(&cfg_path, text).map_err(|e| Error::io(cfg_path, e))?;
    Ok(manifest)
}

/// Reads one pair's source, target and ground truth.
pub fn load_pair<T: Scalar>(dir: impl AsRef<Path>, r: &PairRecord) -> Result<SyntheticPair<T>> {
    let dir = dir.as_ref();
    let first: DepthMap<f32> = read_depth_map(dir.join(&r.source))?;
    let second: DepthMap<f32> = read_depth_map(dir.join(&r.target))?;
    let flow: FlowField<f32> = read_flow(dir.join(&r.flow))?;
    if first.width() != second.width() || !flow.same_grid(second.width(), second.height()) {
        return Err(Error::format(format!("pair {} has inconsistent extents", r.id)));
    }
    Ok(SyntheticPair {
        first: first.cast(),
        second: second.cast(),
        flow: flow.cast(),
    })
}

/// `n` base maps with consecutive seeds.
pub fn generate_bases<T: Scalar>(n: usize, width: usize, height: usize, seed: u64, p: &BaseMapParams) -> Result<Vec<DepthMap<T>>> {
    (0..n)
        .map(|b| generate_base_map(width, height, stream_seed(&[seed, b as u64]), p))
        .collect()
}
