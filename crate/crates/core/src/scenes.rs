//! Procedural scenes with exact depth, disparity and normals.
//!
//! Orthographic camera looking down `+depth`. Lateral world coordinates are
//! `X = (col + 0.5) * pixel_size`, `Y = (row + 0.5) * pixel_size`, and a visible
//! surface `d(X, Y)` has normal `normalize(dd/dX, dd/dY, 1)`, with `+z`
//! pointing back at the camera.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pfm, Grid, RandomSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Depth 1..10, many small primitives.
    AIndoorLike,
    /// Depth 1..80 with a ground plane, masked sky and thin poles.
    BOutdoorLike,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::AIndoorLike, Domain::BOutdoorLike];

    /// Depth range covered by scenes of this domain.
    pub fn depth_range(self) -> (f64, f64) {
        match self {
            Domain::AIndoorLike => (1.0, 10.0),
            Domain::BOutdoorLike => (1.0, 80.0),
        }
    }

    pub fn world_width(self) -> f64 {
        match self {
            Domain::AIndoorLike => 8.0,
            Domain::BOutdoorLike => 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailLevel {
    Plain,
    /// Adds high-frequency albedo textures and painted thin bars. Geometry is
    /// unchanged.
    DetailRich,
}

/// Global depth clamp, mirroring an 80 m far plane.
pub const DEPTH_MIN: f64 = 1.0;
pub const DEPTH_MAX: f64 = 80.0;

/// One rendered scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Shaded rendering, 3 channels in `[0, 1]`.
    pub image: Grid,
    pub depth: Grid,
    pub disparity: Grid,
    /// Unit normals, 3 channels.
    pub normals: Grid,
    /// 1 where ground truth is valid, 0 on sky.
    pub mask: Grid,
    pub domain: Domain,
    pub detail_level: DetailLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Axis-aligned box seen face-on: a fronto-parallel rectangle.
    Box { x0: f64, x1: f64, y0: f64, y1: f64, depth: f64, albedo: [f64; 3] },
    Sphere {
        cx: f64,
        cy: f64,
        radius: f64,
        /// Depth of the centre.
        dc: f64,
        albedo: [f64; 3],
    },
}

impl Primitive {
    /// Depth and normal where the ray through `(x, y)` hits, if it does.
    fn hit(&self, x: f64, y: f64) -> Option<(f64, [f64; 3])> {
        match *self {
            Primitive::Box { x0, x1, y0, y1, depth, .. } => {
                (x >= x0 && x < x1 && y >= y0 && y < y1).then_some((depth, [0.0, 0.0, 1.0]))
            }
            Primitive::Sphere { cx, cy, radius, dc, .. } => {
                let (dx, dy) = (x - cx, y - cy);
                let rho2 = dx * dx + dy * dy;
                if rho2 >= radius * radius {
                    return None;
                }
                let h = (radius * radius - rho2).sqrt();
                Some((dc - h, [dx / radius, dy / radius, h / radius]))
            }
        }
    }

    fn albedo(&self) -> [f64; 3] {
        match *self {
            Primitive::Box { albedo, .. } | Primitive::Sphere { albedo, .. } => albedo,
        }
    }
}

/// Background: a tilted plane `d = base + slope_x (X - Xc) + slope_y (Y - Yc)`
/// below `sky_rows` masked-out rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    pub sky_rows: usize,
    pub albedo: [f64; 3],
}

/// Everything geometric about a scene, plus lighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub pixel_size: f64,
    pub background: Background,
    pub primitives: Vec<Primitive>,
    /// Unit vector towards the light.
    pub light: [f64; 3],
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("scenes need h, w >= 16, got {h}x{w}")));
    }
    Ok(())
}

fn albedo(r: &mut impl Rng) -> [f64; 3] {
    [r.random_range(0.25..0.95), r.random_range(0.25..0.95), r.random_range(0.25..0.95)]
}

/// Random layout for `domain`, drawn only from `rng`.
pub fn sample_layout(domain: Domain, rng: RandomSource, h: usize, w: usize) -> Result<SceneLayout> {
    check_size(h, w)?;
    let mut r = rng.rng();
    let px = domain.world_width() / w as f64;
    let (ww, wh) = (w as f64 * px, h as f64 * px);
    let light = unit([r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), 1.0]);
    let mut primitives = Vec::new();

    let background = match domain {
        Domain::AIndoorLike => {
            // keep |slope_x| ww/2 + |slope_y| wh/2 <= 1.4 so the wall stays in 6..10
            let sx = r.random_range(-0.7..0.7) * 2.0 / ww;
            let sy = r.random_range(-0.7..0.7) * 2.0 / wh;
            let bg = Background {
                base: r.random_range(7.5..8.5),
                slope_x: sx,
                slope_y: sy,
                sky_rows: 0,
                albedo: albedo(&mut r),
            };
            let count = r.random_range(3..=10);
            for _ in 0..count {
                let a = albedo(&mut r);
                if r.random_bool(0.5) {
                    let radius = r.random_range(0.4..1.5);
                    primitives.push(Primitive::Sphere {
                        cx: r.random_range(0.0..ww),
                        cy: r.random_range(0.0..wh),
                        radius,
                        dc: r.random_range(1.2 + radius..6.0),
                        albedo: a,
                    });
                } else {
                    let (bw, bh) = (r.random_range(0.6..2.5), r.random_range(0.6..2.5));
                    let (x0, y0) = (r.random_range(-0.5..ww - 0.5), r.random_range(-0.5..wh - 0.5));
                    primitives.push(Primitive::Box {
                        x0,
                        x1: x0 + bw,
                        y0,
                        y1: y0 + bh,
                        depth: r.random_range(1.5..6.0),
                        albedo: a,
                    });
                }
            }
            bg
        }
        Domain::BOutdoorLike => {
            let sky_rows = ((h as f64) * r.random_range(0.2..0.35)) as usize;
            let horizon = sky_rows as f64 * px;
            let (far, near) = (r.random_range(60.0..76.0), r.random_range(3.0..8.0));
            // ground plane falling from `far` at the horizon to `near` at the bottom
            let sy = (near - far) / (wh - horizon);
            let sx = r.random_range(-0.05..0.05);
            let yc = wh / 2.0;
            let base = far + sy * (yc - horizon);
            let bg = Background { base, slope_x: sx, slope_y: sy, sky_rows, albedo: albedo(&mut r) };
            let poles = r.random_range(1..=2);
            let big = r.random_range(2..=4);
            for _ in 0..big {
                let a = albedo(&mut r);
                let depth = r.random_range(8.0..40.0);
                if r.random_bool(0.5) {
                    let radius = r.random_range(3.0..8.0);
                    primitives.push(Primitive::Sphere {
                        cx: r.random_range(0.0..ww),
                        cy: r.random_range(horizon..wh),
                        radius,
                        dc: depth + radius,
                        albedo: a,
                    });
                } else {
                    let (bw, bh) = (r.random_range(5.0..15.0), r.random_range(4.0..12.0));
                    let x0 = r.random_range(-2.0..ww - 2.0);
                    let y1 = r.random_range(horizon + bh * 0.5..wh + 2.0);
                    primitives.push(Primitive::Box { x0, x1: x0 + bw, y0: y1 - bh, y1, depth, albedo: a });
                }
            }
            for _ in 0..poles {
                let bw = px * r.random_range(1..=2) as f64;
                let x0 = (r.random_range(2..w - 3) as f64) * px;
                let y0 = r.random_range(0.0..horizon + 2.0 * px);
                let y1 = r.random_range(wh * 0.6..wh);
                primitives.push(Primitive::Box {
                    x0,
                    x1: x0 + bw,
                    y0,
                    y1,
                    depth: r.random_range(5.0..40.0),
                    albedo: [0.3, 0.3, 0.32],
                });
            }
            bg
        }
    };

    Ok(SceneLayout { domain, height: h, width: w, pixel_size: px, background, primitives, light })
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    None,
    Checker { period: usize, low: f64 },
    Stripes { period: usize, vertical: bool, low: f64 },
}

impl Texture {
    fn factor(self, row: usize, col: usize) -> f64 {
        match self {
            Texture::None => 1.0,
            Texture::Checker { period, low } => {
                if (row / period + col / period).is_multiple_of(2) {
                    1.0
                } else {
                    low
                }
            }
            Texture::Stripes { period, vertical, low } => {
                let k = if vertical { col } else { row };
                if (k / period) % 2 == 0 {
                    1.0
                } else {
                    low
                }
            }
        }
    }

    fn draw(r: &mut impl Rng) -> Texture {
        let low = r.random_range(0.35..0.7);
        match r.random_range(0..3) {
            0 => Texture::None,
            1 => Texture::Checker { period: r.random_range(1..=2), low },
            _ => Texture::Stripes { period: r.random_range(1..=2), vertical: r.random_bool(0.5), low },
        }
    }
}

/// Thin painted bar: a 1-2 pixel wide line of darkened albedo.
#[derive(Debug, Clone, Copy)]
struct PaintedBar {
    vertical: bool,
    at: usize,
    thickness: usize,
    from: usize,
    to: usize,
}

impl PaintedBar {
    fn covers(&self, row: usize, col: usize) -> bool {
        let (along, across) = if self.vertical { (row, col) } else { (col, row) };
        across >= self.at && across < self.at + self.thickness && along >= self.from && along < self.to
    }
}

/// Rasterizes `layout`. Detail-rich texturing draws only from `texture_rng`.
pub fn render(layout: &SceneLayout, detail: DetailLevel, texture_rng: RandomSource) -> Result<Sample> {
    let (h, w) = (layout.height, layout.width);
    check_size(h, w)?;
    let px = layout.pixel_size;
    let bg = layout.background;
    let (xc, yc) = (w as f64 * px / 2.0, h as f64 * px / 2.0);
    let (_, far) = layout.domain.depth_range();

    let (textures, bars) = match detail {
        DetailLevel::Plain => (vec![Texture::None; layout.primitives.len() + 1], Vec::new()),
        DetailLevel::DetailRich => {
            let mut r = texture_rng.rng();
            let textures = (0..=layout.primitives.len()).map(|_| Texture::draw(&mut r)).collect();
            let n = r.random_range(2..=4);
            let bars = (0..n)
                .map(|_| {
                    let vertical = r.random_bool(0.5);
                    let (along, across) = if vertical { (h, w) } else { (w, h) };
                    let from = r.random_range(0..along / 2);
                    PaintedBar {
                        vertical,
                        at: r.random_range(0..across - 2),
                        thickness: r.random_range(1..=2),
                        from,
                        to: r.random_range(from + along / 4..=along),
                    }
                })
                .collect();
            (textures, bars)
        }
    };

    let mut image = Grid::zeros(h, w, 3);
    let mut depth = Grid::zeros(h, w, 1);
    let mut normals = Grid::zeros(h, w, 3);
    let mut mask = Grid::zeros(h, w, 1);
    let bg_normal = unit([bg.slope_x, bg.slope_y, 1.0]);

    for row in 0..h {
        for col in 0..w {
            let (x, y) = ((col as f64 + 0.5) * px, (row as f64 + 0.5) * px);
            if row < bg.sky_rows {
                depth.set(row, col, 0, far);
                normals.set(row, col, 2, 1.0);
                let t = row as f64 / bg.sky_rows.max(1) as f64;
                let sky = [0.5 + 0.1 * t, 0.65 + 0.1 * t, 0.9];
                for (c, v) in sky.iter().enumerate() {
                    image.set(row, col, c, *v);
                }
                continue;
            }
            let mut best = (bg.base + bg.slope_x * (x - xc) + bg.slope_y * (y - yc), bg_normal, bg.albedo, 0usize);
            for (i, p) in layout.primitives.iter().enumerate() {
                if let Some((d, n)) = p.hit(x, y) {
                    if d < best.0 {
                        best = (d, n, p.albedo(), i + 1);
                    }
                }
            }
            let (d, n, a, id) = best;
            depth.set(row, col, 0, d);
            mask.set(row, col, 0, 1.0);
            for c in 0..3 {
                normals.set(row, col, c, n[c]);
            }
            let mut tex = textures[id].factor(row, col);
            if bars.iter().any(|b| b.covers(row, col)) {
                tex *= 0.25;
            }
            let l = layout.light;
            let lambert = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
            let shade = 0.2 + 0.8 * lambert;
            for c in 0..3 {
                image.set(row, col, c, (a[c] * tex * shade).clamp(0.0, 1.0));
            }
        }
    }
    let disparity = to_disparity(&depth, Some(&mask), DEPTH_MIN, DEPTH_MAX)?;
    Ok(Sample { image, depth, disparity, normals, mask, domain: layout.domain, detail_level: detail })
}

/// One scene. Geometry and lighting come from `rng`'s "geometry" stream and
/// textures from its "texture" stream, so both detail levels of a seed share
/// their ground truth.
pub fn gen_scene(domain: Domain, detail: DetailLevel, rng: RandomSource, h: usize, w: usize) -> Result<Sample> {
    let layout = sample_layout(domain, rng.derive_named("geometry"), h, w)?;
    render(&layout, detail, rng.derive_named("texture"))
}

/// Clamps depth into `[d_min, d_max]` and inverts it.
pub fn to_disparity(depth: &Grid, mask: Option<&Grid>, d_min: f64, d_max: f64) -> Result<Grid> {
    depth.ensure_channels(1, "to_disparity")?;
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(Error::InvalidArgument(format!("need 0 < d_min < d_max, got {d_min}, {d_max}")));
    }
    if let Some(m) = mask {
        depth.ensure_shape(m, "to_disparity mask")?;
        if let Some(i) = depth.data().iter().zip(m.data()).position(|(&d, &m)| m > 0.5 && !(d > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "nonpositive depth {} under mask at index {i}",
                depth.data()[i]
            )));
        }
    }
    Ok(depth.map(|d| 1.0 / d.clamp(d_min, d_max)))
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Degenerate(format!("normalization range [{lo}, {hi}] is empty")));
    }
    Ok(())
}

/// Affine map `[lo, hi] -> [-1, 1]`.
pub fn normalize_annotation(g: &Grid, lo: f64, hi: f64) -> Result<Grid> {
    check_range(lo, hi)?;
    let s = 2.0 / (hi - lo);
    Ok(g.map(|v| (v - lo) * s - 1.0))
}

/// Inverse of [`normalize_annotation`].
pub fn denormalize_annotation(g: &Grid, lo: f64, hi: f64) -> Result<Grid> {
    check_range(lo, hi)?;
    let s = (hi - lo) / 2.0;
    Ok(g.map(|v| (v + 1.0) * s + lo))
}

/// What the denoiser is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationTask {
    /// Affine-normalized depth.
    Depth,
    /// Affine-normalized disparity.
    DepthDisparity,
    Normals,
}

impl AnnotationTask {
    pub fn is_depth(self) -> bool {
        matches!(self, AnnotationTask::Depth | AnnotationTask::DepthDisparity)
    }
}

/// Training target in `[-1, 1]`, 3 channels. Depth-like targets are min/max
/// normalized over valid pixels and replicated; invalid pixels are set to -1.
pub fn annotation_target(s: &Sample, task: AnnotationTask) -> Result<Grid> {
    let raw = match task {
        AnnotationTask::Normals => return Ok(s.normals.clone()),
        AnnotationTask::Depth => &s.depth,
        AnnotationTask::DepthDisparity => &s.disparity,
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&v, &m) in raw.data().iter().zip(s.mask.data()) {
        if m > 0.5 {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        return Err(Error::Degenerate("annotation is constant over the valid region".into()));
    }
    let n = normalize_annotation(raw, lo, hi)?;
    let n = n.zip_map(&s.mask, "annotation_target", |v, m| if m > 0.5 { v } else { -1.0 })?;
    n.replicate_channels(3)
}

/// Picks one index according to `probs`.
pub fn choose_by_probability(probs: &[f64], rng: RandomSource) -> Result<usize> {
    check_probs(probs, "probs")?;
    let u: f64 = rng.rng().random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}

fn check_probs(probs: &[f64], field: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument(format!("{field}: empty probability list")));
    }
    if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument(format!("{field}: probabilities must be finite and >= 0, got {probs:?}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{field}: probabilities must sum to 1, got {total}")));
    }
    Ok(())
}

/// Recipe for a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Probabilities of (indoor-like, outdoor-like).
    pub domain_mix: [f64; 2],
    /// Probabilities of (plain, detail-rich).
    pub detail_mix: [f64; 2],
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { domain_mix: [1.0, 0.0], detail_mix: [1.0, 0.0], count: 256, height: 48, width: 48, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        check_probs(&self.domain_mix, "domain_mix")?;
        check_probs(&self.detail_mix, "detail_mix")?;
        check_size(self.height, self.width)
    }

    /// The `index`-th sample. Pure in `(self, index)`.
    pub fn sample(&self, index: usize) -> Result<Sample> {
        let rng = RandomSource::new(self.seed, 0).derive(index as u64);
        let domain = Domain::ALL[choose_by_probability(&self.domain_mix, rng.derive_named("domain"))?];
        let detail = [DetailLevel::Plain, DetailLevel::DetailRich]
            [choose_by_probability(&self.detail_mix, rng.derive_named("detail-level"))?];
        let s = gen_scene(domain, detail, rng.derive_named("scene"), self.height, self.width)?;
        Ok(stored_precision(s))
    }

    pub fn generate(&self) -> Result<Vec<Sample>> {
        self.validate()?;
        (0..self.count).map(|i| self.sample(i)).collect()
    }
}

/// Rounds every grid through `f32`, the on-disk precision, so a sample is
/// bit-identical before and after a save/load cycle.
fn stored_precision(mut s: Sample) -> Sample {
    for g in [&mut s.image, &mut s.depth, &mut s.disparity, &mut s.normals, &mut s.mask] {
        for v in g.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    s
}

/// Whether [`mixture_batch`] chooses a source once per batch or per sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureMode {
    #[default]
    PerBatch,
    PerSample,
}

/// Draws `n` samples: a source is chosen by `probs` (once per batch, or per
/// sample), then samples are generated from it at indices drawn from `rng`.
pub fn mixture_batch(
    specs: &[DatasetSpec],
    probs: &[f64],
    rng: RandomSource,
    n: usize,
    mode: MixtureMode,
) -> Result<Vec<Sample>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("mixture over an empty source list".into()));
    }
    if probs.len() != specs.len() {
        return Err(Error::InvalidArgument(format!("{} probabilities for {} sources", probs.len(), specs.len())));
    }
    check_probs(probs, "mixture probs")?;
    let batch_choice = choose_by_probability(probs, rng.derive_named("source"))?;
    let mut idx = rng.derive_named("index").rng();
    (0..n)
        .map(|i| {
            let src = match mode {
                MixtureMode::PerBatch => batch_choice,
                MixtureMode::PerSample => choose_by_probability(probs, rng.derive_named("source").derive(i as u64))?,
            };
            let spec = &specs[src];
            spec.sample(idx.random_range(0..spec.count.max(1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub domain: Domain,
    pub detail_level: DetailLevel,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub disparity: PathBuf,
    pub normals: PathBuf,
    pub mask: PathBuf,
}

/// `manifest.json` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes samples as PFM files plus a manifest. Paths are relative to `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, samples: &[Sample]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = |kind: &str| PathBuf::from(format!("{i:05}_{kind}.pfm"));
        let e = ManifestEntry {
            index: i,
            domain: s.domain,
            detail_level: s.detail_level,
            image: name("image"),
            depth: name("depth"),
            disparity: name("disparity"),
            normals: name("normals"),
            mask: name("mask"),
        };
        for (p, g) in [
            (&e.image, &s.image),
            (&e.depth, &s.depth),
            (&e.disparity, &s.disparity),
            (&e.normals, &s.normals),
            (&e.mask, &s.mask),
        ] {
            pfm::write_pfm(&dir.join(p), g)?;
        }
        entries.push(e);
    }
    let manifest = Manifest { spec: spec.clone(), samples: entries };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingData(format!("no dataset manifest at {}", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every sample listed in the manifest under `dir`.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            Ok(Sample {
                image: pfm::read_pfm(&dir.join(&e.image))?,
                depth: pfm::read_pfm(&dir.join(&e.depth))?,
                disparity: pfm::read_pfm(&dir.join(&e.disparity))?,
                normals: pfm::read_pfm(&dir.join(&e.normals))?,
                mask: pfm::read_pfm(&dir.join(&e.mask))?,
                domain: e.domain,
                detail_level: e.detail_level,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(primitives: Vec<Primitive>) -> SceneLayout {
        SceneLayout {
            domain: Domain::AIndoorLike,
            height: 16,
            width: 16,
            pixel_size: 0.5,
            background: Background { base: 8.0, slope_x: 0.1, slope_y: -0.2, sky_rows: 0, albedo: [0.5; 3] },
            primitives,
            light: [0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn background_only() {
        let s = render(&layout(vec![]), DetailLevel::Plain, RandomSource::new(0, 0)).unwrap();
        let n = unit([0.1, -0.2, 1.0]);
        for row in 0..16 {
            for col in 0..16 {
                let (x, y) = ((col as f64 + 0.5) * 0.5, (row as f64 + 0.5) * 0.5);
                assert!((s.depth.get(row, col, 0) - (8.0 + 0.1 * (x - 4.0) - 0.2 * (y - 4.0))).abs() < 1e-12);
                assert_eq!(s.normals.pixel(row, col), &n);
            }
        }
    }

    #[test]
    fn sphere_centre_faces_camera() {
        // centre at pixel (7, 7)
        let s = render(
            &layout(vec![Primitive::Sphere { cx: 3.75, cy: 3.75, radius: 2.0, dc: 5.0, albedo: [0.5; 3] }]),
            DetailLevel::Plain,
            RandomSource::new(0, 0),
        )
        .unwrap();
        assert_eq!(s.normals.pixel(7, 7), &[0.0, 0.0, 1.0]);
        assert_eq!(s.depth.get(7, 7, 0), 3.0);
    }

    #[test]
    fn detail_keeps_geometry() {
        for domain in Domain::ALL {
            let rng = RandomSource::new(11, 3);
            let a = gen_scene(domain, DetailLevel::Plain, rng, 32, 32).unwrap();
            let b = gen_scene(domain, DetailLevel::DetailRich, rng, 32, 32).unwrap();
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.disparity, b.disparity);
            assert_eq!(a.normals, b.normals);
            assert_eq!(a.mask, b.mask);
            assert_ne!(a.image, b.image);
        }
    }

    #[test]
    fn invariants_hold() {
        for seed in 0..20 {
            for domain in Domain::ALL {
                let s = gen_scene(domain, DetailLevel::DetailRich, RandomSource::new(seed, 0), 24, 40).unwrap();
                let (lo, hi) = domain.depth_range();
                for i in 0..24 * 40 {
                    let d = s.depth.data()[i];
                    assert!((lo..=hi).contains(&d), "{d}");
                    if s.mask.data()[i] > 0.5 {
                        let n = &s.normals.data()[3 * i..3 * i + 3];
                        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                        assert!((len - 1.0).abs() < 1e-6);
                        assert!((s.disparity.data()[i] * d - 1.0).abs() < 1e-6);
                    }
                }
                let (ilo, ihi) = s.image.min_max();
                assert!(ilo >= 0.0 && ihi <= 1.0);
            }
        }
    }

    #[test]
    fn too_small_rejected() {
        assert!(gen_scene(Domain::AIndoorLike, DetailLevel::Plain, RandomSource::new(0, 0), 15, 32).is_err());
    }

    #[test]
    fn disparity_examples() {
        let d = Grid::from_vec(1, 3, 1, vec![2.0, 100.0, 0.5]).unwrap();
        let p = to_disparity(&d, None, 1.0, 80.0).unwrap();
        assert_eq!(p.data(), &[0.5, 1.0 / 80.0, 1.0]);
        let back = to_disparity(&p.map(|v| 1.0 / v), None, 1.0, 80.0).unwrap();
        assert_eq!(back, p);
        let bad = Grid::from_vec(1, 2, 1, vec![0.0, 2.0]).unwrap();
        let m = Grid::filled(1, 2, 1, 1.0);
        assert!(to_disparity(&bad, Some(&m), 1.0, 80.0).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let g = Grid::from_vec(1, 3, 1, vec![2.0, 5.0, 8.0]).unwrap();
        let n = normalize_annotation(&g, 2.0, 8.0).unwrap();
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
        let back = denormalize_annotation(&n, 2.0, 8.0).unwrap();
        assert!(back.max_abs_diff(&g) < 1e-9);
        assert!(normalize_annotation(&g, 3.0, 3.0).is_err());
    }

    #[test]
    fn probability_validation_names_field() {
        let spec = DatasetSpec { domain_mix: [0.7, 0.7], ..DatasetSpec::default() };
        let e = spec.validate().unwrap_err().to_string();
        assert!(e.contains("domain_mix"), "{e}");
    }

    #[test]
    fn mixture_is_batch_pure() {
        let a = DatasetSpec { count: 8, height: 16, width: 16, ..DatasetSpec::default() };
        let b = DatasetSpec { domain_mix: [0.0, 1.0], ..a.clone() };
        for k in 0..5 {
            let batch =
                mixture_batch(&[a.clone(), b.clone()], &[0.5, 0.5], RandomSource::new(k, 1), 3, MixtureMode::PerBatch)
                    .unwrap();
            assert!(batch.iter().all(|s| s.domain == batch[0].domain));
        }
        let only_a =
            mixture_batch(&[a.clone(), b.clone()], &[1.0, 0.0], RandomSource::new(3, 1), 2, MixtureMode::PerBatch)
                .unwrap();
        assert!(only_a.iter().all(|s| s.domain == Domain::AIndoorLike));
        assert!(mixture_batch(&[], &[], RandomSource::new(0, 0), 1, MixtureMode::PerBatch).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let spec =
            DatasetSpec { count: 3, height: 16, width: 20, domain_mix: [0.5, 0.5], detail_mix: [0.5, 0.5], seed: 4 };
        let samples = spec.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &spec, &samples).unwrap();
        let (m2, loaded) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(samples, loaded);
        assert_eq!(spec.generate().unwrap(), samples);
    }
}
