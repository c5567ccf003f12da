//! Synthetic datasets with two independent generative factors.
//!
//! Classification images are 8×8×3 grids: the category picks a binary shape
//! mask, the style picks the foreground/background palette. Diffusion data
//! are 2-D points drawn from a Gaussian mixture with one component per
//! (style, category) cell. Every cell draws from its own seeded stream.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub const GRID_SIDE: usize = 8;
pub const GRID_CHANNELS: usize = 3;
pub const GRID_LEN: usize = GRID_SIDE * GRID_SIDE * GRID_CHANNELS;

pub const DEFAULT_STYLES: [&str; 3] = ["sketch", "neon", "pastel"];
pub const DEFAULT_CATEGORIES: [&str; 4] = ["cat", "dog", "car", "tree"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub styles: Vec<String>,
    pub categories: Vec<String>,
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    /// Half-width of the additive uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            styles: DEFAULT_STYLES.iter().map(|s| s.to_string()).collect(),
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            train_per_cell: 64,
            test_per_cell: 32,
            noise: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_styles(&self) -> usize {
        self.styles.len()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.len() < 2 || self.categories.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 styles and 2 categories, got {} and {}",
                self.styles.len(),
                self.categories.len()
            )));
        }
        if self.train_per_cell == 0 || self.test_per_cell == 0 {
            return Err(Error::Config("per-cell sample counts must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        let mut words: Vec<&str> = Vec::new();
        for name in self.styles.iter().chain(&self.categories) {
            if name.is_empty() || name.chars().any(|c| !c.is_alphanumeric()) || name.to_lowercase() != *name {
                return Err(Error::Config(format!(
                    "factor name {name:?} must be a single lowercase word"
                )));
            }
            if words.contains(&name.as_str()) || TEMPLATE_WORDS.contains(&name.as_str()) {
                return Err(Error::Config(format!("factor name {name:?} is not unique")));
            }
            words.push(name);
        }
        Ok(())
    }

    pub fn caption(&self, style: usize, category: usize) -> String {
        caption(&self.styles[style], &self.categories[category])
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ks = self.num_styles();
        (0..self.num_categories()).flat_map(move |c| (0..ks).map(move |s| (s, c)))
    }
}

/// Words the caption and prompt templates use besides factor names.
pub const TEMPLATE_WORDS: [&str; 4] = ["a", "photo", "of", "style"];

pub fn caption(style: &str, category: &str) -> String {
    format!("a {style} style {category}")
}

// ---------------------------------------------------------------------------
// Classification images
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSample {
    pub style: usize,
    pub category: usize,
    pub caption: String,
    pub grid: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassificationDataset {
    pub train: Vec<ClassificationSample>,
    pub test: Vec<ClassificationSample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub foreground: [f64; 3],
    pub background: [f64; 3],
}

const FIXED_PALETTES: [Palette; 3] = [
    Palette {
        foreground: [0.9, 0.9, 0.9],
        background: [0.3, 0.3, 0.3],
    },
    Palette {
        foreground: [0.2, 1.0, 0.5],
        background: [0.1, 0.0, 0.3],
    },
    Palette {
        foreground: [0.95, 0.7, 0.85],
        background: [0.6, 0.5, 0.7],
    },
];

pub fn palette(style: usize) -> Palette {
    if let Some(p) = FIXED_PALETTES.get(style) {
        return *p;
    }
    let mut r = rng::stream(style as u64, streams::PALETTES);
    let mut color = |lo: f64| {
        [
            lo + 0.5 * r.random::<f64>(),
            lo + 0.5 * r.random::<f64>(),
            lo + 0.5 * r.random::<f64>(),
        ]
    };
    Palette {
        foreground: color(0.5),
        background: color(0.0),
    }
}

/// Binary 8×8 shape mask for a category, row-major.
pub fn mask(category: usize) -> [bool; GRID_SIDE * GRID_SIDE] {
    let mut m = [false; GRID_SIDE * GRID_SIDE];
    for r in 0..GRID_SIDE {
        for c in 0..GRID_SIDE {
            let (y, x) = (r as f64 - 3.5, c as f64 - 3.5);
            m[r * GRID_SIDE + c] = match category {
                // disk
                0 => x * x + y * y <= 7.0,
                // hollow square
                1 => {
                    (1..=6).contains(&r) && (1..=6).contains(&c) && !(2..=5).contains(&r)
                        || (1..=6).contains(&c) && (1..=6).contains(&r) && !(2..=5).contains(&c)
                }
                // wide bar with wheels
                2 => (2..=4).contains(&r) || (r == 5 && (c == 1 || c == 6)),
                // triangle with trunk
                3 => (r <= 5 && x.abs() <= (r as f64 + 1.0) / 2.0) || (r >= 6 && (3..=4).contains(&c)),
                _ => false,
            };
        }
    }
    if category >= 4 {
        let mut r = rng::stream(category as u64, streams::MASKS);
        for v in m.iter_mut() {
            *v = r.random::<f64>() < 0.4;
        }
    }
    m
}

/// The noiseless image for a cell.
pub fn render_clean(style: usize, category: usize) -> Vec<f64> {
    let p = palette(style);
    let m = mask(category);
    let mut grid = Vec::with_capacity(GRID_LEN);
    for &on in &m {
        let color = if on { p.foreground } else { p.background };
        grid.extend_from_slice(&color);
    }
    grid
}

pub fn render_noisy<R: Rng + ?Sized>(style: usize, category: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    let mut grid = render_clean(style, category);
    if noise > 0.0 {
        for v in grid.iter_mut() {
            *v = (*v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0);
        }
    }
    grid
}

fn cell_index(spec: &SyntheticSpec, style: usize, category: usize) -> u64 {
    (category * spec.num_styles() + style) as u64
}

fn classification_split(spec: &SyntheticSpec, per_cell: usize, stream: u64) -> Vec<ClassificationSample> {
    let mut out = Vec::with_capacity(per_cell * spec.num_styles() * spec.num_categories());
    for (s, c) in spec.cells() {
        let mut r = rng::stream(rng::derive_seed(spec.seed, stream), cell_index(spec, s, c));
        for _ in 0..per_cell {
            out.push(ClassificationSample {
                style: s,
                category: c,
                caption: spec.caption(s, c),
                grid: render_noisy(s, c, spec.noise, &mut r),
            });
        }
    }
    out
}

pub fn generate_classification_dataset(spec: &SyntheticSpec) -> Result<ClassificationDataset> {
    spec.validate()?;
    Ok(ClassificationDataset {
        train: classification_split(spec, spec.train_per_cell, streams::TRAIN_CELLS),
        test: classification_split(spec, spec.test_per_cell, streams::TEST_CELLS),
    })
}

// ---------------------------------------------------------------------------
// Diffusion mixture
// ---------------------------------------------------------------------------

/// Geometry of the 2-D mixture: component means sit on a circle, one
/// angular slot per (style, category) cell with each category owning a
/// contiguous sector; the style also picks the covariance shape in the
/// local (radial, tangential) frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub radius: f64,
    pub sigma: f64,
    /// Major/minor axis ratio of the elongated styles is `elongation²`;
    /// all shapes share the same determinant.
    pub elongation: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            radius: 2.0,
            sigma: 0.15,
            elongation: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub style: usize,
    pub category: usize,
    pub mean: [f64; 2],
    /// Row-major 2×2 covariance.
    pub cov: [[f64; 2]; 2],
    /// Standard deviations along the radial and tangential directions.
    pub radial_std: f64,
    pub tangential_std: f64,
    pub angle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceShape {
    Isotropic,
    Radial,
    Tangential,
}

pub fn covariance_shape(style: usize) -> CovarianceShape {
    match style % 3 {
        0 => CovarianceShape::Isotropic,
        1 => CovarianceShape::Radial,
        _ => CovarianceShape::Tangential,
    }
}

impl MixtureSpec {
    pub fn component(&self, num_styles: usize, num_categories: usize, style: usize, category: usize) -> Component {
        let slots = (num_styles * num_categories) as f64;
        let angle = 2.0 * PI * (category * num_styles + style) as f64 / slots;
        let (radial_std, tangential_std) = match covariance_shape(style) {
            CovarianceShape::Isotropic => (self.sigma, self.sigma),
            CovarianceShape::Radial => (self.sigma * self.elongation, self.sigma / self.elongation),
            CovarianceShape::Tangential => (self.sigma / self.elongation, self.sigma * self.elongation),
        };
        let u = [angle.cos(), angle.sin()];
        let v = [-angle.sin(), angle.cos()];
        let (rv, tv) = (radial_std * radial_std, tangential_std * tangential_std);
        let mut cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] = rv * u[i] * u[j] + tv * v[i] * v[j];
            }
        }
        Component {
            style,
            category,
            mean: [self.radius * u[0], self.radius * u[1]],
            cov,
            radial_std,
            tangential_std,
            angle,
        }
    }

    pub fn components(&self, num_styles: usize, num_categories: usize) -> Vec<Component> {
        (0..num_categories)
            .flat_map(|c| (0..num_styles).map(move |s| (s, c)))
            .map(|(s, c)| self.component(num_styles, num_categories, s, c))
            .collect()
    }
}

impl Component {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        let (ra, tb) = (a * self.radial_std, b * self.tangential_std);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        [self.mean[0] + ra * c - tb * s, self.mean[1] + ra * s + tb * c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSample {
    pub x: f64,
    pub y: f64,
    pub style: usize,
    pub category: usize,
    pub caption: String,
}

/// `spec.train_per_cell` points per mixture component.
pub fn generate_diffusion_dataset(spec: &SyntheticSpec, mixture: &MixtureSpec) -> Result<Vec<DiffusionSample>> {
    spec.validate()?;
    let (ks, kc) = (spec.num_styles(), spec.num_categories());
    let mut out = Vec::with_capacity(spec.train_per_cell * ks * kc);
    for (s, c) in spec.cells() {
        let comp = mixture.component(ks, kc, s, c);
        let mut r = rng::stream(
            rng::derive_seed(spec.seed, streams::DIFFUSION_CELLS),
            cell_index(spec, s, c),
        );
        for _ in 0..spec.train_per_cell {
            let [x, y] = comp.sample(&mut r);
            out.push(DiffusionSample {
                x,
                y,
                style: s,
                category: c,
                caption: spec.caption(s, c),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON-lines persistence
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Serialize, Deserialize)]
struct ClassificationRecord {
    split: Split,
    #[serde(flatten)]
    sample: ClassificationSample,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON value per non-blank line; errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn export_classification(ds: &ClassificationDataset, path: &Path) -> Result<()> {
    let records = ds
        .train
        .iter()
        .map(|s| (Split::Train, s))
        .chain(ds.test.iter().map(|s| (Split::Test, s)))
        .map(|(split, sample)| ClassificationRecord {
            split,
            sample: sample.clone(),
        });
    write_jsonl(path, records)
}

pub fn load_classification(path: &Path) -> Result<ClassificationDataset> {
    let records: Vec<ClassificationRecord> = read_jsonl(path)?;
    let mut ds = ClassificationDataset::default();
    for (i, rec) in records.into_iter().enumerate() {
        if rec.sample.grid.len() != GRID_LEN {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("grid has {} values, expected {GRID_LEN}", rec.sample.grid.len()),
            });
        }
        match rec.split {
            Split::Train => ds.train.push(rec.sample),
            Split::Test => ds.test.push(rec.sample),
        }
    }
    Ok(ds)
}

pub fn export_diffusion(samples: &[DiffusionSample], path: &Path) -> Result<()> {
    write_jsonl(path, samples)
}

pub fn load_diffusion(path: &Path) -> Result<Vec<DiffusionSample>> {
    read_jsonl(path)
}

/// One category noun per line, in category order.
pub fn export_lexicon(spec: &SyntheticSpec, path: &Path) -> Result<()> {
    let mut text = spec.categories.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_per_cell: 6,
            test_per_cell: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_classification_dataset(&small()).unwrap();
        let b = generate_classification_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_classification_dataset(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train[0].grid, c.train[0].grid);
    }

    #[test]
    fn every_cell_has_exactly_n() {
        let spec = small();
        let ds = generate_classification_dataset(&spec).unwrap();
        for s in 0..3 {
            for c in 0..4 {
                let n = ds.train.iter().filter(|x| x.style == s && x.category == c).count();
                assert_eq!(n, spec.train_per_cell);
                let n = ds.test.iter().filter(|x| x.style == s && x.category == c).count();
                assert_eq!(n, spec.test_per_cell);
            }
        }
        assert!(ds.train.iter().all(|x| x.grid.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(ds.train[0].caption, "a sketch style cat");
    }

    #[test]
    fn masks_are_distinct() {
        for a in 0..6 {
            for b in (a + 1)..6 {
                assert_ne!(mask(a), mask(b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn nearest_centroid_separates_both_factors() {
        let spec = SyntheticSpec::default();
        let ds = generate_classification_dataset(&spec).unwrap();
        let centroid = |key: &dyn Fn(&ClassificationSample) -> usize, k: usize| {
            let mut sums = vec![vec![0.0; GRID_LEN]; k];
            let mut counts = vec![0usize; k];
            for s in &ds.train {
                let j = key(s);
                counts[j] += 1;
                for (a, v) in sums[j].iter_mut().zip(&s.grid) {
                    *a += v;
                }
            }
            for (row, n) in sums.iter_mut().zip(counts) {
                row.iter_mut().for_each(|v| *v /= n as f64);
            }
            sums
        };
        let accuracy = |key: &dyn Fn(&ClassificationSample) -> usize, k: usize| {
            let cents = centroid(key, k);
            let hits = ds
                .test
                .iter()
                .filter(|s| {
                    let best = (0..k)
                        .min_by(|&a, &b| {
                            let da: f64 = cents[a].iter().zip(&s.grid).map(|(p, q)| (p - q).powi(2)).sum();
                            let db: f64 = cents[b].iter().zip(&s.grid).map(|(p, q)| (p - q).powi(2)).sum();
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    best == key(s)
                })
                .count();
            hits as f64 / ds.test.len() as f64
        };
        assert!(accuracy(&|s| s.style, 3) >= 0.95);
        assert!(accuracy(&|s| s.category, 4) >= 0.95);
    }

    #[test]
    fn mixture_means_on_circle_with_equal_determinants() {
        let m = MixtureSpec::default();
        let comps = m.components(3, 4);
        assert_eq!(comps.len(), 12);
        let det0 = comps[0].cov[0][0] * comps[0].cov[1][1] - comps[0].cov[0][1].powi(2);
        for c in &comps {
            let r = (c.mean[0].powi(2) + c.mean[1].powi(2)).sqrt();
            assert!((r - 2.0).abs() < 1e-12);
            let det = c.cov[0][0] * c.cov[1][1] - c.cov[0][1] * c.cov[1][0];
            assert!((det - det0).abs() < 1e-15);
        }
    }

    #[test]
    fn diffusion_counts_and_covariance() {
        let spec = SyntheticSpec {
            train_per_cell: 500,
            ..Default::default()
        };
        let m = MixtureSpec::default();
        let data = generate_diffusion_dataset(&spec, &m).unwrap();
        for comp in m.components(3, 4) {
            let pts: Vec<_> = data
                .iter()
                .filter(|d| d.style == comp.style && d.category == comp.category)
                .collect();
            assert_eq!(pts.len(), 500);
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.y).sum::<f64>() / n;
            let mut cov = [[0.0; 2]; 2];
            for p in &pts {
                let d = [p.x - mx, p.y - my];
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += d[i] * d[j] / (n - 1.0);
                    }
                }
            }
            // compare variances along the component's own axes
            let u = [comp.angle.cos(), comp.angle.sin()];
            let v = [-comp.angle.sin(), comp.angle.cos()];
            let quad = |a: [f64; 2]| a[0] * a[0] * cov[0][0] + 2.0 * a[0] * a[1] * cov[0][1] + a[1] * a[1] * cov[1][1];
            let rv = quad(u) / comp.radial_std.powi(2);
            let tv = quad(v) / comp.tangential_std.powi(2);
            assert!((rv - 1.0).abs() < 0.2, "radial ratio {rv}");
            assert!((tv - 1.0).abs() < 0.2, "tangential ratio {tv}");
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_classification_dataset(&small()).unwrap();
        let p = dir.path().join("ds.jsonl");
        export_classification(&ds, &p).unwrap();
        assert_eq!(load_classification(&p).unwrap(), ds);

        let empty = ClassificationDataset::default();
        let pe = dir.path().join("empty.jsonl");
        export_classification(&empty, &pe).unwrap();
        assert_eq!(std::fs::read(&pe).unwrap().len(), 0);
        assert_eq!(load_classification(&pe).unwrap(), empty);

        let diff = generate_diffusion_dataset(&small(), &MixtureSpec::default()).unwrap();
        let pd = dir.path().join("d.jsonl");
        export_diffusion(&diff, &pd).unwrap();
        assert_eq!(load_diffusion(&pd).unwrap(), diff);

        let bad = dir.path().join("bad.jsonl");
        let mut text = std::fs::read_to_string(&pd).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&bad, text).unwrap();
        let err = load_diffusion(&bad).unwrap_err().to_string();
        assert!(err.contains(&format!(":{}:", diff.len() + 1)), "{err}");
    }

    #[test]
    fn validation() {
        let mut s = SyntheticSpec::default();
        s.styles.truncate(1);
        assert!(s.validate().is_err());
        let s = SyntheticSpec {
            categories: vec!["cat".into(), "Cat".into()],
            ..Default::default()
        };
        assert!(s.validate().is_err());
        let s = SyntheticSpec {
            categories: vec!["cat".into(), "photo".into()],
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}
