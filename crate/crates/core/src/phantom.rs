//! Synthetic CT-like phantoms with labelled lesions, and dose reduction.
//!
//! A phantom is an elliptical body carrying a smooth low-frequency texture,
//! with bright circular lesions added on top. Low-dose counterparts come
//! from an image-domain transmission model: intensity `v` maps to line
//! attenuation `v * mu_max`, detected counts are Poisson around
//! `n0 * exp(-mu)` (plus optional Gaussian electronic noise), and the noisy
//! counts are mapped back through the log transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel image, shape `[H, W]`, intensities nominally in `[0, 1]`.
pub type Image = Tensor<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_row: f64,
    pub center_col: f64,
    pub semi_rows: f64,
    pub semi_cols: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let dr = (r - self.center_row) / self.semi_rows;
        let dc = (c - self.center_col) / self.semi_cols;
        dr * dr + dc * dc <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub body_ellipse: Ellipse,
    /// Inclusive range of lesion counts.
    pub n_lesions: (usize, usize),
    /// Inclusive range of lesion radii, in pixels.
    pub lesion_radius: (f64, f64),
    pub lesion_contrast: f64,
    pub background_texture_scale: f64,
    /// Mean intensity of the body before texture and lesions.
    #[serde(default = "default_body_intensity")]
    pub body_intensity: f64,
    pub rng_seed: u64,
}

fn default_body_intensity() -> f64 {
    0.85
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            body_ellipse: Ellipse {
                center_row: 32.0,
                center_col: 32.0,
                semi_rows: 26.0,
                semi_cols: 29.0,
            },
            n_lesions: (1, 3),
            lesion_radius: (2.5, 5.0),
            lesion_contrast: 0.05,
            background_texture_scale: 0.04,
            body_intensity: default_body_intensity(),
            rng_seed: 0,
        }
    }
}

/// Ground-truth lesion box: top-left pixel `(row, col)`, extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 5]", into = "[usize; 5]")]
pub struct Annotation {
    pub row: usize,
    pub col: usize,
    pub width: usize,
    pub height: usize,
    pub label: usize,
}

impl From<[usize; 5]> for Annotation {
    fn from(a: [usize; 5]) -> Self {
        Self {
            row: a[0],
            col: a[1],
            width: a[2],
            height: a[3],
            label: a[4],
        }
    }
}

impl From<Annotation> for [usize; 5] {
    fn from(a: Annotation) -> Self {
        [a.row, a.col, a.width, a.height, a.label]
    }
}

impl Annotation {
    pub fn validate(&self, rows: usize, cols: usize, num_classes: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!("annotation {self:?} has empty extent")));
        }
        if self.row + self.height > rows || self.col + self.width > cols {
            return Err(Error::Validation(format!(
                "annotation {self:?} exceeds image bounds {rows}x{cols}"
            )));
        }
        if self.label == 0 || self.label > num_classes {
            return Err(Error::Validation(format!(
                "annotation label {} outside 1..={num_classes}",
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Incident photon count per pixel.
    pub n0: f64,
    /// Attenuation assigned to intensity 1.0.
    pub mu_max: f64,
    pub electronic_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n0: 1000.0,
            mu_max: 4.0,
            electronic_noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n0 > 0.0 && self.n0.is_finite()) {
            return Err(Error::Config(format!("n0 must be positive, got {}", self.n0)));
        }
        if !(self.mu_max > 0.0 && self.mu_max.is_finite()) {
            return Err(Error::Config(format!("mu_max must be positive, got {}", self.mu_max)));
        }
        if !(self.electronic_noise_sigma >= 0.0) {
            return Err(Error::Config("electronic_noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let e = &self.body_ellipse;
        let n = self.image_size as f64;
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size {} below 32", self.image_size)));
        }
        if !(e.semi_rows > 0.0 && e.semi_cols > 0.0) {
            return Err(Error::Config("body ellipse axes must be positive".into()));
        }
        if e.center_row - e.semi_rows < 0.0
            || e.center_row + e.semi_rows > n
            || e.center_col - e.semi_cols < 0.0
            || e.center_col + e.semi_cols > n
        {
            return Err(Error::Config("body ellipse extends past the image".into()));
        }
        if self.n_lesions.0 > self.n_lesions.1 {
            return Err(Error::Config("n_lesions range is inverted".into()));
        }
        let (rmin, rmax) = self.lesion_radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::Config(format!("invalid lesion radius range ({rmin}, {rmax})")));
        }
        if self.n_lesions.1 > 0 && rmax + 1.0 >= e.semi_rows.min(e.semi_cols) {
            return Err(Error::Config(format!(
                "lesion radius {rmax} cannot fit inside the body ellipse"
            )));
        }
        if !(self.lesion_contrast > 0.0) {
            return Err(Error::Config("lesion_contrast must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.body_intensity) {
            return Err(Error::Config("body_intensity must lie in [0, 1]".into()));
        }
        if !(self.background_texture_scale >= 0.0) {
            return Err(Error::Config("background_texture_scale must be non-negative".into()));
        }
        Ok(())
    }
}

const AIR_LEVEL: f64 = 0.02;

struct Lesion {
    row: f64,
    col: f64,
    radius: f64,
}

/// Deterministic phantom and its exact lesion boxes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Image, Vec<Annotation>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let n = spec.image_size;
    let body = spec.body_ellipse;

    // low-frequency texture: a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.5..2.0) * std::f64::consts::TAU / n as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (freq * angle.cos(), freq * angle.sin(), phase)
        })
        .collect();
    let mut img = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            img[r * n + c] = if body.contains(y, x) {
                let tex: f64 = waves.iter().map(|&(fy, fx, ph)| (fy * y + fx * x + ph).cos()).sum();
                spec.body_intensity + spec.background_texture_scale * tex / 2.0
            } else {
                AIR_LEVEL
            };
        }
    }

    let count = rng.random_range(spec.n_lesions.0..=spec.n_lesions.1);
    let mut lesions: Vec<Lesion> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = if spec.lesion_radius.0 < spec.lesion_radius.1 {
            rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1)
        } else {
            spec.lesion_radius.0
        };
        let inner = Ellipse {
            semi_rows: body.semi_rows - radius - 1.0,
            semi_cols: body.semi_cols - radius - 1.0,
            ..body
        };
        let mut placed = None;
        for _ in 0..200 {
            let row = rng.random_range(body.center_row - inner.semi_rows..=body.center_row + inner.semi_rows);
            let col = rng.random_range(body.center_col - inner.semi_cols..=body.center_col + inner.semi_cols);
            if !inner.contains(row, col) {
                continue;
            }
            let clear = lesions.iter().all(|l| {
                let d = ((l.row - row).powi(2) + (l.col - col).powi(2)).sqrt();
                d > l.radius + radius + 3.0
            });
            if clear {
                placed = Some(Lesion { row, col, radius });
                break;
            }
        }
        match placed {
            Some(l) => lesions.push(l),
            None => {
                return Err(Error::Config(format!(
                    "could not place lesion {} of radius {radius:.2} inside the body",
                    lesions.len() + 1
                )))
            }
        }
    }

    let mut annotations = Vec::with_capacity(lesions.len());
    for l in &lesions {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..n {
            for c in 0..n {
                if lesion_covers(l, r, c) {
                    img[r * n + c] += spec.lesion_contrast;
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        annotations.push(Annotation {
            row: r0,
            col: c0,
            width: c1 - c0 + 1,
            height: r1 - r0 + 1,
            label: 1,
        });
    }

    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok((Tensor::from_vec(&[n, n], data), annotations))
}

fn lesion_covers(l: &Lesion, r: usize, c: usize) -> bool {
    let dy = r as f64 + 0.5 - l.row;
    let dx = c as f64 + 0.5 - l.col;
    dy * dy + dx * dx <= l.radius * l.radius
}

/// Low-dose counterpart of `ndct` under the transmission noise model.
pub fn simulate_ldct(ndct: &Image, cfg: &SimulationConfig) -> Result<Image> {
    cfg.validate()?;
    if !ndct.all_finite() {
        return Err(Error::Data("non-finite pixel in NDCT input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let electronic = if cfg.electronic_noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.electronic_noise_sigma).expect("finite sigma"))
    } else {
        None
    };
    let out = ndct
        .data()
        .iter()
        .map(|&v| {
            let mu = f64::from(v) * cfg.mu_max;
            let mean = cfg.n0 * (-mu).exp();
            let mut counts = if mean > 0.0 {
                Poisson::new(mean).expect("positive rate").sample(&mut rng)
            } else {
                0.0
            };
            if let Some(e) = &electronic {
                counts += e.sample(&mut rng);
            }
            let recovered = -(counts.max(1.0) / cfg.n0).ln() / cfg.mu_max;
            recovered.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Tensor::from_vec(ndct.shape(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lesions_gives_no_annotations() {
        let spec = PhantomSpec { n_lesions: (0, 0), ..PhantomSpec::default() };
        let (img, ann) = generate_phantom(&spec).unwrap();
        assert!(ann.is_empty());
        assert_eq!(img.shape(), &[64, 64]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec { rng_seed: 42, ..PhantomSpec::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let cfg = SimulationConfig { rng_seed: 5, ..SimulationConfig::default() };
        assert_eq!(simulate_ldct(&a.0, &cfg).unwrap(), simulate_ldct(&a.0, &cfg).unwrap());
    }

    #[test]
    fn single_lesion_box_contains_peak() {
        // texture off so the lesion plateau is the unique maximum region
        let spec = PhantomSpec {
            n_lesions: (1, 1),
            lesion_radius: (4.0, 4.0),
            lesion_contrast: 0.3,
            background_texture_scale: 0.0,
            rng_seed: 3,
            ..PhantomSpec::default()
        };
        let (img, ann) = generate_phantom(&spec).unwrap();
        assert_eq!(ann.len(), 1);
        let a = ann[0];
        assert!((8..=10).contains(&a.width) && (8..=10).contains(&a.height), "{a:?}");
        // brute-force argmax scan
        let n = 64;
        let (mut best, mut at) = (f32::MIN, (0, 0));
        for r in 0..n {
            for c in 0..n {
                let v = img.data()[r * n + c];
                if v > best {
                    best = v;
                    at = (r, c);
                }
            }
        }
        assert!(at.0 >= a.row && at.0 < a.row + a.height);
        assert!(at.1 >= a.col && at.1 < a.col + a.width);
    }

    #[test]
    fn oversized_lesion_is_a_config_error() {
        let spec = PhantomSpec { lesion_radius: (30.0, 30.0), ..PhantomSpec::default() };
        assert!(matches!(generate_phantom(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn crowded_spec_reports_infeasible_placement() {
        let spec = PhantomSpec {
            n_lesions: (40, 40),
            lesion_radius: (6.0, 6.0),
            ..PhantomSpec::default()
        };
        let err = generate_phantom(&spec).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("could not place")));
    }

    #[test]
    fn simulation_rejects_non_finite_pixels() {
        let img = Tensor::from_vec(&[1, 2], vec![0.5, f32::NAN]);
        assert!(matches!(
            simulate_ldct(&img, &SimulationConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn simulation_output_is_clamped() {
        let img = Tensor::from_vec(&[4, 4], vec![1.0f32; 16]);
        let cfg = SimulationConfig { n0: 20.0, ..SimulationConfig::default() };
        let out = simulate_ldct(&img, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn annotation_serialises_as_five_numbers() {
        let a = Annotation { row: 1, col: 2, width: 3, height: 4, label: 1 };
        assert_eq!(serde_json::to_string(&a).unwrap(), "[1,2,3,4,1]");
    }
}
