//! Procedural grating textures with planted anomalies, a frozen random
//! patch backbone, and fixed anchor directions.
//!
//! Class `c` is a sinusoid grating whose frequency and orientation come from
//! a golden-ratio sequence, so any number of classes stays spread out. An
//! anomaly is a rectangle or disc in which the grating is re-drawn at a
//! multiple of the class frequency with a different contrast.

use std::f64::consts::PI;

use crate::error::{domain_err, shape_err, Result};
use crate::heads::TextAnchors;
use crate::linalg::{cosine_unchecked, l2_normalize, Matrix, SeededRng};

const GOLDEN: f64 = 0.618_033_988_749_895;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub noise_std: f64,
    pub anomaly_rate: f64,
    /// Base grating frequency range in cycles per pixel.
    pub freq_band: (f64, f64),
    /// Anomalous frequency multiplier range.
    pub anomaly_freq_mult: (f64, f64),
    /// Upper bound on any anomalous frequency.
    pub max_freq: f64,
    /// Anomalous contrast multiplier range.
    pub anomaly_contrast: (f64, f64),
    /// Anomaly area as a fraction of the image.
    pub area_frac: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            noise_std: 0.1,
            anomaly_rate: 0.5,
            freq_band: (0.04, 0.10),
            anomaly_freq_mult: (2.5, 3.5),
            max_freq: 0.4,
            anomaly_contrast: (0.6, 1.6),
            area_frac: (0.02, 0.15),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return domain_err(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return domain_err("anomaly rate outside [0, 1]");
        }
        let (a0, a1) = self.area_frac;
        if !(0.0 < a0 && a0 <= a1 && a1 < 1.0) {
            return domain_err("anomaly area range must satisfy 0 < lo <= hi < 1");
        }
        if self.noise_std < 0.0 || self.freq_band.0 <= 0.0 || self.freq_band.0 > self.freq_band.1 {
            return domain_err("invalid noise or frequency band");
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// Nominal texture parameters of a class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTexture {
    pub freq: f64,
    pub theta: f64,
}

pub fn class_texture(class_id: usize, cfg: &SynthConfig) -> ClassTexture {
    let u = (0.5 + class_id as f64 * GOLDEN).fract();
    let v = (0.1 + class_id as f64 * (1.0 - GOLDEN)).fract();
    ClassTexture {
        freq: cfg.freq_band.0 + (cfg.freq_band.1 - cfg.freq_band.0) * u,
        theta: PI * v,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `H×W` intensities.
    pub image: Matrix,
    /// Row-major `H·W` ground truth.
    pub mask: Vec<bool>,
    pub label: bool,
    pub class_id: usize,
}

/// Seen (training) and unseen (evaluation) class ids; disjoint by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl ClassSplit {
    /// Seen classes `0..n_seen`, unseen `n_seen..n_seen+n_unseen`.
    pub fn new(n_seen: usize, n_unseen: usize) -> Result<Self> {
        if n_seen == 0 || n_unseen == 0 {
            return domain_err("both class sets must be nonempty");
        }
        Ok(Self {
            seen: (0..n_seen).collect(),
            unseen: (n_seen..n_seen + n_unseen).collect(),
        })
    }

    pub fn from_sets(seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        if seen.iter().any(|c| unseen.contains(c)) {
            return domain_err("seen and unseen classes overlap");
        }
        if seen.is_empty() || unseen.is_empty() {
            return domain_err("both class sets must be nonempty");
        }
        Ok(Self { seen, unseen })
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }
}

struct Grating {
    freq: f64,
    theta: f64,
    phase: f64,
    contrast: f64,
}

impl Grating {
    fn at(&self, y: usize, x: usize) -> f64 {
        let t = x as f64 * self.theta.cos() + y as f64 * self.theta.sin();
        self.contrast * (2.0 * PI * self.freq * t + self.phase).sin()
    }
}

fn anomaly_mask(size: usize, cfg: &SynthConfig, rng: &mut SeededRng) -> Vec<bool> {
    let total = (size * size) as f64;
    let area = rng.uniform_range(cfg.area_frac.0, cfg.area_frac.1) * total;
    let mut mask = vec![false; size * size];
    if rng.bernoulli(0.5) {
        let aspect = rng.uniform_range(0.5, 2.0);
        let w = ((area * aspect).sqrt().round() as usize).clamp(1, size);
        let h = ((area / w as f64).round() as usize).clamp(1, size);
        let y0 = rng.below(size - h + 1);
        let x0 = rng.below(size - w + 1);
        for y in y0..y0 + h {
            mask[y * size + x0..y * size + x0 + w].fill(true);
        }
    } else {
        let r = (area / PI).sqrt().min(size as f64 / 2.0);
        let cy = rng.uniform_range(r, size as f64 - r);
        let cx = rng.uniform_range(r, size as f64 - r);
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= r * r {
                    mask[y * size + x] = true;
                }
            }
        }
    }
    mask
}

/// One sample of `class_id`; `anomalous` plants a region.
pub fn gen_sample(class_id: usize, anomalous: bool, cfg: &SynthConfig, rng: &mut SeededRng) -> SyntheticSample {
    let size = cfg.image_size;
    let tex = class_texture(class_id, cfg);
    let base = Grating {
        freq: tex.freq * rng.uniform_range(0.95, 1.05),
        theta: tex.theta + rng.uniform_range(-0.05, 0.05),
        phase: rng.uniform_range(0.0, 2.0 * PI),
        contrast: rng.uniform_range(0.8, 1.2),
    };
    let (mask, defect) = if anomalous {
        let mask = anomaly_mask(size, cfg, rng);
        let mult = rng.uniform_range(cfg.anomaly_freq_mult.0, cfg.anomaly_freq_mult.1);
        let defect = Grating {
            freq: (base.freq * mult).min(cfg.max_freq),
            theta: base.theta + rng.uniform_range(-0.3, 0.3),
            phase: rng.uniform_range(0.0, 2.0 * PI),
            contrast: base.contrast * rng.uniform_range(cfg.anomaly_contrast.0, cfg.anomaly_contrast.1),
        };
        (mask, Some(defect))
    } else {
        (vec![false; size * size], None)
    };
    let mut image = Matrix::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let clean = match &defect {
                Some(d) if mask[y * size + x] => d.at(y, x),
                _ => base.at(y, x),
            };
            image[(y, x)] = clean + cfg.noise_std * rng.normal();
        }
    }
    let label = mask.iter().any(|&m| m);
    SyntheticSample {
        image,
        mask,
        label,
        class_id,
    }
}

/// `n_images` samples cycling through `classes`; each is anomalous with
/// probability `anomaly_rate` and drawn from its own forked stream.
pub fn gen_dataset(
    cfg: &SynthConfig,
    classes: &[usize],
    n_images: usize,
    rng: &mut SeededRng,
) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    if classes.is_empty() {
        return domain_err("dataset needs at least one class");
    }
    Ok((0..n_images)
        .map(|i| {
            let mut local = rng.fork();
            let anomalous = local.bernoulli(cfg.anomaly_rate);
            gen_sample(classes[i % classes.len()], anomalous, cfg, &mut local)
        })
        .collect())
}

/// Frozen per-level patch encoders: `|W_l · vec(patch)|` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub patch_size: usize,
    /// One `d×p²` matrix per level.
    pub levels: Vec<Matrix>,
}

impl ToyBackbone {
    /// Gaussian rows scaled by `1/p` so feature norms track patch norms.
    pub fn init(n_levels: usize, dim: usize, patch_size: usize, rng: &mut SeededRng) -> Result<Self> {
        if n_levels == 0 || dim == 0 || patch_size == 0 {
            return domain_err("backbone needs levels, dimension and patch size");
        }
        let pixels = patch_size * patch_size;
        let levels = (0..n_levels)
            .map(|_| Matrix::randn(dim, pixels, 1.0 / (pixels as f64).sqrt(), rng))
            .collect();
        Ok(Self { patch_size, levels })
    }

    pub fn dim(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Non-overlapping `p×p` patches in row-major grid order, each flattened
/// row-major, as an `L×p²` matrix.
pub fn patchify(image: &Matrix, patch: usize) -> Result<Matrix> {
    let (h, w) = image.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("{h}×{w} image does not split into {patch}×{patch} patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Matrix::zeros(gh * gw, patch * patch);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for py in 0..patch {
                for px in 0..patch {
                    row[py * patch + px] = image[(gy * patch + py, gx * patch + px)];
                }
            }
        }
    }
    Ok(out)
}

/// Per-level `L×d` features of one image.
pub fn extract_features(image: &Matrix, backbone: &ToyBackbone) -> Result<Vec<Matrix>> {
    let patches = patchify(image, backbone.patch_size)?;
    backbone
        .levels
        .iter()
        .map(|w| {
            let mut f = patches.matmul_t(w)?;
            f.data_mut().iter_mut().for_each(|v| *v = v.abs());
            Ok(f)
        })
        .collect()
}

/// Maximum `|cos(T_N, T_A)|` accepted by [`make_anchors`].
pub const ANCHOR_MAX_COS: f64 = 0.2;

/// Two random unit vectors, resampled until nearly orthogonal.
pub fn make_anchors(d: usize, rng: &mut SeededRng) -> Result<TextAnchors> {
    if d < 2 {
        return domain_err("anchors need at least two dimensions");
    }
    loop {
        let n: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let a: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = l2_normalize(&n, 1e-12);
        let a = l2_normalize(&a, 1e-12);
        if cosine_unchecked(&n, &a, 1e-12).abs() <= ANCHOR_MAX_COS {
            return TextAnchors::new(n, a);
        }
    }
}
