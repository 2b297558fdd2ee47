//! Synthetic multi-domain, multi-label benchmark: shape-presence labels on a
//! flat canvas, followed by a per-domain acquisition style.

use std::f64::consts::PI;
use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Canvas intensity before styling, on the unit scale.
const BACKGROUND: f64 = 0.3;
const SHAPE_INTENSITY: [f64; 2] = [0.65, 0.9];
const RADIUS_FRACTION: [f64; 2] = [0.1, 0.17];
/// Minimum centre separation (Chebyshev) as a fraction of the radius sum;
/// below 1 shapes may overlap at their rims.
const SEPARATION: f64 = 0.75;
const TRIES_PER_SHAPE: usize = 50;
const LAYOUT_ATTEMPTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
    Cross,
    Ring,
    Diamond,
    XMark,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::XMark,
        ShapeKind::Frame,
    ];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-size `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        let d = (dx * dx + dy * dy).sqrt();
        match self {
            ShapeKind::Circle => d <= r,
            ShapeKind::Rectangle => ax <= 0.9 * r && ay <= 0.6 * r,
            ShapeKind::Triangle => dy.abs() <= r && ax <= 0.5 * (dy + r),
            ShapeKind::Cross => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            ShapeKind::Ring => d <= r && d >= 0.55 * r,
            ShapeKind::Diamond => ax + ay <= r,
            ShapeKind::XMark => {
                ax.max(ay) <= r && ((dx - dy).abs() <= 0.35 * r || (dx + dy).abs() <= 0.35 * r)
            }
            ShapeKind::Frame => {
                let m = ax.max(ay);
                m <= r && m >= 0.6 * r
            }
        }
    }
}

/// Acquisition style of one domain, on the unit intensity scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub gamma_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub brightness_offset_range: [f64; 2],
    pub lowfreq_field_amplitude_range: [f64; 2],
    pub noise_std_range: [f64; 2],
    /// Overrides the generator's per-domain sample count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

impl DomainSpec {
    /// Style that leaves the canvas untouched.
    pub fn identity(domain_id: usize) -> Self {
        Self {
            domain_id,
            gamma_range: [1.0, 1.0],
            contrast_range: [1.0, 1.0],
            brightness_offset_range: [0.0, 0.0],
            lowfreq_field_amplitude_range: [0.0, 0.0],
            noise_std_range: [0.0, 0.0],
            count: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("gamma_range", self.gamma_range),
            ("contrast_range", self.contrast_range),
            ("brightness_offset_range", self.brightness_offset_range),
            (
                "lowfreq_field_amplitude_range",
                self.lowfreq_field_amplitude_range,
            ),
            ("noise_std_range", self.noise_std_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!(
                    "domain {}: {name} [{lo}, {hi}] is empty or non-finite",
                    self.domain_id
                )));
            }
        }
        let bad = |msg: &str| Err(Error::config(format!("domain {}: {msg}", self.domain_id)));
        if self.gamma_range[0] <= 0.0 {
            return bad("gamma must be positive");
        }
        if self.contrast_range[0] <= 0.0 {
            return bad("contrast must be positive");
        }
        if self.brightness_offset_range[0] < -1.0 || self.brightness_offset_range[1] > 1.0 {
            return bad("brightness offset must lie in [-1, 1]");
        }
        if self.lowfreq_field_amplitude_range[0] < 0.0 || self.noise_std_range[0] < 0.0 {
            return bad("field amplitude and noise std must be non-negative");
        }
        Ok(())
    }
}

/// Three well-separated acquisition styles: a dark, a bright high-contrast,
/// and a washed-out noisy domain. The last one is held out as the unseen
/// domain by the default experiment.
pub fn default_domain_specs() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            domain_id: 0,
            gamma_range: [0.9, 1.1],
            contrast_range: [0.9, 1.1],
            brightness_offset_range: [-0.2, -0.15],
            lowfreq_field_amplitude_range: [0.0, 0.05],
            noise_std_range: [0.01, 0.02],
            count: None,
        },
        DomainSpec {
            domain_id: 1,
            gamma_range: [0.8, 0.9],
            contrast_range: [1.5, 1.7],
            brightness_offset_range: [0.1, 0.15],
            lowfreq_field_amplitude_range: [0.0, 0.05],
            noise_std_range: [0.02, 0.03],
            count: None,
        },
        DomainSpec {
            domain_id: 2,
            gamma_range: [0.5, 0.6],
            contrast_range: [0.45, 0.55],
            brightness_offset_range: [0.25, 0.3],
            lowfreq_field_amplitude_range: [0.08, 0.12],
            noise_std_range: [0.04, 0.05],
            count: None,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub class_prob: f64,
    pub per_domain_count: usize,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            image_size: 64,
            class_prob: 0.4,
            per_domain_count: 400,
            seed: 0,
            domains: default_domain_specs(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > ShapeKind::ALL.len() {
            return Err(Error::config(format!(
                "num_classes must be in 1..={}",
                ShapeKind::ALL.len()
            )));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size must be >= 16"));
        }
        if !(0.0..=1.0).contains(&self.class_prob) {
            return Err(Error::config("class_prob must lie in [0, 1]"));
        }
        if self.domains.is_empty() {
            return Err(Error::config("at least one domain is required"));
        }
        self.domains.iter().try_for_each(DomainSpec::validate)
    }

    pub fn count_for(&self, domain: &DomainSpec) -> usize {
        domain.count.unwrap_or(self.per_domain_count)
    }
}

struct Placed {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    intensity: f64,
}

fn layout(rng: &mut ChaCha8Rng, labels: &[u8], size: usize) -> Result<Vec<Placed>> {
    let s = size as f64;
    'attempt: for _ in 0..LAYOUT_ATTEMPTS {
        let mut placed: Vec<Placed> = Vec::new();
        for (c, &on) in labels.iter().enumerate() {
            if on == 0 {
                continue;
            }
            let mut ok = false;
            for _ in 0..TRIES_PER_SHAPE {
                let r = s * rng.gen_range(RADIUS_FRACTION[0]..=RADIUS_FRACTION[1]);
                let cx = rng.gen_range(r + 1.0..=s - r - 1.0);
                let cy = rng.gen_range(r + 1.0..=s - r - 1.0);
                let clear = placed
                    .iter()
                    .all(|p| (p.cx - cx).abs().max((p.cy - cy).abs()) > SEPARATION * (p.r + r));
                if clear {
                    let intensity = rng.gen_range(SHAPE_INTENSITY[0]..=SHAPE_INTENSITY[1]);
                    placed.push(Placed {
                        kind: ShapeKind::ALL[c],
                        cx,
                        cy,
                        r,
                        intensity,
                    });
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'attempt;
            }
        }
        return Ok(placed);
    }
    Err(Error::Placement(format!(
        "could not place {} shapes on a {size}x{size} canvas",
        labels.iter().filter(|&&l| l == 1).count()
    )))
}

/// Content only: labels and the flat canvas with shapes, unit scale.
pub fn render_content(
    seed: u64,
    num_classes: usize,
    size: usize,
    class_prob: f64,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut rng = rng_from(seed, &[0]);
    let labels: Vec<u8> = (0..num_classes)
        .map(|_| u8::from(rng.gen_bool(class_prob)))
        .collect();
    let shapes = layout(&mut rng, &labels, size)?;
    let mut canvas = vec![BACKGROUND; size * size];
    for p in &shapes {
        let lo_x = (p.cx - p.r - 1.0).floor().max(0.0) as usize;
        let hi_x = ((p.cx + p.r + 1.0).ceil() as usize).min(size);
        let lo_y = (p.cy - p.r - 1.0).floor().max(0.0) as usize;
        let hi_y = ((p.cy + p.r + 1.0).ceil() as usize).min(size);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let dx = x as f64 + 0.5 - p.cx;
                let dy = y as f64 + 0.5 - p.cy;
                if p.kind.contains(dx, dy, p.r) {
                    canvas[y * size + x] = p.intensity;
                }
            }
        }
    }
    Ok((canvas, labels))
}

/// Applies a domain style to a unit-scale canvas and quantizes to 8 bits.
/// The style stream is independent of the content stream, so the same seed
/// keeps its labels and layout under any domain.
pub fn apply_style(canvas: &[f64], size: usize, spec: &DomainSpec, seed: u64) -> Vec<u8> {
    let mut rng = rng_from(seed, &[1]);
    let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let contrast = draw(spec.contrast_range);
    let brightness = draw(spec.brightness_offset_range);
    let gamma = draw(spec.gamma_range);
    let amp = draw(spec.lowfreq_field_amplitude_range);
    let noise = draw(spec.noise_std_range);
    let fx = draw([0.5, 1.5]);
    let fy = draw([0.5, 1.5]);
    let px = draw([0.0, 2.0 * PI]);
    let py = draw([0.0, 2.0 * PI]);
    let s = size as f64;
    canvas
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (x, y) = ((i % size) as f64 / s, (i / size) as f64 / s);
            let field = amp * (2.0 * PI * fx * x + px).cos() * (2.0 * PI * fy * y + py).cos();
            let mut u = (contrast * (v - 0.5) + 0.5 + brightness + field).clamp(0.0, 1.0);
            if gamma != 1.0 {
                u = u.powf(gamma);
            }
            if noise > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                u += noise * z;
            }
            (u.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Renders one sample: 8-bit pixels and the shape-presence labels.
pub fn render_sample(
    seed: u64,
    spec: &DomainSpec,
    num_classes: usize,
    size: usize,
    class_prob: f64,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let (canvas, labels) = render_content(seed, num_classes, size, class_prob)?;
    Ok((apply_style(&canvas, size, spec, seed), labels))
}

/// Generates every domain's images under `root` and returns the manifest
/// (paths relative to `root`). Each sample's seed depends only on the
/// dataset seed and its global index, so the output does not depend on
/// scheduling.
pub fn generate_dataset(cfg: &GeneratorConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    let mut global = 0u64;
    for spec in &cfg.domains {
        for i in 0..cfg.count_for(spec) {
            jobs.push((spec, i, global));
            global += 1;
        }
    }
    for spec in &cfg.domains {
        let dir = root.join(format!("images/domain{}", spec.domain_id));
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let size = cfg.image_size as u32;
    let records = jobs
        .par_iter()
        .map(|&(spec, i, global)| {
            let seed = derive_seed(cfg.seed, &[global]);
            let (pixels, labels) =
                render_sample(seed, spec, cfg.num_classes, cfg.image_size, cfg.class_prob)?;
            let rel = format!("images/domain{}/{i:05}.png", spec.domain_id);
            let path = root.join(&rel);
            GrayImage::from_raw(size, size, pixels)
                .expect("pixel buffer matches image size")
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
            Ok(SampleRecord {
                path: rel,
                labels,
                domain: spec.domain_id,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_style_is_quantized_canvas() {
        let (canvas, _) = render_content(3, 5, 32, 0.4).unwrap();
        let px = apply_style(&canvas, 32, &DomainSpec::identity(0), 3);
        for (p, c) in px.iter().zip(&canvas) {
            assert_eq!(*p, (c * 255.0).round() as u8);
        }
        // Identity domains differ only by index, not by rendering rule.
        let a = render_sample(3, &DomainSpec::identity(0), 5, 32, 0.4).unwrap();
        let b = render_sample(3, &DomainSpec::identity(1), 5, 32, 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn style_changes_pixels_not_labels() {
        let specs = default_domain_specs();
        let (pa, la) = render_sample(11, &specs[0], 5, 32, 0.4).unwrap();
        let (pb, lb) = render_sample(11, &specs[2], 5, 32, 0.4).unwrap();
        assert_eq!(la, lb);
        assert_ne!(pa, pb);
    }

    #[test]
    fn label_density_matches_class_prob() {
        let n = 2000;
        let mut counts = [0usize; 5];
        for i in 0..n {
            let (_, labels) = render_content(derive_seed(5, &[i]), 5, 32, 0.4).unwrap();
            for (c, l) in labels.iter().enumerate() {
                counts[c] += *l as usize;
            }
        }
        for c in counts {
            let rate = c as f64 / n as f64;
            assert!((rate - 0.4).abs() <= 0.03, "rate {rate}");
        }
    }

    #[test]
    fn all_zero_and_all_one_labels_render() {
        let (canvas, labels) = render_content(1, 5, 32, 0.0).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
        assert!(canvas.iter().all(|&v| v == BACKGROUND));
        let (_, labels) = render_content(1, 8, 64, 1.0).unwrap();
        assert!(labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn impossible_layout_errors() {
        // Eight shapes cannot be separated on an 8x8 canvas.
        let r = (0..20)
            .map(|s| render_content(s, 8, 8, 1.0))
            .find(|r| r.is_err());
        assert!(matches!(r, Some(Err(Error::Placement(_)))));
    }

    #[test]
    fn spec_validation() {
        let mut s = DomainSpec::identity(0);
        assert!(s.validate().is_ok());
        s.gamma_range = [0.0, 1.0];
        assert!(s.validate().is_err());
        let mut s = DomainSpec::identity(0);
        s.noise_std_range = [0.2, 0.1];
        assert!(s.validate().is_err());
        assert!(GeneratorConfig {
            num_classes: 9,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig::default().validate().is_ok());
    }

    #[test]
    fn shapes_are_distinct_masks() {
        let r = 10.0;
        let masks: Vec<Vec<bool>> = ShapeKind::ALL
            .iter()
            .map(|k| {
                (0..441)
                    .map(|i| k.contains((i % 21) as f64 - 10.0, (i / 21) as f64 - 10.0, r))
                    .collect()
            })
            .collect();
        for i in 0..masks.len() {
            assert!(masks[i].iter().any(|&m| m));
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }
}
