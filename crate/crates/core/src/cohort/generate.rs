use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SegSample, Subject};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Parameters of one image-generation "site".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationProfile {
    /// Added to every pixel before clamping to [0, 1].
    pub intensity_bias: f64,
    /// Inclusive range of lesions per subject.
    pub lesion_count_range: [u32; 2],
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub lesion_radius_range: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenerationProfile {
    fn default() -> Self {
        Self {
            intensity_bias: 0.0,
            lesion_count_range: [1, 3],
            lesion_radius_range: [2.5, 7.0],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl GenerationProfile {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let [rmin, rmax] = self.lesion_radius_range;
        let [cmin, cmax] = self.lesion_count_range;
        if cmin > cmax {
            return Err(Error::config(format!(
                "lesion count range [{cmin}, {cmax}] is empty"
            )));
        }
        if !(rmin > 0.0) || rmin > rmax {
            return Err(Error::config(format!(
                "lesion radius range [{rmin}, {rmax}] must be positive and ordered"
            )));
        }
        if 2.0 * rmax >= height.min(width) as f64 {
            return Err(Error::config(format!(
                "lesion radius {rmax} does not fit a {height}x{width} image"
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        if !self.intensity_bias.is_finite() {
            return Err(Error::config("intensity bias must be finite"));
        }
        Ok(())
    }
}

/// A rotated ellipse in pixel coordinates (pixel `(x, y)` has its centre at `(x + 0.5, y + 0.5)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Normalised squared radius of a point; `<= 1` means inside.
    #[inline]
    pub fn radius2(&self, px: f64, py: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2)
    }

    /// Sets `mask[y·w + x] = 1` for every pixel centre inside the ellipse.
    pub fn rasterize(&self, height: usize, width: usize, mask: &mut [u8]) {
        let reach = self.semi_x.max(self.semi_y).ceil() + 1.0;
        let x0 = (self.cx - reach).floor().max(0.0) as usize;
        let x1 = ((self.cx + reach).ceil() as usize).min(width);
        let y0 = (self.cy - reach).floor().max(0.0) as usize;
        let y1 = ((self.cy + reach).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.radius2(x as f64 + 0.5, y as f64 + 0.5) <= 1.0 {
                    mask[y * width + x] = 1;
                }
            }
        }
    }
}

/// Lesion geometry of every slice of one subject, before intensities are drawn.
#[derive(Debug, Clone)]
pub struct SubjectPlan {
    pub slices: Vec<Vec<(Ellipse, f64)>>,
}

fn subject_rng(master_seed: u64, profile: &GenerationProfile, subject_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        derive_seed(master_seed, "subject", subject_id as u64),
        "profile",
        profile.seed,
    ))
}

fn plan(
    rng: &mut ChaCha8Rng,
    profile: &GenerationProfile,
    height: usize,
    width: usize,
    slices: usize,
) -> SubjectPlan {
    let [cmin, cmax] = profile.lesion_count_range;
    let [rmin, rmax] = profile.lesion_radius_range;
    let count = rng.random_range(cmin..=cmax);
    let lesions: Vec<(Ellipse, f64)> = (0..count)
        .map(|_| {
            let a = rng.random_range(rmin..=rmax);
            let b = rng.random_range(rmin..=rmax);
            let reach = a.max(b);
            let cx = rng.random_range(reach..=width as f64 - reach);
            let cy = rng.random_range(reach..=height as f64 - reach);
            let angle = rng.random_range(0.0..PI);
            let contrast = rng.random_range(0.30..=0.45);
            (
                Ellipse {
                    cx,
                    cy,
                    semi_x: a,
                    semi_y: b,
                    angle,
                },
                contrast,
            )
        })
        .collect();
    let per_slice = (0..slices)
        .map(|s| {
            // Slices cut a 3-D lesion at different depths: semi-axes shrink
            // away from the middle slice and centres drift by up to a pixel.
            let z = if slices > 1 {
                -0.6 + 1.2 * s as f64 / (slices - 1) as f64
            } else {
                0.0
            };
            let scale = (1.0 - z * z).sqrt();
            lesions
                .iter()
                .map(|(e, contrast)| {
                    let jx = rng.random_range(-1.0..=1.0);
                    let jy = rng.random_range(-1.0..=1.0);
                    let semi_x = (e.semi_x * scale).max(rmin.min(1.0));
                    let semi_y = (e.semi_y * scale).max(rmin.min(1.0));
                    let reach = semi_x.max(semi_y);
                    (
                        Ellipse {
                            cx: (e.cx + jx).clamp(reach, width as f64 - reach),
                            cy: (e.cy + jy).clamp(reach, height as f64 - reach),
                            semi_x,
                            semi_y,
                            angle: e.angle,
                        },
                        *contrast,
                    )
                })
                .collect()
        })
        .collect();
    SubjectPlan { slices: per_slice }
}

/// Lesion plan for a subject; deterministic in its arguments.
pub fn plan_subject(
    subject_id: u32,
    profile: &GenerationProfile,
    height: usize,
    width: usize,
    slices: usize,
    master_seed: u64,
) -> SubjectPlan {
    let mut rng = subject_rng(master_seed, profile, subject_id);
    plan(&mut rng, profile, height, width, slices)
}

pub fn generate_subject(
    subject_id: u32,
    profile_id: u32,
    profile: &GenerationProfile,
    height: usize,
    width: usize,
    slices: usize,
    master_seed: u64,
) -> Result<Subject> {
    profile.validate(height, width)?;
    let mut rng = subject_rng(master_seed, profile, subject_id);
    let layout = plan(&mut rng, profile, height, width, slices);
    let noise = Normal::new(0.0, profile.noise_sigma.max(0.0))
        .map_err(|e| Error::config(format!("noise distribution: {e}")))?;

    // Smooth background: a few low-frequency waves shared by all slices.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1..=2) as f64,
                rng.random_range(0..=2) as f64,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();

    let base = 0.25 + profile.intensity_bias;
    let slices = layout
        .slices
        .iter()
        .map(|lesions| {
            let mut image = vec![0.0f32; height * width];
            let mut mask = vec![0u8; height * width];
            for y in 0..height {
                for x in 0..width {
                    let (fx, fy) = (x as f64 / width as f64, y as f64 / height as f64);
                    let mut v = base;
                    for &(kx, ky, phase, amp) in &waves {
                        v += amp * (2.0 * PI * (kx * fx + ky * fy) + phase).cos();
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut boost: f64 = 0.0;
                    for (e, contrast) in lesions {
                        let r2 = e.radius2(px, py);
                        if r2 <= 1.0 {
                            boost = boost.max(contrast * (0.85 + 0.15 * (1.0 - r2)));
                        }
                    }
                    v += boost;
                    if profile.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    image[y * width + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
            for (e, _) in lesions {
                e.rasterize(height, width, &mut mask);
            }
            SegSample {
                height,
                width,
                image,
                mask,
            }
        })
        .collect();
    Ok(Subject {
        id: subject_id,
        profile_id,
        slices,
    })
}

/// `total` subjects; subject `i` is drawn from `profiles[i % profiles.len()]`.
pub fn generate_cohort(
    total: usize,
    profiles: &[GenerationProfile],
    height: usize,
    width: usize,
    slices: usize,
    master_seed: u64,
) -> Result<Vec<Subject>> {
    if total == 0 {
        return Err(Error::config("cohort needs at least one subject"));
    }
    if profiles.is_empty() {
        return Err(Error::config(
            "cohort needs at least one generation profile",
        ));
    }
    (0..total)
        .map(|i| {
            let pid = i % profiles.len();
            generate_subject(
                i as u32,
                pid as u32,
                &profiles[pid],
                height,
                width,
                slices,
                master_seed,
            )
        })
        .collect()
}

/// One profile per institution. With `heterogeneity = 0` every profile equals
/// `base`; larger values spread intensity bias, lesion size and noise across
/// institutions.
pub fn institution_profiles(
    institutions: usize,
    base: &GenerationProfile,
    heterogeneity: f64,
    seed: u64,
) -> Vec<GenerationProfile> {
    if heterogeneity == 0.0 || institutions <= 1 {
        return vec![base.clone(); institutions];
    }
    let spread = |k: usize| {
        if institutions == 1 {
            0.0
        } else {
            -1.0 + 2.0 * k as f64 / (institutions - 1) as f64
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "institution-profiles", 0));
    let mut bias_rank: Vec<usize> = (0..institutions).collect();
    let mut size_rank: Vec<usize> = (0..institutions).collect();
    bias_rank.shuffle(&mut rng);
    size_rank.shuffle(&mut rng);
    let [rmin, rmax] = base.lesion_radius_range;
    (0..institutions)
        .map(|k| {
            let shift = 1.5 * heterogeneity * spread(size_rank[k]);
            let lo = (rmin + shift).max(1.0);
            let hi = (rmax + shift).max(lo);
            GenerationProfile {
                intensity_bias: base.intensity_bias + 0.2 * heterogeneity * spread(bias_rank[k]),
                lesion_count_range: base.lesion_count_range,
                lesion_radius_range: [lo, hi],
                noise_sigma: base.noise_sigma
                    * (1.0
                        + heterogeneity * (spread(bias_rank[(k + 1) % institutions]) + 1.0) / 2.0),
                seed: derive_seed(base.seed, "institution", k as u64),
            }
        })
        .collect()
}
