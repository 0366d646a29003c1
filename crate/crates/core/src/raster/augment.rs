use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureImage, PartitionSet};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Rotates about the image center by `degrees` (counter-clockwise in `(j, i)`).
///
/// Inverse mapping: the mask comes from the nearest source pixel and data are
/// bilinear over the masked, in-frame neighbors with renormalized weights.
pub fn rotate_image(img: &FeatureImage, degrees: f64) -> FeatureImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (c, h, w) = img.shape();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let hw = h * w;
    let mut out = FeatureImage::zeros(c, h, w);
    let in_mask = |i: isize, j: isize| {
        i >= 0
            && j >= 0
            && (i as usize) < h
            && (j as usize) < w
            && img.mask[i as usize * w + j as usize]
    };
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64 - cx, i as f64 - cy);
            let sx = cos * x + sin * y + cx;
            let sy = -sin * x + cos * y + cy;
            if !in_mask(sy.round() as isize, sx.round() as isize) {
                continue;
            }
            let (j0, i0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - j0, sy - i0);
            let mut taps = [(0usize, 0.0f64); 4];
            let mut n = 0;
            let mut wsum = 0.0;
            for (di, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dj, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let (ii, jj) = (i0 as isize + di, j0 as isize + dj);
                    let wt = wy * wx;
                    if wt > 0.0 && in_mask(ii, jj) {
                        taps[n] = (ii as usize * w + jj as usize, wt);
                        n += 1;
                        wsum += wt;
                    }
                }
            }
            let p = i * w + j;
            out.mask[p] = true;
            for ch in 0..c {
                let v: f64 = taps[..n]
                    .iter()
                    .map(|&(q, wt)| wt * img.data[ch * hw + q])
                    .sum();
                out.data[ch * hw + p] = v / wsum;
            }
        }
    }
    out
}

/// Separable Gaussian of radius `ceil(3σ)`, renormalized over masked pixels
/// so that values outside the mask never leak in.
pub fn gaussian_blur(img: &FeatureImage, sigma: f64) -> FeatureImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (c, h, w) = img.shape();
    let hw = h * w;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; c * hw];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                if !img.mask[p] {
                    continue;
                }
                let mut wsum = 0.0;
                let mut acc = vec![0.0; c];
                for (k, &kw) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let (ii, jj) = if horizontal {
                        (i as isize, j as isize + d)
                    } else {
                        (i as isize + d, j as isize)
                    };
                    if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= w {
                        continue;
                    }
                    let q = ii as usize * w + jj as usize;
                    if img.mask[q] {
                        wsum += kw;
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += kw * src[ch * hw + q];
                        }
                    }
                }
                for (ch, a) in acc.iter().enumerate() {
                    dst[ch * hw + p] = a / wsum;
                }
            }
        }
        dst
    };
    let tmp = pass(&img.data, true);
    let data = pass(&tmp, false);
    FeatureImage {
        c,
        h,
        w,
        data,
        mask: img.mask.clone(),
    }
}

/// Adds `N(0, (σ·s_c)²)` to masked pixels, `s_c` being the masked std of channel `c`.
pub fn add_noise(img: &FeatureImage, sigma: f64, seed: u64) -> FeatureImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = img.h * img.w;
    let n = img.mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return out;
    }
    for ch in 0..img.c {
        let vals = &img.data[ch * hw..(ch + 1) * hw];
        let mean = vals
            .iter()
            .zip(&img.mask)
            .filter(|p| *p.1)
            .map(|p| p.0)
            .sum::<f64>()
            / n as f64;
        let var = vals
            .iter()
            .zip(&img.mask)
            .filter(|p| *p.1)
            .map(|p| (p.0 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = sigma * var.sqrt();
        if sd == 0.0 {
            continue;
        }
        let dist = Normal::new(0.0, sd).expect("finite positive std");
        for p in 0..hw {
            if img.mask[p] {
                out.data[ch * hw + p] += dist.sample(&mut rng);
            }
        }
    }
    out
}

/// Random rotation, blur and noise applied to each partition, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Angles are drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    pub noise_sigma: (f64, f64),
    pub blur_sigma: (f64, f64),
    /// Draw one set of parameters for all four partitions instead of one each.
    pub shared_across_partitions: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            noise_sigma: (0.01, 0.05),
            blur_sigma: (0.5, 1.5),
            shared_across_partitions: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Draw {
    angle: f64,
    blur: f64,
    noise: f64,
    noise_seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl AugmentPolicy {
    /// All ranges zero: every view equals its input.
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            noise_sigma: (0.0, 0.0),
            blur_sigma: (0.0, 0.0),
            shared_across_partitions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo >= 0.0 && hi >= lo && hi.is_finite();
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite())
            || !ok(self.noise_sigma)
            || !ok(self.blur_sigma)
        {
            return Err(Error::InvalidArgument(format!(
                "bad augmentation ranges: {self:?}"
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Draw {
        Draw {
            angle: uniform(rng, (-self.max_rotation_deg, self.max_rotation_deg)),
            blur: uniform(rng, self.blur_sigma),
            noise: uniform(rng, self.noise_sigma),
            noise_seed: rng.random(),
        }
    }

    pub fn apply_image(
        img: &FeatureImage,
        angle: f64,
        blur: f64,
        noise: f64,
        noise_seed: u64,
    ) -> FeatureImage {
        let rotated = rotate_image(img, angle);
        let blurred = gaussian_blur(&rotated, blur);
        add_noise(&blurred, noise, noise_seed)
    }

    /// One augmented view of `set`, fully determined by `seed`.
    pub fn apply(&self, set: &PartitionSet, seed: u64) -> PartitionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = self.draw(&mut rng);
        let images = std::array::from_fn(|k| {
            let d = if self.shared_across_partitions || k == 0 {
                shared
            } else {
                self.draw(&mut rng)
            };
            Self::apply_image(&set.images[k], d.angle, d.blur, d.noise, d.noise_seed)
        });
        PartitionSet { images }
    }
}

/// Two independently augmented views of the same scan.
pub fn augment_pair(
    set: &PartitionSet,
    policy: &AugmentPolicy,
    seed: u64,
) -> (PartitionSet, PartitionSet) {
    (
        policy.apply(set, derive_seed(seed, "view1")),
        policy.apply(set, derive_seed(seed, "view2")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize) -> FeatureImage {
        let data = (0..2 * h * w)
            .map(|k| ((k * 37 % 101) as f64).sin())
            .collect();
        FeatureImage::from_parts(2, h, w, data, vec![true; h * w]).unwrap()
    }

    fn close(a: &FeatureImage, b: &FeatureImage, tol: f64) -> bool {
        a.max_abs_diff(b).is_some_and(|d| d <= tol)
    }

    #[test]
    fn rotation_zero_and_full_turn() {
        let img = pattern(9, 9);
        assert_eq!(rotate_image(&img, 0.0), img);
        assert!(close(&rotate_image(&img, 360.0), &img, 1e-9));
    }

    #[test]
    fn quarter_turns_permute_pixels() {
        let img = pattern(8, 8);
        let r = rotate_image(&img, 90.0);
        assert_eq!(r.coverage(), 1.0);
        // output (i, j) samples source (j' = cx + (i - cy), i' = cy - (j - cx))
        for i in 0..8 {
            for j in 0..8 {
                assert!((r.get(0, i, j) - img.get(0, 7 - j, i)).abs() < 1e-9);
            }
        }
        let mut back = img.clone();
        for _ in 0..4 {
            back = rotate_image(&back, 90.0);
        }
        assert!(close(&back, &img, 1e-9));
    }

    #[test]
    fn rotation_never_reads_unmasked_pixels() {
        let mut img = pattern(12, 12);
        for p in 0..144 {
            if p % 12 < 6 {
                img.mask[p] = false;
                img.data[p] = 0.0;
                img.data[144 + p] = 0.0;
            } else {
                img.data[p] = 3.0;
            }
        }
        let r = rotate_image(&img, 15.0);
        for p in 0..144 {
            if r.mask[p] {
                assert!((r.data[p] - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_keeps_constants_and_matches_kernel_peak() {
        let img = FeatureImage::from_parts(1, 15, 15, vec![2.5; 225], vec![true; 225]).unwrap();
        assert!(close(&gaussian_blur(&img, 1.2), &img, 1e-12));
        assert_eq!(gaussian_blur(&img, 0.0), img);

        let sigma = 1.0;
        let mut data = vec![0.0; 225];
        data[7 * 15 + 7] = 1.0;
        let imp = FeatureImage::from_parts(1, 15, 15, data, vec![true; 225]).unwrap();
        let out = gaussian_blur(&imp, sigma);
        let total: f64 = (-3..=3).map(|d: i32| (-(d * d) as f64 / 2.0).exp()).sum();
        let peak = (1.0 / total).powi(2);
        assert!((out.get(0, 7, 7) - peak).abs() < 1e-12);
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_is_seeded_and_scaled() {
        let img = pattern(64, 64);
        assert_eq!(add_noise(&img, 0.0, 3), img);
        let a = add_noise(&img, 0.5, 11);
        assert_eq!(a, add_noise(&img, 0.5, 11));
        assert_ne!(a, add_noise(&img, 0.5, 12));
        let ch = img.channel(0);
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        let sd = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64).sqrt();
        let diff: Vec<f64> = a.channel(0).iter().zip(ch).map(|(x, y)| x - y).collect();
        let nsd = (diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64).sqrt();
        assert!(
            (nsd / (0.5 * sd) - 1.0).abs() < 0.1,
            "{nsd} vs {}",
            0.5 * sd
        );
    }

    fn set() -> PartitionSet {
        PartitionSet::new(std::array::from_fn(|k| {
            let mut im = pattern(16, 16);
            im.data_mut().iter_mut().for_each(|v| *v += k as f64);
            im
        }))
        .unwrap()
    }

    #[test]
    fn identity_policy_returns_inputs() {
        let s = set();
        let (a, b) = augment_pair(&s, &AugmentPolicy::identity(), 5);
        assert_eq!(a, s);
        assert_eq!(b, s);
    }

    #[test]
    fn pair_is_deterministic_and_views_differ() {
        let s = set();
        let p = AugmentPolicy::default();
        let (a, b) = augment_pair(&s, &p, 5);
        let (a2, b2) = augment_pair(&s, &p, 5);
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        assert_ne!(a, b);
        assert!(a.images.iter().all(|im| im.is_finite()));
    }

    #[test]
    fn shared_draws_treat_partitions_alike() {
        let base = pattern(16, 16);
        let s = PartitionSet::new(std::array::from_fn(|_| base.clone())).unwrap();
        let shared = AugmentPolicy {
            shared_across_partitions: true,
            ..Default::default()
        };
        let v = shared.apply(&s, 9);
        assert!(v.images.iter().all(|im| *im == v.images[0]));
        let v = AugmentPolicy::default().apply(&s, 9);
        assert_ne!(v.images[0], v.images[1]);
    }

    #[test]
    fn bad_ranges_rejected() {
        let p = AugmentPolicy {
            blur_sigma: (1.0, 0.5),
            ..Default::default()
        };
        assert!(p.validate().is_err());
        assert!(AugmentPolicy::default().validate().is_ok());
    }
}
