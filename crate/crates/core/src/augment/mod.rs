//! Stochastic view generation for contrastive pre-training and the lighter
//! crop-and-rotate augmentation used for segmentation fine-tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Image, Mask};
use crate::error::{Error, Result};

pub const MIN_CROP: usize = 8;
const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Crop area as a fraction of the image area.
    pub crop_scale: [f64; 2],
    /// Crop width / height.
    pub aspect: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub blur_prob: f64,
    pub noise_sigma: f64,
    pub rotation_degrees: f64,
    pub output_size: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            crop_scale: [0.6, 1.0],
            aspect: [3.0 / 4.0, 4.0 / 3.0],
            blur_sigma: [0.1, 2.0],
            blur_prob: 0.5,
            noise_sigma: 0.02,
            rotation_degrees: 15.0,
            output_size: 192,
        }
    }
}

impl AugmentSpec {
    pub fn with_output_size(mut self, s: usize) -> Self {
        self.output_size = s;
        self
    }

    /// Crop to the full frame, no blur, no noise, no rotation.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            aspect: [1.0, 1.0],
            blur_sigma: [0.0, 0.0],
            blur_prob: 0.0,
            noise_sigma: 0.0,
            rotation_degrees: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range {lo}..{hi} must satisfy 0 < lo <= hi <= 1")));
        }
        let [a, b] = self.aspect;
        if !(a > 0.0 && a <= b) {
            return Err(Error::Config(format!("aspect range {a}..{b} is invalid")));
        }
        let [s0, s1] = self.blur_sigma;
        if !(s0 >= 0.0 && s0 <= s1) {
            return Err(Error::Config(format!("blur sigma range {s0}..{s1} is invalid")));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return Err(Error::Config(format!("blur probability {} outside [0, 1]", self.blur_prob)));
        }
        if [self.noise_sigma, self.rotation_degrees].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config("noise sigma and rotation must be >= 0".into()));
        }
        if self.output_size < MIN_CROP {
            return Err(Error::Config(format!("output size {} below {MIN_CROP}", self.output_size)));
        }
        Ok(())
    }
}

/// Maps output pixel centres to source coordinates: a crop window rotated
/// about its centre and scaled to `size` x `size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub center: (f64, f64),
    pub crop: (f64, f64),
    pub angle: f64,
    pub size: usize,
}

impl Warp {
    pub fn full(height: usize, width: usize, size: usize) -> Self {
        Self { center: (height as f64 / 2.0, width as f64 / 2.0), crop: (height as f64, width as f64), angle: 0.0, size }
    }

    /// Source (row, col) in pixel-index coordinates for output pixel (r, c).
    pub fn source(&self, r: usize, c: usize) -> (f64, f64) {
        let s = self.size as f64;
        let v = ((r as f64 + 0.5) / s - 0.5) * self.crop.0;
        let u = ((c as f64 + 0.5) / s - 0.5) * self.crop.1;
        let (sin, cos) = self.angle.sin_cos();
        let y = self.center.0 + sin * u + cos * v;
        let x = self.center.1 + cos * u - sin * v;
        (y - 0.5, x - 0.5)
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let n = self.size;
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (y, x) = self.source(r, c);
                out.push(bilinear(img, y, x));
            }
        }
        Image::new(n, n, out).expect("square buffer")
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let n = self.size;
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (y, x) = self.source(r, c);
                let ry = (y.round().max(0.0) as usize).min(mask.height - 1);
                let rx = (x.round().max(0.0) as usize).min(mask.width - 1);
                out.push(mask.data[ry * mask.width + rx]);
            }
        }
        Mask::new(n, n, out).expect("square buffer")
    }
}

/// Edge-clamped bilinear sample.
fn bilinear(img: &Image, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
    let bottom = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Random-resized-crop window: area fraction and log-aspect uniform in their
/// ranges, retried a few times before falling back to the largest centred
/// window whose aspect is inside the range.
fn sample_crop(h: usize, w: usize, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<((f64, f64), (f64, f64))> {
    let (hf, wf) = (h as f64, w as f64);
    let area = hf * wf;
    let [lo, hi] = spec.crop_scale;
    let (la, lb) = (spec.aspect[0].ln(), spec.aspect[1].ln());
    let mut window = None;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let ratio = if la < lb { rng.random_range(la..=lb) } else { la }.exp();
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw <= wf && ch <= hf {
            let top = rng.random_range(0.0..=hf - ch);
            let left = rng.random_range(0.0..=wf - cw);
            window = Some(((top + ch / 2.0, left + cw / 2.0), (ch, cw)));
            break;
        }
    }
    let (center, crop) = window.unwrap_or_else(|| {
        let ratio = (wf / hf).clamp(spec.aspect[0], spec.aspect[1]);
        let (ch, cw) = if wf / hf > ratio { (hf, (hf * ratio).round()) } else { ((wf / ratio).round(), wf) };
        ((hf / 2.0, wf / 2.0), (ch, cw))
    });
    if crop.0 < MIN_CROP as f64 || crop.1 < MIN_CROP as f64 {
        return Err(Error::InvalidArgument(format!(
            "crop window {}x{} is smaller than {MIN_CROP} px",
            crop.0, crop.1
        )));
    }
    Ok((center, crop))
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = vec![0.0f32; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            tmp[(r * w + c) as usize] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * img.data[(r * w + (c + i as isize - radius).clamp(0, w - 1)) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0f32; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            out[(r * w + c) as usize] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * tmp[((r + i as isize - radius).clamp(0, h - 1) * w + c) as usize])
                .sum();
        }
    }
    Image::new(img.height, img.width, out).expect("same dims")
}

fn view(img: &Image, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    let (center, crop) = sample_crop(img.height, img.width, spec, rng)?;
    let warp = Warp { center, crop, angle: 0.0, size: spec.output_size };
    let mut out = warp.apply_image(img);
    if spec.blur_prob > 0.0 && rng.random_bool(spec.blur_prob) {
        let [s0, s1] = spec.blur_sigma;
        let sigma = if s0 < s1 { rng.random_range(s0..=s1) } else { s0 };
        out = gaussian_blur(&out, sigma);
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
        for v in &mut out.data {
            *v += noise.sample(rng) as f32;
        }
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Two independent views of `img`; a pure function of `(img, spec, draw)`.
pub fn contrastive_pair(img: &Image, spec: &AugmentSpec, draw: u64) -> Result<(Image, Image)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(draw);
    let a = view(img, spec, &mut rng)?;
    let b = view(img, spec, &mut rng)?;
    Ok((a, b))
}

/// One shared crop-and-rotate draw applied to image (bilinear) and mask
/// (nearest neighbour).
pub fn seg_augment(img: &Image, mask: &Mask, spec: &AugmentSpec, draw: u64) -> Result<(Image, Mask)> {
    spec.validate()?;
    if img.height != mask.height || img.width != mask.width {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            img.height, img.width, mask.height, mask.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw);
    let (center, crop) = sample_crop(img.height, img.width, spec, &mut rng)?;
    let max = spec.rotation_degrees.to_radians();
    let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let warp = Warp { center, crop, angle, size: spec.output_size };
    Ok((warp.apply_image(img), warp.apply_mask(mask)))
}

/// Resize without augmentation (evaluation path).
pub fn resize(img: &Image, size: usize) -> Image {
    if img.height == size && img.width == size {
        return img.clone();
    }
    Warp::full(img.height, img.width, size).apply_image(img)
}

pub fn resize_mask(mask: &Mask, size: usize) -> Mask {
    if mask.height == size && mask.width == size {
        return mask.clone();
    }
    Warp::full(mask.height, mask.width, size).apply_mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Image {
        Image::new(n, n, (0..n * n).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap()
    }

    #[test]
    fn identity_spec_returns_input() {
        let img = ramp(24);
        let (a, b) = contrastive_pair(&img, &AugmentSpec::identity(24), 9).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn full_scale_crop_with_default_aspect_falls_back_to_full_frame() {
        let img = ramp(24);
        let spec = AugmentSpec { crop_scale: [1.0, 1.0], blur_prob: 0.0, noise_sigma: 0.0, ..AugmentSpec::default() }
            .with_output_size(24);
        let (a, b) = contrastive_pair(&img, &spec, 3).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn views_have_output_shape_and_range() {
        let img = ramp(40);
        let spec = AugmentSpec::default().with_output_size(32);
        let (a, b) = contrastive_pair(&img, &spec, 1).unwrap();
        for v in [&a, &b] {
            assert_eq!((v.height, v.width), (32, 32));
            assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        assert_ne!(a, b);
        assert_eq!(contrastive_pair(&img, &spec, 1).unwrap(), (a, b));
    }

    #[test]
    fn tiny_crop_is_an_error() {
        let img = ramp(12);
        let spec = AugmentSpec { crop_scale: [0.2, 0.2], ..AugmentSpec::default() }.with_output_size(12);
        assert!(contrastive_pair(&img, &spec, 0).is_err());
    }

    #[test]
    fn quarter_turn_moves_single_pixel() {
        // 90 degree rotation about the centre of an 8x8 frame: (r, c) -> (c, 7 - r)
        let n = 8;
        for (r, c) in [(1usize, 2usize), (0, 0), (5, 7), (3, 4)] {
            let mut m = vec![0u8; n * n];
            m[r * n + c] = 1;
            let mask = Mask::new(n, n, m).unwrap();
            let warp = Warp { angle: std::f64::consts::FRAC_PI_2, ..Warp::full(n, n, n) };
            let out = warp.apply_mask(&mask);
            let hits: Vec<usize> = (0..n * n).filter(|&i| out.data[i] == 1).collect();
            assert_eq!(hits, vec![(n - 1 - c) * n + r], "pixel ({r},{c})");
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::new(9, 9, vec![0.3; 81]).unwrap();
        let out = gaussian_blur(&img, 1.5);
        assert!(out.data.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }
}
