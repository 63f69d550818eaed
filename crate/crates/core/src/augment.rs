//! Random affine augmentation: rotation, shift, shear, zoom, horizontal flip,
//! nearest-neighbour resampling with edge clamping, and rescaling.
//!
//! Coordinates are `(row, col)` pixel indices. The forward transform is
//! `M = T(center) · R(theta) · Shear · Zoom · T(shift) · T(-center)` and every
//! output pixel samples the input at `M⁻¹ · dest`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Shear intensity in radians.
    pub shear_range: f64,
    /// Zoom factors are drawn from `[1 - zoom_range, 1 + zoom_range]`.
    pub zoom_range: f64,
    pub horizontal_flip: bool,
    pub fill_mode: FillMode,
    pub rescale: f64,
    /// Fraction of the image height.
    pub height_shift_range: f64,
    /// Fraction of the image width.
    pub width_shift_range: f64,
    /// Degrees.
    pub rotation_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shear_range: 0.2,
            zoom_range: 0.2,
            horizontal_flip: true,
            fill_mode: FillMode::Nearest,
            rescale: 1.0 / 255.0,
            height_shift_range: 0.2,
            width_shift_range: 0.2,
            rotation_range: 40.0,
        }
    }
}

impl AugmentConfig {
    /// No geometric change, only the given rescale.
    pub fn identity(rescale: f64) -> Self {
        Self {
            shear_range: 0.0,
            zoom_range: 0.0,
            horizontal_flip: false,
            fill_mode: FillMode::Nearest,
            rescale,
            height_shift_range: 0.0,
            width_shift_range: 0.0,
            rotation_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.shear_range,
            self.zoom_range,
            self.height_shift_range,
            self.width_shift_range,
            self.rotation_range,
        ];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Param("augmentation ranges must be finite and >= 0".into()));
        }
        if self.rotation_range > 180.0 {
            return Err(Error::Param(format!(
                "rotation_range must be <= 180, got {}",
                self.rotation_range
            )));
        }
        if !(self.rescale > 0.0 && self.rescale.is_finite()) {
            return Err(Error::Param(format!("rescale must be > 0, got {}", self.rescale)));
        }
        Ok(())
    }
}

/// One sampled transform realization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Rotation in degrees.
    pub theta: f64,
    /// Row shift in pixels.
    pub tx: f64,
    /// Column shift in pixels.
    pub ty: f64,
    /// Shear angle in radians.
    pub shear: f64,
    /// Row zoom factor.
    pub zx: f64,
    /// Column zoom factor.
    pub zy: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        theta: 0.0,
        tx: 0.0,
        ty: 0.0,
        shear: 0.0,
        zx: 1.0,
        zy: 1.0,
        flip: false,
    };

    pub fn is_identity_affine(&self) -> bool {
        self.theta == 0.0
            && self.tx == 0.0
            && self.ty == 0.0
            && self.shear == 0.0
            && self.zx == 1.0
            && self.zy == 1.0
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, range: f64) -> f64 {
    let u: f64 = rng.gen();
    if range == 0.0 {
        0.0
    } else {
        -range + u * 2.0 * range
    }
}

/// Draws every field uniformly from its interval, in the fixed order
/// theta, tx, ty, shear, zx, zy, flip. Shifts are sized for an `h x w` image.
pub fn sample_params<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> AffineParams {
    let theta = symmetric(rng, cfg.rotation_range);
    let tx = symmetric(rng, cfg.height_shift_range * h as f64);
    let ty = symmetric(rng, cfg.width_shift_range * w as f64);
    let shear = symmetric(rng, cfg.shear_range);
    let zx = 1.0 + symmetric(rng, cfg.zoom_range);
    let zy = 1.0 + symmetric(rng, cfg.zoom_range);
    let coin: f64 = rng.gen();
    AffineParams {
        theta,
        tx,
        ty,
        shear,
        zx,
        zy,
        flip: cfg.horizontal_flip && coin < 0.5,
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn translate(r: f64, c: f64) -> Mat3 {
    [[1.0, 0.0, r], [0.0, 1.0, c], [0.0, 0.0, 1.0]]
}

/// Forward transform matrix for an `h x w` image.
pub fn affine_matrix(p: &AffineParams, h: usize, w: usize) -> Mat3 {
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = p.theta.to_radians().sin_cos();
    let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    // column offset proportional to row
    let shear = [[1.0, 0.0, 0.0], [p.shear.tan(), 1.0, 0.0], [0.0, 0.0, 1.0]];
    let zoom = [[p.zx, 0.0, 0.0], [0.0, p.zy, 0.0], [0.0, 0.0, 1.0]];
    [
        translate(cr, cc),
        rot,
        shear,
        zoom,
        translate(p.tx, p.ty),
        translate(-cr, -cc),
    ]
    .iter()
    .fold(translate(0.0, 0.0), |acc, m| mat_mul(&acc, m))
}

fn invert_affine(m: &Mat3) -> Result<Mat3> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Param("affine transform is singular (zero zoom?)".into()));
    }
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    let (tr, tc) = (m[0][2], m[1][2]);
    Ok([
        [a, b, -(a * tr + b * tc)],
        [c, d, -(c * tr + d * tc)],
        [0.0, 0.0, 1.0],
    ])
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("expected a single h x w x c image, got {s:?}"))),
    }
}

/// Resamples `img` (h x w x c) under `p`, then flips columns if `p.flip`.
pub fn apply_affine(img: &Tensor, p: &AffineParams) -> Result<Tensor> {
    let (h, w, c) = image_dims(img)?;
    if p.zx == 0.0 || p.zy == 0.0 {
        return Err(Error::Param("zoom factors must be non-zero".into()));
    }
    let mut out = if p.is_identity_affine() {
        img.clone()
    } else {
        let inv = invert_affine(&affine_matrix(p, h, w))?;
        let src = img.data();
        let mut data = Vec::with_capacity(src.len());
        for r in 0..h {
            for col in 0..w {
                let (rf, cf) = (r as f64, col as f64);
                let sr = inv[0][0] * rf + inv[0][1] * cf + inv[0][2];
                let sc = inv[1][0] * rf + inv[1][1] * cf + inv[1][2];
                let sr = (sr.round().max(0.0) as usize).min(h - 1);
                let sc = (sc.round().max(0.0) as usize).min(w - 1);
                let at = (sr * w + sc) * c;
                data.extend_from_slice(&src[at..at + c]);
            }
        }
        Tensor::new([h, w, c], data)?
    };
    if p.flip {
        flip_columns(&mut out, h, w, c);
    }
    Ok(out)
}

fn flip_columns(img: &mut Tensor, h: usize, w: usize, c: usize) {
    let data = img.data_mut();
    for row in data.chunks_mut(w * c).take(h) {
        for col in 0..w / 2 {
            for ch in 0..c {
                row.swap(col * c + ch, (w - 1 - col) * c + ch);
            }
        }
    }
}

pub fn rescale(img: &Tensor, factor: f64) -> Tensor {
    img.map(|v| (f64::from(v) * factor) as f32)
}

/// Training: random affine then rescale. Inference: rescale only.
pub fn augment_image<R: Rng + ?Sized>(
    img: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
    training: bool,
) -> Result<Tensor> {
    let (h, w, _) = image_dims(img)?;
    if !training {
        return Ok(rescale(img, cfg.rescale));
    }
    let p = sample_params(cfg, h, w, rng);
    Ok(rescale(&apply_affine(img, &p)?, cfg.rescale))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn img2x2() -> Tensor {
        Tensor::new([2, 2, 1], vec![1., 2., 3., 4.]).unwrap()
    }

    #[test]
    fn zero_config_gives_identity_params() {
        let cfg = AugmentConfig::identity(1.0);
        let p = sample_params(&cfg, 10, 10, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(p, AffineParams::IDENTITY);
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = AugmentConfig::default();
        let a = sample_params(&cfg, 150, 150, &mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_params(&cfg, 150, 150, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn theta_statistics() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let thetas: Vec<f64> = (0..100_000)
            .map(|_| sample_params(&cfg, 8, 8, &mut rng).theta)
            .collect();
        let mean = thetas.iter().sum::<f64>() / thetas.len() as f64;
        let min = thetas.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = thetas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mean.abs() <= 0.5, "mean {mean}");
        assert!(min < -39.0 && max > 39.0, "{min} {max}");
        assert!(min >= -40.0 && max <= 40.0);
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = Tensor::new([3, 4, 2], (0..24).map(|v| v as f32 * 1.7).collect()).unwrap();
        assert_eq!(apply_affine(&img, &AffineParams::IDENTITY).unwrap(), img);
    }

    #[test]
    fn rotate_180() {
        let p = AffineParams {
            theta: 180.0,
            ..AffineParams::IDENTITY
        };
        assert_eq!(apply_affine(&img2x2(), &p).unwrap().data(), &[4., 3., 2., 1.]);
    }

    #[test]
    fn flip_only() {
        let p = AffineParams {
            flip: true,
            ..AffineParams::IDENTITY
        };
        assert_eq!(apply_affine(&img2x2(), &p).unwrap().data(), &[2., 1., 4., 3.]);
    }

    #[test]
    fn shift_clamps_to_edge() {
        let img = Tensor::new([1, 4, 1], vec![1., 2., 3., 4.]).unwrap();
        let p = AffineParams {
            ty: 2.0,
            ..AffineParams::IDENTITY
        };
        assert_eq!(apply_affine(&img, &p).unwrap().data(), &[1., 1., 1., 2.]);
    }

    #[test]
    fn zero_zoom_rejected() {
        let p = AffineParams {
            zx: 0.0,
            ..AffineParams::IDENTITY
        };
        assert!(matches!(apply_affine(&img2x2(), &p), Err(Error::Param(_))));
    }

    #[test]
    fn inference_rescales_only() {
        let img = Tensor::new([1, 2, 1], vec![255., 0.]).unwrap();
        let cfg = AugmentConfig::default();
        let out = augment_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn identity_config_unit_rescale() {
        let img = Tensor::new([2, 2, 1], vec![9., 8., 7., 6.]).unwrap();
        let cfg = AugmentConfig::identity(1.0);
        let out = augment_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let mut bad = AugmentConfig::default();
        bad.rotation_range = 190.0;
        assert!(bad.validate().is_err());
        bad = AugmentConfig::default();
        bad.rescale = 0.0;
        assert!(bad.validate().is_err());
        bad = AugmentConfig::default();
        bad.zoom_range = -0.1;
        assert!(bad.validate().is_err());
    }
}
