//! Generator for a small 11-class shapes dataset laid out as one directory per class.

use std::path::Path;

use rand::Rng;

use crate::data::pnm;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

/// Class names, sorted, so directory order equals label order.
pub const SHAPE_CLASSES: [&str; 11] = [
    "circle", "cross", "diamond", "dots", "frame", "hbar", "ring", "square", "triangle", "vbar",
    "xshape",
];

/// Membership test in shape-local coordinates, roughly the unit disc.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => u * u + v * v <= 1.0,
        1 => (au <= 0.28 && av <= 1.0) || (av <= 0.28 && au <= 1.0),
        2 => au + av <= 1.0,
        3 => {
            let (du, dv) = (au - 0.55, av - 0.55);
            du * du + dv * dv <= 0.32 * 0.32
        }
        4 => {
            let m = au.max(av);
            (0.55..=0.9).contains(&m)
        }
        5 => av <= 0.3 && au <= 1.0,
        6 => (0.6..=1.0).contains(&(u * u + v * v).sqrt()),
        7 => au.max(av) <= 0.8,
        // apex up: rows grow downward
        8 => (-0.85..=0.85).contains(&v) && au <= (v + 0.85) / 1.7 * 0.95,
        9 => au <= 0.3 && av <= 1.0,
        10 => u * u + v * v <= 1.0 && ((u - v).abs() <= 0.36 || (u + v).abs() <= 0.36),
        _ => false,
    }
}

/// Half-width of the uniform per-channel pixel noise.
const NOISE: f64 = 40.0;

/// One `size x size x 3` image of `class`, values 0..=255, with random colors,
/// position, scale and pixel noise.
pub fn render<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> Result<Tensor> {
    if class >= SHAPE_CLASSES.len() {
        return Err(Error::Param(format!("no shape class {class}")));
    }
    if size < 8 {
        return Err(Error::Param(format!("image size {size} too small (min 8)")));
    }
    let mut bg = [0; 3].map(|_: u8| rng.gen_range(0.0..110.0f64));
    let mut fg = [0; 3].map(|_: u8| rng.gen_range(130.0..=255.0f64));
    if rng.gen_bool(0.5) {
        std::mem::swap(&mut bg, &mut fg);
    }
    let s = size as f64;
    let radius = rng.gen_range(0.22..0.4) * s;
    let cr = (s - 1.0) / 2.0 + rng.gen_range(-0.14..0.14) * s;
    let cc = (s - 1.0) / 2.0 + rng.gen_range(-0.14..0.14) * s;
    // small tilt only: bars and diamonds must stay distinguishable from their rotations
    let (sin, cos) = rng.gen_range(-0.25f64..0.25).sin_cos();
    let mut data = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = ((c as f64 - cc) / radius, (r as f64 - cr) / radius);
            let (u, v) = (cos * x + sin * y, -sin * x + cos * y);
            let base = if inside(class, u, v) { fg } else { bg };
            for ch in base {
                let noisy = ch + rng.gen_range(-NOISE..NOISE);
                data.push(noisy.round().clamp(0.0, 255.0) as f32);
            }
        }
    }
    Tensor::new([size, size, 3], data)
}

/// Writes `per_class` PPM images per class under `root/<class>/`. Returns the image count.
pub fn generate(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<usize> {
    for (k, name) in SHAPE_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let mut rng = stream(seed, Domain::Synthetic, &[k as u64, i as u64]);
            let img = render(k, size, &mut rng)?;
            let bytes: Vec<u8> = img.data().iter().map(|&v| v as u8).collect();
            let path = dir.join(format!("{name}_{i:04}.ppm"));
            std::fs::write(&path, pnm::encode(size, size, 3, &bytes)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(per_class * SHAPE_CLASSES.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_sorted() {
        assert!(SHAPE_CLASSES.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn every_class_draws_something() {
        for k in 0..SHAPE_CLASSES.len() {
            let n = (0..64 * 64)
                .filter(|i| inside(k, (i % 64) as f64 / 32.0 - 1.0, (i / 64) as f64 / 32.0 - 1.0))
                .count();
            assert!(n > 200 && n < 64 * 64 - 200, "class {k}: {n}");
        }
    }

    #[test]
    fn generation_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(generate(dir.path(), 2, 16, 3).unwrap(), 22);
        let a = std::fs::read(dir.path().join("ring/ring_0001.ppm")).unwrap();
        let other = tempfile::tempdir().unwrap();
        generate(other.path(), 2, 16, 3).unwrap();
        assert_eq!(a, std::fs::read(other.path().join("ring/ring_0001.ppm")).unwrap());
        let index = crate::data::scan(dir.path()).unwrap();
        assert_eq!(index.classes, SHAPE_CLASSES);
        assert_eq!(index.samples.len(), 22);
    }
}
