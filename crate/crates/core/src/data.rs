//! Directory-per-class datasets: scanning, stratified splitting, decoding,
//! bilinear resizing and batch assembly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_image, AugmentConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            _ => Err(Error::Param(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub class: usize,
    pub split: SplitTag,
}

/// Class names (lexicographic, label = position) and every sample with its split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    /// Diagnostics collected while scanning.
    pub warnings: Vec<String>,
}

/// One line of the split file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub path: PathBuf,
    pub class: String,
    pub split: SplitTag,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["ppm", "pgm", "pnm", "png", "jpg", "jpeg"];

fn probe_image(path: &Path) -> std::result::Result<(), String> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
        return Err("not an image file".into());
    }
    if matches!(ext.as_str(), "ppm" | "pgm" | "pnm") {
        let bytes = fs::read(path).map_err(|e| e.to_string())?;
        pnm::decode(&bytes).map(|_| ())
    } else {
        image::ImageReader::open(path)
            .and_then(|r| r.with_guessed_format())
            .map_err(|e| e.to_string())?
            .into_dimensions()
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

/// Lists `<root>/<class>/<file>` images, classes and files in lexicographic order.
/// Undecodable files are skipped with a warning.
pub fn scan(root: &Path) -> Result<DatasetIndex> {
    let mut class_dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    let mut index = DatasetIndex::default();
    for (class, (name, dir)) in class_dirs.into_iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let probes: Vec<_> = files.par_iter().map(|p| probe_image(p)).collect();
        let before = index.samples.len();
        for (path, probe) in files.into_iter().zip(probes) {
            match probe {
                Ok(()) => index.samples.push(Sample {
                    path,
                    class,
                    split: SplitTag::Train,
                }),
                Err(reason) => {
                    let msg = format!("skipping {}: {reason}", path.display());
                    warn!("{msg}");
                    index.warnings.push(msg);
                }
            }
        }
        if index.samples.len() == before {
            let msg = format!("class directory {} has no images", dir.display());
            warn!("{msg}");
            index.warnings.push(msg);
        }
        index.classes.push(name);
    }
    Ok(index)
}

pub const PAPER_FRACTIONS: [f64; 3] = [0.682, 0.148, 0.170];

/// Stratified split: each class is shuffled with its own seeded stream, then cut
/// at the cumulative fractions (floor for train and val, remainder to test).
pub fn split(index: &DatasetIndex, fractions: [f64; 3], seed: u64) -> Result<DatasetIndex> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6
    {
        return Err(Error::Param(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut out = index.clone();
    for class in 0..index.classes.len() {
        let mut members: Vec<usize> = (0..index.samples.len())
            .filter(|&i| index.samples[i].class == class)
            .collect();
        members.shuffle(&mut stream(seed, Domain::Split, &[class as u64]));
        // rounded cumulative boundaries keep every partition within one sample of its quota
        let n = members.len() as f64;
        let n_train = (n * fractions[0]).round() as usize;
        let n_val = ((n * (fractions[0] + fractions[1])).round() as usize).min(members.len()) - n_train;
        for (rank, &i) in members.iter().enumerate() {
            out.samples[i].split = if rank < n_train {
                SplitTag::Train
            } else if rank < n_train + n_val {
                SplitTag::Val
            } else {
                SplitTag::Test
            };
        }
    }
    Ok(out)
}

impl DatasetIndex {
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == tag)
            .collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.samples.iter().filter(|s| s.split == tag).count()
    }

    pub fn records(&self) -> Vec<SplitRecord> {
        self.samples
            .iter()
            .map(|s| SplitRecord {
                path: s.path.clone(),
                class: self.classes[s.class].clone(),
                split: s.split,
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.records())?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_records(records: Vec<SplitRecord>) -> Result<Self> {
        let mut classes: Vec<String> = records.iter().map(|r| r.class.clone()).collect();
        classes.sort();
        classes.dedup();
        let samples = records
            .into_iter()
            .map(|r| Sample {
                class: classes.binary_search(&r.class).expect("class collected above"),
                path: r.path,
                split: r.split,
            })
            .collect();
        Ok(Self {
            classes,
            samples,
            warnings: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_records(serde_json::from_str(&text)?)
    }
}

/// Minimal binary PNM (P5 grayscale / P6 RGB) codec.
pub mod pnm {
    pub struct Decoded {
        pub width: usize,
        pub height: usize,
        pub channels: usize,
        /// Samples normalized to 0..=255.
        pub data: Vec<f32>,
    }

    fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated header".into());
        }
        Ok(&bytes[start..*pos])
    }

    fn number(bytes: &[u8], pos: &mut usize) -> Result<usize, String> {
        let t = token(bytes, pos)?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad header field {:?}", String::from_utf8_lossy(t)))
    }

    pub fn decode(bytes: &[u8]) -> Result<Decoded, String> {
        let mut pos = 0;
        let channels = match token(bytes, &mut pos)? {
            b"P5" => 1,
            b"P6" => 3,
            other => return Err(format!("unsupported magic {:?}", String::from_utf8_lossy(other))),
        };
        let width = number(bytes, &mut pos)?;
        let height = number(bytes, &mut pos)?;
        let maxval = number(bytes, &mut pos)?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(format!("invalid header {width}x{height} maxval {maxval}"));
        }
        pos += 1; // single whitespace before the raster
        let wide = maxval > 255;
        let count = width * height * channels;
        let need = count * if wide { 2 } else { 1 };
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| format!("truncated raster: need {need} bytes"))?;
        let scale = 255.0 / maxval as f32;
        let data = if wide {
            raster
                .chunks_exact(2)
                .map(|b| f32::from(u16::from_be_bytes([b[0], b[1]])) * scale)
                .collect()
        } else if maxval == 255 {
            raster.iter().map(|&b| f32::from(b)).collect()
        } else {
            raster.iter().map(|&b| f32::from(b) * scale).collect()
        };
        Ok(Decoded {
            width,
            height,
            channels,
            data,
        })
    }

    /// Encodes an 8-bit raster; `channels` is 1 (P5) or 3 (P6).
    pub fn encode(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Vec<u8> {
        let magic = if channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
        out.extend_from_slice(pixels);
        out
    }
}

fn decode_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decodes to an `h x w x 3` tensor with values in 0..=255.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, c, data) = if bytes.first() == Some(&b'P') {
        let d = pnm::decode(&bytes).map_err(|r| decode_error(path, r))?;
        (d.width, d.height, d.channels, d.data)
    } else {
        let img = image::load_from_memory(&bytes).map_err(|e| decode_error(path, e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        (
            w as usize,
            h as usize,
            3,
            rgb.into_raw().into_iter().map(f32::from).collect(),
        )
    };
    let data = if c == 1 {
        data.iter().flat_map(|&v| [v, v, v]).collect()
    } else {
        data
    };
    Tensor::new([h, w, 3], data)
}

/// Bilinear resize with half-pixel centers: `src = (dst + 0.5) · in/out − 0.5`, clamped.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w, c] = img.shape()[..] else {
        return Err(Error::Shape(format!("expected h x w x c, got {:?}", img.shape())));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let coord = |d: usize, inn: usize, out: usize| {
        let s = ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inn - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let at = |yy: usize, xx: usize| f64::from(src[(yy * w + xx) * c + ch]);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::new([out_h, out_w, c], data)
}

/// Decode and resize to `size x size x 3`, values in 0..=255.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    resize_bilinear(&decode_image(path)?, size, size)
}

/// Writes an `h x w x 3` tensor (values 0..=255) as PPM or, by extension, PNG.
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    let [h, w, 3] = img.shape()[..] else {
        return Err(Error::Shape(format!("expected h x w x 3, got {:?}", img.shape())));
    };
    let pixels: Vec<u8> = img
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        image::RgbImage::from_raw(w as u32, h as u32, pixels)
            .expect("buffer size matches dims")
            .save(path)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    } else {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&pnm::encode(w, h, 3, &pixels))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `n x size x size x 3`
    pub x: Tensor,
    pub y: Vec<usize>,
    /// Sample indices into the dataset.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Storage {
    Files,
    Memory(Vec<Tensor>),
}

/// A split dataset plus the decoding and augmentation settings used to feed it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub image_size: usize,
    storage: Storage,
}

impl Dataset {
    pub fn from_index(index: DatasetIndex, image_size: usize) -> Self {
        Self {
            index,
            image_size,
            storage: Storage::Files,
        }
    }

    /// In-memory dataset; every image must already be `size x size x 3` in 0..=255.
    pub fn in_memory(classes: Vec<String>, items: Vec<(Tensor, usize, SplitTag)>) -> Result<Self> {
        let size = items
            .first()
            .map(|(t, _, _)| t.shape()[0])
            .ok_or_else(|| Error::Dataset("no images".into()))?;
        let mut samples = Vec::with_capacity(items.len());
        let mut images = Vec::with_capacity(items.len());
        for (i, (img, class, split)) in items.into_iter().enumerate() {
            if img.shape() != [size, size, 3] {
                return Err(Error::Shape(format!(
                    "image {i} has shape {:?}, expected [{size}, {size}, 3]",
                    img.shape()
                )));
            }
            if class >= classes.len() {
                return Err(Error::Dataset(format!("image {i} has label {class} out of range")));
            }
            samples.push(Sample {
                path: PathBuf::from(format!("memory:{i}")),
                class,
                split,
            });
            images.push(img);
        }
        Ok(Self {
            index: DatasetIndex {
                classes,
                samples,
                warnings: Vec::new(),
            },
            image_size: size,
            storage: Storage::Memory(images),
        })
    }

    pub fn len(&self) -> usize {
        self.index.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.samples.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.index.samples[i].class
    }

    /// Raw `size x size x 3` image (0..=255) of sample `i`.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        match &self.storage {
            Storage::Memory(images) => Ok(images[i].clone()),
            Storage::Files => load_image(&self.index.samples[i].path, self.image_size),
        }
    }
}

/// How one pass over a split is ordered and preprocessed.
#[derive(Clone, Copy, Debug)]
pub struct BatchOptions<'a> {
    pub split: SplitTag,
    pub batch_size: usize,
    pub augment: &'a AugmentConfig,
    /// Apply random augmentation (otherwise rescale only).
    pub augment_images: bool,
    /// Shuffle the sample order for this epoch.
    pub shuffle: bool,
    pub seed: u64,
    pub epoch: usize,
    /// Decode pool; the global rayon pool when `None`.
    pub pool: Option<&'a rayon::ThreadPool>,
}

/// Sample order for one pass, chunked into batches (the last one may be short).
pub fn batch_plan(data: &Dataset, opts: &BatchOptions<'_>) -> Result<Vec<Vec<usize>>> {
    if opts.batch_size == 0 {
        return Err(Error::Param("batch_size must be >= 1".into()));
    }
    let mut order = data.index.indices(opts.split);
    if order.is_empty() {
        return Err(Error::Dataset(format!("split {} is empty", opts.split)));
    }
    if opts.shuffle {
        order.shuffle(&mut stream(opts.seed, Domain::Shuffle, &[opts.epoch as u64]));
    }
    Ok(order.chunks(opts.batch_size).map(<[usize]>::to_vec).collect())
}

/// Decodes and preprocesses the listed samples. Each image's augmentation stream
/// depends only on `(seed, epoch, sample index)`, so parallel decoding is reproducible.
pub fn load_batch(data: &Dataset, indices: &[usize], opts: &BatchOptions<'_>) -> Result<Batch> {
    let decode = || {
        indices
            .par_iter()
            .map(|&i| {
                let raw = data.image(i)?;
                let mut rng = stream(opts.seed, Domain::Augment, &[opts.epoch as u64, i as u64]);
                augment_image(&raw, opts.augment, &mut rng, opts.augment_images)
            })
            .collect::<Result<Vec<Tensor>>>()
    };
    let images = match opts.pool {
        Some(pool) => pool.install(decode)?,
        None => decode()?,
    };
    let size = data.image_size;
    let mut x = Vec::with_capacity(indices.len() * size * size * 3);
    for img in images {
        x.extend_from_slice(img.data());
    }
    Ok(Batch {
        x: Tensor::new([indices.len(), size, size, 3], x)?,
        y: indices.iter().map(|&i| data.label(i)).collect(),
        indices: indices.to_vec(),
    })
}

/// All batches for one pass, in plan order.
pub fn batches<'a>(
    data: &'a Dataset,
    opts: BatchOptions<'a>,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let plan = batch_plan(data, &opts)?;
    Ok(plan.into_iter().map(move |ix| load_batch(data, &ix, &opts)))
}
