//! Dataset ingestion and the per-class subsampling protocol.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DataConfig, DataFormat, SyntheticConfig};
use crate::augment::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: usize,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Indices of a per-class subsample: for every class, the first
/// `min(cap, available)` of a seeded shuffle. The result is sorted, so without
/// a cap it is simply `0..labels.len()`.
pub fn subsample(labels: &[usize], classes: usize, cap: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::Data(format!("label {l} out of range for {classes} classes")))?
            .push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {c} has no training images")));
    }
    let Some(cap) = cap else {
        return Ok((0..labels.len()).collect());
    };
    let mut out = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        out.extend(idx);
    }
    out.sort_unstable();
    Ok(out)
}

/// Loads train and validation splits and applies the training cap.
pub fn ingest(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let mut ds = match cfg.format {
        DataFormat::Synthetic => synthetic(&cfg.synthetic)?,
        DataFormat::Packed => read_packed(&cfg.resolved_path()?)?,
        DataFormat::ImageTree => read_image_tree(&cfg.resolved_path()?, cfg.image_size)?,
    };
    let labels: Vec<usize> = ds.train.iter().map(|s| s.label).collect();
    let keep = subsample(&labels, ds.classes, cfg.per_class, seed)?;
    if keep.len() != ds.train.len() {
        let mut train = std::mem::take(&mut ds.train).into_iter().map(Some).collect::<Vec<_>>();
        ds.train = keep
            .iter()
            .map(|&i| train[i].take().expect("indices are distinct"))
            .collect();
    }
    Ok(ds)
}

const SHAPE_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "cross", "ring", "hbars", "vbars", "saltire", "checker", "diamond",
];

/// Whether normalised coordinates `(u, v)` fall inside shape `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let box9 = u.abs() <= 0.9 && v.abs() <= 0.9;
    match class % 10 {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) / 1.6 * 0.9,
        3 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0),
        4 => (0.55..=1.0).contains(&(u * u + v * v).sqrt()),
        5 => box9 && ((v + 0.9) / 0.36).floor() as i64 % 2 == 0,
        6 => box9 && ((u + 0.9) / 0.36).floor() as i64 % 2 == 0,
        7 => box9 && ((u - v).abs() <= 0.25 || (u + v).abs() <= 0.25),
        8 => box9 && (((u + 0.9) / 0.45).floor() as i64 + ((v + 0.9) / 0.45).floor() as i64) % 2 == 0,
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One generated image: a class shape at a random position, scale and
/// rotation over a noisy background with a few distractor patches.
pub fn synthetic_image(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let bg = random_color(rng);
    let mut fg = random_color(rng);
    while (0..3).map(|c| (fg[c] - bg[c]).abs()).sum::<f64>() < 0.6 {
        fg = random_color(rng);
    }
    let mut img = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                img[[c, y, x]] = bg[c] + rng.random_range(-0.08..0.08);
            }
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let col = random_color(rng);
        let w = rng.random_range(2..=(size / 6).max(2));
        let (y0, x0) = (rng.random_range(0..size - w), rng.random_range(0..size - w));
        for y in y0..y0 + w {
            for x in x0..x0 + w {
                for c in 0..3 {
                    img[[c, y, x]] = col[c];
                }
            }
        }
    }
    let r = rng.random_range(0.22..0.34) * s;
    let cy = rng.random_range(r..s - r);
    let cx = rng.random_range(r..s - r);
    let (sin, cos) = rng.random_range(-0.35f64..0.35).sin_cos();
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = ((y as f64 + 0.5 - cy) / r, (x as f64 + 0.5 - cx) / r);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            if inside(class, u, v) {
                for c in 0..3 {
                    img[[c, y, x]] = fg[c] + rng.random_range(-0.05..0.05);
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Image::new(img)
}

/// The generated shape dataset; image `i` of a split depends only on
/// `(cfg.seed, split, i)`.
pub fn synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.classes > SHAPE_NAMES.len() || cfg.size < 12 {
        return Err(Error::Data(format!(
            "synthetic data supports 1..={} classes and images of at least 12 pixels",
            SHAPE_NAMES.len()
        )));
    }
    let split = |stream: u64, per_class: usize| {
        (0..per_class * cfg.classes)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((stream << 32) | i as u64);
                let label = i % cfg.classes;
                Sample {
                    image: synthetic_image(label, cfg.size, &mut rng),
                    label,
                }
            })
            .collect::<Vec<_>>()
    };
    Ok(Dataset {
        classes: cfg.classes,
        class_names: SHAPE_NAMES[..cfg.classes].iter().map(|s| s.to_string()).collect(),
        train: split(1, cfg.train_per_class),
        val: split(2, cfg.val_per_class),
    })
}

pub const PACKED_SIDE: usize = 32;
const PACKED_RECORD: usize = 1 + 3 * PACKED_SIDE * PACKED_SIDE;

/// Decodes packed records: one label byte then planar RGB bytes.
pub fn decode_packed(bytes: &[u8]) -> Result<Vec<Sample>> {
    if !bytes.len().is_multiple_of(PACKED_RECORD) {
        return Err(Error::Data(format!(
            "packed batch of {} bytes is not a multiple of {PACKED_RECORD}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(PACKED_RECORD)
        .map(|r| Sample {
            label: r[0] as usize,
            image: Image::from_vec(
                3,
                PACKED_SIDE,
                PACKED_SIDE,
                r[1..].iter().map(|&b| b as f64 / 255.0).collect(),
            )
            .expect("record length checked"),
        })
        .collect())
}

/// Reads `data_batch_*.bin` (train) and `test_batch.bin` (validation);
/// class names come from `batches.meta.txt` when present.
pub fn read_packed(dir: &Path) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
    let mut train_files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Data(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let mut train = Vec::new();
    for f in &train_files {
        train.extend(decode_packed(&read(f)?)?);
    }
    let val = decode_packed(&read(&dir.join("test_batch.bin"))?)?;
    let classes = train.iter().chain(&val).map(|s| s.label + 1).max().unwrap_or(0);
    let class_names = match fs::read_to_string(dir.join("batches.meta.txt")) {
        Ok(text) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(_) => (0..classes).map(|c| c.to_string()).collect(),
    };
    Ok(Dataset {
        classes,
        class_names,
        train,
        val,
    })
}

/// Resizes so the shorter side equals `side`, preserving aspect ratio.
pub fn resize_short_side(img: &Image, side: usize) -> Image {
    let (_, h, w) = img.dims();
    let (nh, nw) = if h <= w {
        (side, ((w * side) as f64 / h as f64).round().max(1.0) as usize)
    } else {
        (((h * side) as f64 / w as f64).round().max(1.0) as usize, side)
    };
    img.resize(nh, nw)
}

fn decode_file(path: &Path, side: usize) -> Result<Image> {
    let rgb = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Array3::<f64>::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
        }
    }
    resize_short_side(&Image::new(data), side).center_crop(side, side)
}

fn read_split(root: &Path, classes: &[String], side: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (label, name) in classes.iter().enumerate() {
        let dir = root.join(name);
        let mut files: Vec<_> = match fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect(),
            Err(_) => Vec::new(),
        };
        files.sort();
        for f in files {
            out.push(Sample {
                image: decode_file(&f, side)?,
                label,
            });
        }
    }
    Ok(out)
}

/// Reads `train/<class>/*` and `val/<class>/*`; classes are the sorted
/// subdirectory names of `train`.
pub fn read_image_tree(dir: &Path, side: usize) -> Result<Dataset> {
    let train_dir = dir.join("train");
    let mut classes: Vec<String> = fs::read_dir(&train_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", train_dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("no class directories in {}", train_dir.display())));
    }
    Ok(Dataset {
        classes: classes.len(),
        train: read_split(&train_dir, &classes, side)?,
        val: read_split(&dir.join("val"), &classes, side)?,
        class_names: classes,
    })
}
