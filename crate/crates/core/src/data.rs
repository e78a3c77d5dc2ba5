//! Synthetic shapes dataset and JSON-lines annotation persistence.
//!
//! Images are textured backgrounds with 1-4 colored shapes; the shape kind is
//! the class. Generation is bit-deterministic: every sample draws from its own
//! seeded stream, so `(n, seed, image_size, num_classes)` fully determines the
//! output.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxXYWH;
use crate::error::{Error, Result};
use crate::rng;

/// One image with its ground-truth boxes and class labels.
///
/// Pixels are CHW, values in `[0, 255]`. Labels are `1..=C`; 0 is reserved
/// for background.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Array3<f64>,
    pub boxes: Vec<BoxXYWH>,
    pub labels: Vec<usize>,
}

impl ImageSample {
    /// Check the type invariants against a frame and class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (h, w) = (self.pixels.shape()[1] as f64, self.pixels.shape()[2] as f64);
        if self.boxes.len() != self.labels.len() {
            return Err(Error::Validation(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        for p in self.pixels.iter() {
            if !(0.0..=255.0).contains(p) {
                return Err(Error::Validation(format!("pixel value {p} outside [0,255]")));
            }
        }
        for (b, l) in self.boxes.iter().zip(&self.labels) {
            validate_box(b, h, w)?;
            if *l == 0 || *l > num_classes {
                return Err(Error::Validation(format!("label {l} outside 1..={num_classes}")));
            }
        }
        Ok(())
    }
}

fn validate_box(b: &BoxXYWH, h: f64, w: f64) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::Validation(format!("degenerate box w={} h={}", b.w, b.h)));
    }
    if b.x < 0.0 || b.y < 0.0 || b.x + b.w > w || b.y + b.h > h {
        return Err(Error::Validation(format!(
            "box ({}, {}, {}, {}) outside {w}x{h} frame",
            b.x, b.y, b.w, b.h
        )));
    }
    Ok(())
}

/// Annotation record for one image, path relative to the annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

/// Dataset index: class names, frame size and the ordered sample records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    /// (height, width)
    pub image_size: (usize, usize),
    pub samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "type")]
    kind: String,
    classes: Vec<String>,
    image_size: [usize; 2],
}

/// Generated dataset: manifest plus in-memory images and the per-class count
/// log used by generation audits.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageSample>,
    /// class id (1-based) -> number of generated instances; index 0 unused.
    pub class_counts: Vec<usize>,
}

/// Manifest plus decoded images, ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageSample>,
}

impl SyntheticDataset {
    pub fn to_loaded(&self) -> LoadedDataset {
        LoadedDataset {
            manifest: self.manifest.clone(),
            images: self.images.clone(),
        }
    }
}

const SHAPE_NAMES: [&str; 8] = [
    "circle", "square", "triangle", "diamond", "cross", "ring", "star", "hexagon",
];

/// Membership test for shape `kind` in normalized box coordinates
/// `(u, v) in [-1, 1]^2`. Every shape touches its bounding box edges, so the
/// recorded boxes are tight.
fn shape_contains(kind: usize, u: f64, v: f64) -> bool {
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => true,
        2 => u.abs() <= (v + 1.0) / 2.0,
        3 => u.abs() + v.abs() <= 1.0,
        4 => u.abs() <= 1.0 / 3.0 || v.abs() <= 1.0 / 3.0,
        5 => {
            let r2 = u * u + v * v;
            (0.25..=1.0).contains(&r2)
        }
        6 => u.abs().sqrt() + v.abs().sqrt() <= 1.0,
        7 => v.abs() <= 1.0 && v.abs() <= 2.0 * (1.0 - u.abs()),
        _ => unreachable!("shape kind"),
    }
}

/// Render `n` deterministic images of `image_size` (h, w) with 1-4 shapes of
/// `num_classes` kinds each.
pub fn generate_shapes_dataset(
    n: usize,
    seed: u64,
    image_size: (usize, usize),
    num_classes: usize,
) -> Result<SyntheticDataset> {
    let (h, w) = image_size;
    if n == 0 {
        return Err(Error::Param("dataset size must be >= 1".into()));
    }
    if h < 64 || w < 64 {
        return Err(Error::Param(format!("image size {h}x{w} below 64x64 minimum")));
    }
    if !(2..=8).contains(&num_classes) {
        return Err(Error::Param(format!("num_classes {num_classes} outside [2, 8]")));
    }

    let mut images = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut class_counts = vec![0usize; num_classes + 1];
    for i in 0..n {
        let mut stream = rng::stream(seed, "sample", &[i as u64]);
        let sample = render_sample(&mut stream, h, w, num_classes);
        for &l in &sample.labels {
            class_counts[l] += 1;
        }
        records.push(SampleRecord {
            image: format!("images/{i:05}.png"),
            boxes: sample.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
            labels: sample.labels.clone(),
        });
        images.push(sample);
    }

    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            class_names: SHAPE_NAMES[..num_classes].iter().map(|s| s.to_string()).collect(),
            image_size,
            samples: records,
        },
        images,
        class_counts,
    })
}

fn render_sample(stream: &mut impl Rng, h: usize, w: usize, num_classes: usize) -> ImageSample {
    // Background: dim base color, two sinusoidal fields, per-pixel noise.
    let base: [f64; 3] = [
        stream.random_range(20.0..90.0),
        stream.random_range(20.0..90.0),
        stream.random_range(20.0..90.0),
    ];
    let mut fields = Vec::new();
    for _ in 0..2 {
        fields.push((
            stream.random_range(4.0..18.0),                          // amplitude
            stream.random_range(1.0..4.0) * std::f64::consts::TAU / w as f64,
            stream.random_range(1.0..4.0) * std::f64::consts::TAU / h as f64,
            stream.random_range(0.0..std::f64::consts::TAU),         // phase
        ));
    }
    let mut canvas = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut wave = 0.0;
            for &(a, fx, fy, p) in &fields {
                wave += a * (fx * x as f64 + fy * y as f64 + p).sin();
            }
            let noise = stream.random_range(-8.0..8.0);
            for c in 0..3 {
                let v = (base[c] + wave + noise).clamp(0.0, 255.0);
                canvas[(c * h + y) * w + x] = v.round() as u8;
            }
        }
    }

    // Shapes: 1-4 instances, sizes 16..=min(h,w)/2 capped at 64, low overlap.
    let count = stream.random_range(1..=4usize);
    let smax = (h.min(w) / 2).clamp(16, 64);
    let mut boxes: Vec<BoxXYWH> = Vec::new();
    let mut labels = Vec::new();
    for shape_idx in 0..count {
        let kind = stream.random_range(0..num_classes);
        let size = stream.random_range(16..=smax);
        let color: [u8; 3] = [
            stream.random_range(110..=255u32) as u8,
            stream.random_range(110..=255u32) as u8,
            stream.random_range(110..=255u32) as u8,
        ];
        let mut placed = None;
        for _attempt in 0..20 {
            let x0 = stream.random_range(0..=(w - size));
            let y0 = stream.random_range(0..=(h - size));
            let candidate = BoxXYWH::new(x0 as f64, y0 as f64, size as f64, size as f64);
            let overlap = boxes.iter().any(|b| crate::boxes::iou(b, &candidate) > 0.3);
            if !overlap || shape_idx == 0 {
                placed = Some((x0, y0));
                break;
            }
        }
        let Some((x0, y0)) = placed else { continue };
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let u = ((x - x0) as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                let v = ((y - y0) as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                if shape_contains(kind, u, v) {
                    for c in 0..3 {
                        canvas[(c * h + y) * w + x] = color[c];
                    }
                }
            }
        }
        boxes.push(BoxXYWH::new(x0 as f64, y0 as f64, size as f64, size as f64));
        labels.push(kind + 1);
    }

    let pixels = Array3::from_shape_fn((3, h, w), |(c, y, x)| canvas[(c * h + y) * w + x] as f64);
    ImageSample { pixels, boxes, labels }
}

/// Write a manifest as JSON lines (header first, then one record per line).
/// Writes to a temp file and renames, so a failed save never leaves a
/// partial artifact.
pub fn save_annotations(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let header = HeaderLine {
        kind: "manifest".into(),
        classes: manifest.class_names.clone(),
        image_size: [manifest.image_size.0, manifest.image_size.1],
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Json(e.to_string()))?;
    out.extend_from_slice(line.as_bytes());
    out.push(b'\n');
    for record in &manifest.samples {
        let line = serde_json::to_string(record).map_err(|e| Error::Json(e.to_string()))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

/// Read a JSON-lines manifest, rejecting malformed records with the 1-based
/// line number. Never repairs data.
pub fn load_annotations(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Annotation { line: 1, msg: "empty file, missing manifest header".into() })?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: HeaderLine = serde_json::from_str(&first)
        .map_err(|e| Error::Annotation { line: 1, msg: format!("bad header: {e}") })?;
    if header.kind != "manifest" {
        return Err(Error::Annotation {
            line: 1,
            msg: format!("expected type \"manifest\", got \"{}\"", header.kind),
        });
    }
    let (h, w) = (header.image_size[0] as f64, header.image_size[1] as f64);
    let num_classes = header.classes.len();

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Annotation { line: lineno, msg: e.to_string() })?;
        if record.boxes.len() != record.labels.len() {
            return Err(Error::Annotation {
                line: lineno,
                msg: format!("{} boxes but {} labels", record.boxes.len(), record.labels.len()),
            });
        }
        for b in &record.boxes {
            let bx = BoxXYWH::new(b[0], b[1], b[2], b[3]);
            validate_box(&bx, h, w).map_err(|e| Error::Annotation { line: lineno, msg: e.to_string() })?;
        }
        for &l in &record.labels {
            if l == 0 || l > num_classes {
                return Err(Error::Annotation {
                    line: lineno,
                    msg: format!("unknown class {l} (have {num_classes} classes)"),
                });
            }
        }
        samples.push(record);
    }

    Ok(DatasetManifest {
        class_names: header.classes,
        image_size: (header.image_size[0], header.image_size[1]),
        samples,
    })
}

/// Persist a generated dataset: PNG images under `dir/images/` plus
/// `dir/annotations.jsonl`. Returns the annotation path.
pub fn save_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for (record, sample) in dataset.manifest.samples.iter().zip(&dataset.images) {
        let path = dir.join(&record.image);
        save_png(&sample.pixels, &path)?;
    }
    let ann = dir.join("annotations.jsonl");
    save_annotations(&dataset.manifest, &ann)?;
    Ok(ann)
}

/// Load a manifest and decode every referenced image.
pub fn load_dataset(annotations: &Path) -> Result<LoadedDataset> {
    let manifest = load_annotations(annotations)?;
    let base = annotations.parent().unwrap_or(Path::new("."));
    let mut images = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let path = base.join(&record.image);
        let pixels = load_png(&path)?;
        if pixels.shape()[1] != manifest.image_size.0 || pixels.shape()[2] != manifest.image_size.1 {
            return Err(Error::Validation(format!(
                "image {} is {}x{}, manifest says {}x{}",
                record.image,
                pixels.shape()[1],
                pixels.shape()[2],
                manifest.image_size.0,
                manifest.image_size.1
            )));
        }
        images.push(ImageSample {
            pixels,
            boxes: record.boxes.iter().map(|b| BoxXYWH::new(b[0], b[1], b[2], b[3])).collect(),
            labels: record.labels.clone(),
        });
    }
    Ok(LoadedDataset { manifest, images })
}

/// Save CHW `[0,255]` pixels as an 8-bit RGB PNG (values rounded).
pub fn save_png(pixels: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                pixels[[0, y, x]].clamp(0.0, 255.0).round() as u8,
                pixels[[1, y, x]].clamp(0.0, 255.0).round() as u8,
                pixels[[2, y, x]].clamp(0.0, 255.0).round() as u8,
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut buf);
    use image::ImageEncoder;
    encoder
        .write_image(img.as_raw(), w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?;
    atomic_write(path, &buf)
}

/// Decode an 8-bit RGB PNG into CHW `[0,255]` pixels.
pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64
    }))
}

/// Write bytes to `path` via a temp file + rename in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shapes_dataset(10, 7, (128, 128), 3).unwrap();
        let b = generate_shapes_dataset(10, 7, (128, 128), 3).unwrap();
        assert_eq!(a.manifest, b.manifest);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn single_sample_stays_in_frame() {
        let d = generate_shapes_dataset(1, 0, (64, 64), 2).unwrap();
        assert_eq!(d.images.len(), 1);
        for s in &d.images {
            s.validate(2).unwrap();
        }
    }

    #[test]
    fn class_histogram_matches_recount() {
        let d = generate_shapes_dataset(200, 3, (128, 128), 3).unwrap();
        // Independent recount straight off the manifest records.
        let mut counts = vec![0usize; 4];
        for r in &d.manifest.samples {
            for &l in &r.labels {
                counts[l] += 1;
            }
        }
        assert_eq!(counts, d.class_counts);
        assert!(counts[1..].iter().all(|&c| c > 0), "all classes present: {counts:?}");
    }

    #[test]
    fn box_invariants_hold_over_many_samples() {
        let d = generate_shapes_dataset(1000, 11, (64, 64), 8).unwrap();
        for s in &d.images {
            s.validate(8).unwrap();
            assert!(!s.boxes.is_empty());
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(generate_shapes_dataset(0, 0, (64, 64), 3).is_err());
        assert!(generate_shapes_dataset(1, 0, (32, 64), 3).is_err());
        assert!(generate_shapes_dataset(1, 0, (64, 64), 1).is_err());
        assert!(generate_shapes_dataset(1, 0, (64, 64), 9).is_err());
    }
}
