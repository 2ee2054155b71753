//! Procedural rectangle scenes: filled boxes whose gray level encodes the
//! class, over a dark noisy background.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matching::GroundTruth;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side lengths as fractions of the image side.
    pub min_size: f64,
    pub max_size: f64,
    pub num_classes: usize,
    pub background: f64,
    /// Uniform pixel noise in `[-noise, noise]`.
    pub noise: f64,
    /// Largest IoU allowed between two objects.
    pub overlap_cap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 2,
            max_objects: 8,
            min_size: 0.1,
            max_size: 0.3,
            num_classes: 3,
            background: 0.1,
            noise: 0.05,
            overlap_cap: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn side_range(&self) -> (usize, usize) {
        let s = self.image_size as f64;
        let lo = (self.min_size * s).round().max(1.0) as usize;
        let hi = (self.max_size * s).round() as usize;
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.side_range();
        if self.image_size == 0 || self.num_classes == 0 {
            return bad("image size and class count must be positive".into());
        }
        if self.min_objects > self.max_objects {
            return bad(format!("object range [{}, {}] is empty", self.min_objects, self.max_objects));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) || lo > hi || lo > self.image_size {
            return bad(format!(
                "size range [{}, {}] does not fit a {}-pixel image",
                self.min_size, self.max_size, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.overlap_cap) {
            return bad("background, noise and overlap cap must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Fill level of a class, evenly spaced over `[0.4, 0.9]`.
    pub fn band(&self, class: usize) -> f64 {
        if self.num_classes <= 1 {
            0.65
        } else {
            0.4 + 0.5 * class as f64 / (self.num_classes - 1) as f64
        }
    }

    fn stream(&self, index: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    /// Row-major gray levels in `[0, 1]`.
    pub image: Vec<f64>,
    /// Boxes in pixel units.
    pub gts: Vec<GroundTruth>,
}

/// Deterministic scene for `(spec.seed, index)`.
pub fn generate(spec: &SyntheticSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = spec.stream(index);
    let s = spec.image_size;
    let (lo, hi) = spec.side_range();
    let want = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(want);
    let mut attempts = 0;
    while gts.len() < want && attempts < MAX_ATTEMPTS {
        attempts += 1;
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let x = rng.gen_range(0..=s - w);
        let y = rng.gen_range(0..=s - h);
        let class = rng.gen_range(0..spec.num_classes);
        let bbox = BBox::from_corners(x as f64, y as f64, (x + w) as f64, (y + h) as f64)?;
        if gts.iter().all(|g| iou(&g.bbox, &bbox) <= spec.overlap_cap) {
            gts.push(GroundTruth { class, bbox });
        }
    }
    let mut image = vec![spec.background; s * s];
    for g in &gts {
        let [x1, y1, x2, y2] = g.bbox.corners().map(|v| v as usize);
        let level = spec.band(g.class);
        for row in image[y1 * s..y2 * s].chunks_mut(s) {
            row[x1..x2].iter_mut().for_each(|p| *p = level);
        }
    }
    if spec.noise > 0.0 {
        for p in image.iter_mut() {
            *p = (*p + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
        }
    }
    Ok(Sample { index, image, gts })
}

#[derive(Serialize, Deserialize)]
struct Record {
    index: u64,
    gts: Vec<[f64; 5]>,
}

/// Writes `annotations.jsonl` (one record per sample, boxes as
/// `[class, cx, cy, w, h]` in pixels) and, if asked, `images/{index:06}.pgm`.
pub fn export(spec: &SyntheticSpec, n: u64, dir: &Path, images: bool) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("annotations.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let img_dir = dir.join("images");
    if images {
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    }
    for index in 0..n {
        let sample = generate(spec, index)?;
        let record = Record {
            index,
            gts: sample
                .gts
                .iter()
                .map(|g| [g.class as f64, g.bbox.cx, g.bbox.cy, g.bbox.w, g.bbox.h])
                .collect(),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::json(&path, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        if images {
            let p = img_dir.join(format!("{index:06}.pgm"));
            write_pgm(&p, &sample.image, spec.image_size, spec.image_size)?;
        }
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads annotations written by [`export`].
pub fn reload(path: &Path) -> Result<Vec<(u64, Vec<GroundTruth>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        let gts = r
            .gts
            .iter()
            .map(|g| {
                Ok(GroundTruth {
                    class: g[0] as usize,
                    bbox: BBox::new(g[1], g[2], g[3], g[4])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((r.index, gts));
    }
    Ok(out)
}

/// 8-bit binary PGM of values in `[0, 1]`.
pub fn write_pgm(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM written by [`write_pgm`] back to `[0, 1]` values.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Contract(format!("{}: not a binary 8-bit PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos..pos + w * h).ok_or_else(bad)?;
    Ok((w, h, data.iter().map(|&b| b as f64 / 255.0).collect()))
}
