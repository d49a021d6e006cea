//! On-disk dataset: `images/NNNNNN.png` (RGB), `masks/NNNNNN.png` (1-bit)
//! and `manifest.jsonl` with one row per sample.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{render, Triplet};
use super::scene::{generate_scene, SceneSpec};
use super::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: u64,
    pub split: Split,
    pub expression: String,
    pub tokens: Vec<u32>,
    pub image: String,
    pub mask: String,
    pub scene: SceneSpec,
}

/// Uniform value in `[0, 1)` from the hash of `(seed, index)`.
fn split_draw(seed: u64, index: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(b"split");
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

pub fn assign_split(seed: u64, index: u64, cfg: &SynthConfig) -> Split {
    let u = split_draw(seed, index);
    if u < cfg.val_fraction {
        Split::Val
    } else if u < cfg.val_fraction + cfg.test_fraction {
        Split::Test
    } else {
        Split::Train
    }
}

/// The rendered sample `index` of the stream `seed`.
pub fn generate_sample(seed: u64, index: u64, cfg: &SynthConfig) -> Result<(SceneSpec, Triplet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let spec = generate_scene(&mut rng, cfg)?;
    let t = render(&spec, cfg);
    Ok((spec, t))
}

fn write_png(path: &Path, size: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    w.write_image_data(data).map_err(|e| Error::Png(e.to_string()))?;
    w.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Pack a mask into 1-bit rows, most significant bit first.
pub fn pack_mask(mask: &BinaryMask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let stride = w.div_ceil(8);
    let mut out = vec![0u8; h * stride];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                out[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    out
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_png(path, mask.dims().0, png::ColorType::Grayscale, png::BitDepth::One, &pack_mask(mask))
}

pub fn write_rgb_png(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    write_png(path, size, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

/// Write `n` samples under `out` and return the manifest path.
pub fn generate_split(out: &Path, n: usize, seed: u64, cfg: &SynthConfig) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Usage("sample count must be at least 1".into()));
    }
    cfg.validate()?;
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest = out.join("manifest.jsonl");
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..n as u64 {
        let (spec, t) = generate_sample(seed, i, cfg)?;
        let image = format!("images/{i:06}.png");
        let mask = format!("masks/{i:06}.png");
        write_rgb_png(&out.join(&image), t.size, &t.rgb)?;
        write_mask_png(&out.join(&mask), &t.mask)?;
        let row = ManifestRow {
            id: i,
            split: assign_split(seed, i, cfg),
            expression: spec.expression.text(),
            tokens: t.tokens,
            image,
            mask,
            scene: spec,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub tokens: Vec<u32>,
    pub size: usize,
    /// Channel-major `(3, size, size)` in `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn from_triplet(id: u64, split: Split, t: &Triplet) -> Self {
        let n = t.size * t.size;
        let mut image = vec![0f32; 3 * n];
        for (p, px) in t.rgb.chunks(3).enumerate() {
            for c in 0..3 {
                image[c * n + p] = px[c] as f32 / 255.0;
            }
        }
        Self {
            id,
            split,
            tokens: t.tokens.clone(),
            size: t.size,
            image,
            mask: t.mask.clone(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Render samples in memory without touching the disk.
    pub fn synthesize(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let samples = (0..n as u64)
            .map(|i| {
                let (_, t) = generate_sample(seed, i, cfg)?;
                Ok(Sample::from_triplet(i, assign_split(seed, i, cfg), &t))
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("manifest.jsonl");
    let file = File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)?;
        let (info, rgb) = read_png(&dir.join(&row.image))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight || info.width != info.height {
            return Err(Error::Png(format!("{}: expected square 8-bit RGB", row.image)));
        }
        let size = info.width as usize;
        let (minfo, packed) = read_png(&dir.join(&row.mask))?;
        if minfo.bit_depth != png::BitDepth::One || minfo.width as usize != size || minfo.height as usize != size {
            return Err(Error::Png(format!("{}: expected a 1-bit mask of {size}x{size}", row.mask)));
        }
        let stride = minfo.line_size;
        let bits = (0..size * size)
            .map(|p| {
                let (y, x) = (p / size, p % size);
                packed[y * stride + x / 8] & (0x80 >> (x % 8)) != 0
            })
            .collect();
        let t = Triplet {
            size,
            rgb,
            tokens: row.tokens,
            mask: BinaryMask::new(size, size, bits)?,
        };
        samples.push(Sample::from_triplet(row.id, row.split, &t));
    }
    Ok(Dataset { samples })
}
