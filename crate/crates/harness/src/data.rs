//! Image ingestion: binary PPM, raw tensor files and a synthetic corpus.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mambajscc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, HarnessError, Result};

/// Parses a binary (P6) PPM with `maxval ≤ 255` into `[3, H, W]` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| HarnessError::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad {what} {s:?}")));
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated raster"))?;
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * h * w + i] = f64::from(v) / maxval as f64;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes, path)
}

/// Encodes `[3, H, W]` in `[0, 1]` as 8-bit P6, clamping and rounding.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(HarnessError::Invalid(format!("expected [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_ppm(img)?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads every `.ppm` and `.mjt` file in `dir` (sorted by name). Images
/// smaller than `crop` in either dimension are skipped; the returned
/// strings describe each skip.
pub fn ingest_images(dir: &Path, crop: usize) -> Result<(Dataset, Vec<String>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "mjt")))
        .collect();
    paths.sort();
    let mut ds = Dataset {
        ids: Vec::new(),
        images: Vec::new(),
    };
    let mut warnings = Vec::new();
    for path in paths {
        let img = if path.extension().is_some_and(|e| e == "ppm") {
            read_ppm(&path)?
        } else {
            let f = fs::File::open(&path).map_err(io_err(&path))?;
            let t = Tensor::read_from(std::io::BufReader::new(f))?;
            if t.rank() != 3 || t.shape()[0] != 3 {
                return Err(HarnessError::Image {
                    path,
                    reason: format!("expected a [3, H, W] tensor, got {:?}", t.shape()),
                });
            }
            t
        };
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h < crop || w < crop {
            warnings.push(format!("{}: {h}x{w} is smaller than the {crop}x{crop} crop, skipped", path.display()));
            continue;
        }
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        ds.ids.push(id);
        ds.images.push(img);
    }
    Ok((ds, warnings))
}

pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if top + size > h || left + size > w {
        return Err(HarnessError::Invalid(format!(
            "{size}x{size} crop at ({top}, {left}) exceeds {h}x{w} image"
        )));
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in top..top + size {
            let row = c * h * w + y * w + left;
            data.extend_from_slice(&img.data()[row..row + size]);
        }
    }
    Ok(Tensor::new(&[3, size, size], data)?)
}

pub fn random_crop<R: Rng>(img: &Tensor, size: usize, rng: &mut R) -> Result<Tensor> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < size || w < size {
        return Err(HarnessError::Invalid(format!("{h}x{w} image is smaller than a {size} crop")));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    crop(img, top, left, size)
}

pub fn center_crop(img: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < size || w < size {
        return Err(HarnessError::Invalid(format!("{h}x{w} image is smaller than a {size} crop")));
    }
    crop(img, (h - size) / 2, (w - size) / 2, size)
}

/// Bilinearly interpolated random lattice with `cells × cells` cells, in `[-1, 1]`.
fn value_noise<R: Rng>(rng: &mut R, size: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 * cells as f64 / size as f64;
            let fx = x as f64 * cells as f64 / size as f64;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// One procedural image: a colour gradient, a soft disc, stripes and a
/// smooth value-noise texture.
pub fn synthetic_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.6));
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)));
    let disc_colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let (cx, cy) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
    let radius = rng.random_range(0.1..0.35);
    let freq = rng.random_range(1.0..4.0);
    let stripe_amp = rng.random_range(0.02..0.08);
    let texture_amp = rng.random_range(0.05..0.15);
    let texture = value_noise(&mut rng, size, 8);
    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let dist = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            let inside = 1.0 / (1.0 + ((dist - radius) * 40.0).exp());
            let stripes = stripe_amp * (freq * std::f64::consts::TAU * (u + 0.5 * v)).sin();
            let tex = texture_amp * texture[y * size + x];
            for c in 0..3 {
                let bg = base[c] + grad[c].0 * u + grad[c].1 * v;
                let val = bg * (1.0 - inside) + disc_colour[c] * inside + stripes + tex;
                data[c * n + y * size + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape and data agree")
}

pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Dataset {
    Dataset {
        ids: (0..count).map(|i| format!("synth{i:03}")).collect(),
        images: (0..count).map(|i| synthetic_image(size, seed.wrapping_add(i as u64))).collect(),
    }
}
