//! Hyperspectral cubes: file format, band removal, patches, splits, normalization
//! and a synthetic scene generator.
//!
//! Cube file layout: 8-byte magic, `u32` version, `u32` metadata length (all little
//! endian), JSON metadata, `H*W*B` f32 samples with the band axis fastest, then
//! `H*W` i16 labels (0 = unlabeled).

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NdArray;

pub const CUBE_MAGIC: &[u8; 8] = b"HSICUBE\0";
pub const CUBE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
/// Largest accepted `H*W*B`.
pub const MAX_CUBE_ELEMENTS: usize = 1 << 31;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `(H, W, B)` row-major.
    pub data: Vec<f32>,
    /// `(H, W)` row-major; 0 = unlabeled, classes are `1..=classes`.
    pub labels: Vec<u16>,
    pub classes: usize,
    pub class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CubeMeta {
    name: String,
    height: usize,
    width: usize,
    bands: usize,
    classes: usize,
    dtype: String,
    label_dtype: String,
    #[serde(default)]
    class_names: Vec<String>,
}

impl HsiCube {
    pub fn new(
        name: impl Into<String>,
        dims: [usize; 3],
        data: Vec<f32>,
        labels: Vec<u16>,
        classes: usize,
    ) -> Result<Self> {
        let [h, w, b] = dims;
        let n = checked_volume(dims)?;
        if data.len() != n {
            return Err(Error::DimMismatch(format!("{} samples for dims {dims:?}", data.len())));
        }
        if labels.len() != h * w {
            return Err(Error::DimMismatch(format!("{} labels for {h}x{w}", labels.len())));
        }
        let cube = Self {
            name: name.into(),
            height: h,
            width: w,
            bands: b,
            data,
            labels,
            classes,
            class_names: Vec::new(),
        };
        cube.check()?;
        Ok(cube)
    }

    fn check(&self) -> Result<()> {
        if let Some(&l) = self.labels.iter().find(|&&l| usize::from(l) > self.classes) {
            return Err(Error::Range(format!("label {l} exceeds class count {}", self.classes)));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("cube contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.bands]
    }

    pub fn label(&self, r: usize, c: usize) -> u16 {
        self.labels[r * self.width + c]
    }

    pub fn spectrum(&self, r: usize, c: usize) -> &[f32] {
        let start = (r * self.width + c) * self.bands;
        &self.data[start..start + self.bands]
    }

    /// Coordinates of labeled pixels in raster order.
    pub fn labeled(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.label(r, c) != 0)
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CubeMeta {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            bands: self.bands,
            classes: self.classes,
            dtype: "f32".into(),
            label_dtype: "i16".into(),
            class_names: self.class_names.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + self.data.len() * 4 + self.labels.len() * 2);
        out.extend_from_slice(CUBE_MAGIC);
        out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            let l = i16::try_from(l).map_err(|_| Error::Range(format!("label {l} does not fit i16")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != CUBE_MAGIC {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CUBE_VERSION {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        let meta_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let meta_end = HEADER_LEN
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated {
                expected: HEADER_LEN.saturating_add(meta_len),
                found: bytes.len(),
            })?;
        let meta: CubeMeta = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])?;
        if meta.dtype != "f32" || meta.label_dtype != "i16" {
            return Err(Error::DimMismatch(format!(
                "unsupported payload types {} / {}",
                meta.dtype, meta.label_dtype
            )));
        }
        let dims = [meta.height, meta.width, meta.bands];
        let n = checked_volume(dims)?;
        let pixels = meta.height * meta.width;
        let expected = n
            .checked_mul(4)
            .and_then(|d| d.checked_add(pixels * 2))
            .ok_or_else(|| Error::DimOverflow(format!("payload of {dims:?} overflows")))?;
        let payload = &bytes[meta_end..];
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::DimMismatch(format!(
                "header dims {dims:?} describe {expected} payload bytes, file carries {}",
                payload.len()
            )));
        }
        let data = payload[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = payload[n * 4..]
            .chunks_exact(2)
            .map(|c| {
                let l = i16::from_le_bytes(c.try_into().expect("2 bytes"));
                u16::try_from(l).map_err(|_| Error::Range(format!("negative label {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cube = Self::new(meta.name, dims, data, labels, meta.classes)?;
        cube.class_names = meta.class_names;
        Ok(cube)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn checked_volume(dims: [usize; 3]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::DimMismatch(format!("cube dims {dims:?} contain zero")));
    }
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= MAX_CUBE_ELEMENTS)
        .ok_or_else(|| Error::DimOverflow(format!("cube dims {dims:?} exceed {MAX_CUBE_ELEMENTS} samples")))
}

/// Drop the listed bands, keeping the remaining bands in order.
pub fn remove_bands(cube: &HsiCube, bands: &[usize]) -> Result<HsiCube> {
    let mut drop = vec![false; cube.bands];
    for &b in bands {
        if b >= cube.bands {
            return Err(Error::Range(format!("band {b} out of range for {} bands", cube.bands)));
        }
        if drop[b] {
            return Err(Error::Range(format!("band {b} listed twice")));
        }
        drop[b] = true;
    }
    let kept = cube.bands - bands.len();
    if kept == 0 {
        return Err(Error::Range("cannot remove every band".into()));
    }
    let data = cube
        .data
        .chunks_exact(cube.bands)
        .flat_map(|px| px.iter().zip(&drop).filter(|(_, &d)| !d).map(|(&v, _)| v))
        .collect();
    Ok(HsiCube {
        bands: kept,
        data,
        ..cube.clone()
    })
}

/// `M x M x B` window centered at `(r, c)` over the zero-padded cube, laid out
/// `(B, M, M)`. Padding is `M / 2` per side.
pub fn extract_patch(cube: &HsiCube, r: usize, c: usize, m: usize) -> Result<Vec<f32>> {
    if m.is_multiple_of(2) {
        return Err(Error::Config(format!("patch size {m} must be odd")));
    }
    if r >= cube.height || c >= cube.width {
        return Err(Error::Range(format!(
            "center ({r}, {c}) outside {}x{}",
            cube.height, cube.width
        )));
    }
    let half = (m / 2) as isize;
    let b = cube.bands;
    let mut out = vec![0.0f32; b * m * m];
    for i in 0..m {
        let rr = r as isize + i as isize - half;
        if rr < 0 || rr >= cube.height as isize {
            continue;
        }
        for j in 0..m {
            let cc = c as isize + j as isize - half;
            if cc < 0 || cc >= cube.width as isize {
                continue;
            }
            let px = cube.spectrum(rr as usize, cc as usize);
            for (band, &v) in px.iter().enumerate() {
                out[(band * m + i) * m + j] = v;
            }
        }
    }
    Ok(out)
}

/// `[N, 1, B, M, M]` patches and zero-based labels for `coords`.
pub fn patch_batch(cube: &HsiCube, coords: &[(usize, usize)], m: usize) -> Result<(NdArray<f32>, Vec<usize>)> {
    let mut data = Vec::with_capacity(coords.len() * cube.bands * m * m);
    let mut labels = Vec::with_capacity(coords.len());
    for &(r, c) in coords {
        let l = cube.label(r, c);
        if l == 0 {
            return Err(Error::Range(format!("pixel ({r}, {c}) is unlabeled")));
        }
        data.extend(extract_patch(cube, r, c, m)?);
        labels.push(usize::from(l) - 1);
    }
    Ok((NdArray::new(vec![coords.len(), 1, cube.bands, m, m], data)?, labels))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSplit {
    pub cube: String,
    pub ratios: [u32; 3],
    pub seed: u64,
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Classes too small to split, sent entirely to training.
    #[serde(default)]
    pub unsplit_classes: Vec<u16>,
}

impl SampleSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn part(&self, name: &str) -> Result<&[(usize, usize)]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split part {other:?}"))),
        }
    }
}

/// Per-class seeded shuffle; `n*a/total` to train, `n*b/total` to validation, the
/// rest to test. Classes with fewer than 3 pixels go entirely to train.
pub fn stratified_split(cube: &HsiCube, ratios: [u32; 3], seed: u64) -> Result<SampleSplit> {
    if ratios.contains(&0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive")));
    }
    let total: usize = ratios.iter().map(|&r| r as usize).sum();
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cube.classes + 1];
    for (r, c) in cube.labeled() {
        by_class[usize::from(cube.label(r, c))].push((r, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SampleSplit {
        cube: cube.name.clone(),
        ratios,
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        unsplit_classes: Vec::new(),
    };
    for (class, mut pixels) in by_class.into_iter().enumerate().skip(1) {
        let n = pixels.len();
        if n == 0 {
            continue;
        }
        pixels.shuffle(&mut rng);
        if n < 3 {
            warn!("class {class} has only {n} labeled pixels; all go to training");
            split.unsplit_classes.push(class as u16);
            split.train.extend(pixels);
            continue;
        }
        let n_train = n * ratios[0] as usize / total;
        let n_val = n * ratios[1] as usize / total;
        split.train.extend_from_slice(&pixels[..n_train]);
        split.val.extend_from_slice(&pixels[n_train..n_train + n_val]);
        split.test.extend_from_slice(&pixels[n_train + n_val..]);
    }
    Ok(split)
}

/// Per-band standardization to zero mean and unit (population) deviation.
pub fn normalize(cube: &HsiCube) -> HsiCube {
    let b = cube.bands;
    let n = (cube.height * cube.width) as f64;
    let mut mean = vec![0.0f64; b];
    for px in cube.data.chunks_exact(b) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; b];
    for px in cube.data.chunks_exact(b) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    let data = cube
        .data
        .chunks_exact(b)
        .flat_map(|px| {
            px.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((&v, &m), &s)| ((f64::from(v) - m) / s) as f32)
        })
        .collect();
    HsiCube { data, ..cube.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub size: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 48,
            bands: 16,
            classes: 4,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// Minimum pairwise L2 distance between class signatures.
fn signature_gap(noise: f64) -> f64 {
    1.0 + 10.0 * noise
}

fn smooth_curve(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.random_range(-1.0..1.0);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..1.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = b as f64 / bands as f64;
            base + waves
                .iter()
                .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum::<f64>()
        })
        .collect()
}

/// Voronoi scene: one seeded site per class, each cell filled with its class's smooth
/// spectral signature plus i.i.d. Gaussian noise. Every pixel is labeled.
pub fn synth_cube(p: &SynthParams) -> Result<HsiCube> {
    if p.classes < 2 || p.size == 0 || p.bands == 0 || p.noise.is_nan() || p.noise < 0.0 {
        return Err(Error::Config(format!("invalid synthetic scene {p:?}")));
    }
    if p.classes > p.size * p.size {
        return Err(Error::Config("more classes than pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut sites: Vec<(usize, usize)> = Vec::with_capacity(p.classes);
    while sites.len() < p.classes {
        let s = (rng.random_range(0..p.size), rng.random_range(0..p.size));
        if !sites.contains(&s) {
            sites.push(s);
        }
    }
    let gap = signature_gap(p.noise);
    let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(p.classes);
    while signatures.len() < p.classes {
        let cand = smooth_curve(p.bands, &mut rng);
        let far = signatures
            .iter()
            .all(|s| s.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= gap);
        if far {
            signatures.push(cand);
        }
    }
    let noise = Normal::new(0.0, p.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(p.size * p.size * p.bands);
    let mut labels = Vec::with_capacity(p.size * p.size);
    for r in 0..p.size {
        for c in 0..p.size {
            let nearest = (0..p.classes)
                .min_by_key(|&k| {
                    let (sr, sc) = sites[k];
                    sr.abs_diff(r).pow(2) + sc.abs_diff(c).pow(2)
                })
                .expect("at least two classes");
            labels.push(nearest as u16 + 1);
            for &v in &signatures[nearest] {
                let e = if p.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((v + e) as f32);
            }
        }
    }
    let mut cube = HsiCube::new(
        format!("synth-{}x{}x{}-k{}-s{}", p.size, p.size, p.bands, p.classes, p.seed),
        [p.size, p.size, p.bands],
        data,
        labels,
        p.classes,
    )?;
    cube.class_names = (1..=p.classes).map(|k| format!("class{k}")).collect();
    Ok(cube)
}

/// Sample layout of a raw interchange dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawLayout {
    /// `(H, W, B)`, band fastest.
    Hwb,
    /// `(B, H, W)`, one image per band.
    Bhw,
}

/// Build a cube from a little-endian f32 dump and a little-endian i16 label dump.
pub fn cube_from_raw(name: &str, dims: [usize; 3], layout: RawLayout, data: &[u8], labels: &[u8]) -> Result<HsiCube> {
    let n = checked_volume(dims)?;
    let [h, w, b] = dims;
    if data.len() != n * 4 {
        return Err(if data.len() < n * 4 {
            Error::Truncated {
                expected: n * 4,
                found: data.len(),
            }
        } else {
            Error::DimMismatch(format!("{} data bytes for dims {dims:?}", data.len()))
        });
    }
    if labels.len() != h * w * 2 {
        return Err(Error::DimMismatch(format!("{} label bytes for {h}x{w}", labels.len())));
    }
    let raw: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let values = match layout {
        RawLayout::Hwb => raw,
        RawLayout::Bhw => (0..n)
            .map(|i| {
                let (px, band) = (i / b, i % b);
                raw[band * h * w + px]
            })
            .collect(),
    };
    let labels = labels
        .chunks_exact(2)
        .map(|c| {
            let l = i16::from_le_bytes(c.try_into().expect("2 bytes"));
            u16::try_from(l).map_err(|_| Error::Range(format!("negative label {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = labels.iter().copied().max().unwrap_or(0) as usize;
    HsiCube::new(name, dims, values, labels, classes)
}

/// Build a cube from CSV text: one row of `B` samples per pixel in raster order, and
/// an `H`-row by `W`-column label grid.
pub fn cube_from_csv(name: &str, data_csv: &str, labels_csv: &str) -> Result<HsiCube> {
    let parse_rows = |text: &str, what: &str| -> Result<Vec<Vec<f64>>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                line.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Config(format!("{what} row {}: {e}", i + 1)))
                    })
                    .collect()
            })
            .collect()
    };
    let label_rows = parse_rows(labels_csv, "labels")?;
    let data_rows = parse_rows(data_csv, "data")?;
    let h = label_rows.len();
    let w = label_rows.first().map_or(0, Vec::len);
    let b = data_rows.first().map_or(0, Vec::len);
    if label_rows.iter().any(|r| r.len() != w) || data_rows.iter().any(|r| r.len() != b) {
        return Err(Error::DimMismatch("ragged CSV rows".into()));
    }
    if data_rows.len() != h * w {
        return Err(Error::DimMismatch(format!(
            "{} spectra for a {h}x{w} label grid",
            data_rows.len()
        )));
    }
    let labels = label_rows
        .iter()
        .flatten()
        .map(|&l| {
            if l < 0.0 || l.fract() != 0.0 || l > f64::from(i16::MAX) {
                Err(Error::Range(format!("label {l} is not a class id")))
            } else {
                Ok(l as u16)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let data = data_rows.iter().flatten().map(|&v| v as f32).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) as usize;
    HsiCube::new(name, [h, w, b], data, labels, classes)
}

/// Parse a band list file: TOML with `bands = [..]` (zero-based), or one index per line.
pub fn load_band_list(path: &Path) -> Result<Vec<usize>> {
    #[derive(Deserialize)]
    struct BandList {
        bands: Vec<usize>,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        return Ok(toml::from_str::<BandList>(&text)?.bands);
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse().map_err(|e| Error::Config(format!("band index {l:?}: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn random_cube(h: usize, w: usize, b: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * b).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..h * w).map(|_| rng.random_range(0..4)).collect();
        HsiCube::new("t", [h, w, b], data, labels, 3).unwrap()
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let cube = random_cube(8, 8, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.hsi");
        cube.save(&p).unwrap();
        let back = HsiCube::load(&p).unwrap();
        assert_eq!(back, cube);
        assert_eq!(back.to_bytes().unwrap(), fs::read(&p).unwrap());
    }

    #[test]
    fn distinct_load_errors() {
        let cube = random_cube(4, 4, 3, 2);
        let bytes = cube.to_bytes().unwrap();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(HsiCube::from_bytes(&bad, p), Err(Error::BadMagic(_))));
        assert!(matches!(
            HsiCube::from_bytes(&bytes[..bytes.len() - 3], p),
            Err(Error::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(matches!(HsiCube::from_bytes(&extra, p), Err(Error::DimMismatch(_))));
        let huge = HsiCube {
            height: 1 << 20,
            width: 1 << 20,
            ..cube.clone()
        };
        let meta = serde_json::json!({
            "name": "x", "height": huge.height, "width": huge.width, "bands": 3,
            "classes": 3, "dtype": "f32", "label_dtype": "i16"
        });
        let json = serde_json::to_vec(&meta).unwrap();
        let mut over = CUBE_MAGIC.to_vec();
        over.extend_from_slice(&CUBE_VERSION.to_le_bytes());
        over.extend_from_slice(&(json.len() as u32).to_le_bytes());
        over.extend_from_slice(&json);
        assert!(matches!(HsiCube::from_bytes(&over, p), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn band_removal() {
        let cube = random_cube(3, 3, 220, 3);
        let drop: Vec<usize> = (103..108).chain(149..163).chain([219]).collect();
        assert_eq!(drop.len(), 20);
        assert_eq!(remove_bands(&cube, &drop).unwrap().bands, 200);
        assert_eq!(remove_bands(&cube, &[]).unwrap(), cube);
        let shifted = remove_bands(&cube, &[0]).unwrap();
        assert_eq!(shifted.spectrum(1, 2)[0], cube.spectrum(1, 2)[1]);
        assert!(remove_bands(&cube, &[220]).is_err());
        assert!(remove_bands(&cube, &[4, 4]).is_err());
    }

    #[test]
    fn patch_geometry() {
        let cube = random_cube(20, 20, 3, 4);
        assert_eq!(extract_patch(&cube, 5, 6, 1).unwrap(), cube.spectrum(5, 6));
        assert!(extract_patch(&cube, 5, 6, 4).is_err());
        let m = 15;
        let p = extract_patch(&cube, 0, 0, m).unwrap();
        for b in 0..3 {
            for i in 0..m {
                for j in 0..m {
                    let v = p[(b * m + i) * m + j];
                    if i < 7 || j < 7 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, cube.spectrum(i - 7, j - 7)[b]);
                    }
                }
            }
        }
        let p = extract_patch(&cube, 10, 9, 5).unwrap();
        for b in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(p[(b * 5 + i) * 5 + j], cube.spectrum(8 + i, 7 + j)[b]);
                }
            }
        }
    }

    fn cube_with_class_sizes(sizes: &[usize]) -> HsiCube {
        let n: usize = sizes.iter().sum();
        let labels: Vec<u16> = sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k as u16 + 1, s))
            .collect();
        HsiCube::new("s", [1, n, 1], vec![0.0; n], labels, sizes.len()).unwrap()
    }

    #[test]
    fn split_counts() {
        let cube = cube_with_class_sizes(&[100]);
        let s = stratified_split(&cube, [6, 1, 3], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 10, 30));
        let cube = cube_with_class_sizes(&[10]);
        let s = stratified_split(&cube, [4, 1, 5], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 1, 5));
        let cube = cube_with_class_sizes(&[2, 10]);
        let s = stratified_split(&cube, [6, 1, 3], 1).unwrap();
        assert_eq!(s.unsplit_classes, vec![1]);
        assert_eq!(s.train.len(), 2 + 6);
    }

    #[test]
    fn split_seeding() {
        let cube = cube_with_class_sizes(&[40, 30]);
        let a = stratified_split(&cube, [6, 1, 3], 5).unwrap();
        assert_eq!(a, stratified_split(&cube, [6, 1, 3], 5).unwrap());
        let b = stratified_split(&cube, [6, 1, 3], 6).unwrap();
        assert_ne!(a.train, b.train);
        assert_eq!(
            (a.train.len(), a.val.len(), a.test.len()),
            (b.train.len(), b.val.len(), b.test.len())
        );
    }

    #[test]
    fn normalization() {
        let mut cube = random_cube(6, 5, 3, 5);
        for px in cube.data.chunks_exact_mut(3) {
            px[1] = 4.0;
        }
        let n = normalize(&cube);
        let pixels = 30.0;
        for b in 0..3 {
            let vals: Vec<f64> = n.data.chunks_exact(3).map(|p| f64::from(p[b])).collect();
            let mean = vals.iter().sum::<f64>() / pixels;
            assert!(mean.abs() <= 1e-5);
            if b == 1 {
                assert!(vals.iter().all(|&v| v == 0.0));
            }
        }
        let twice = normalize(&n);
        assert!(n.data.iter().zip(&twice.data).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn noiseless_synthetic_classes_are_pure() {
        let cube = synth_cube(&SynthParams {
            noise: 0.0,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        let mut sig: Vec<Option<Vec<f32>>> = vec![None; 5];
        for (r, c) in cube.labeled() {
            let k = usize::from(cube.label(r, c));
            let s = cube.spectrum(r, c).to_vec();
            match &sig[k] {
                Some(prev) => assert_eq!(prev, &s),
                None => sig[k] = Some(s),
            }
        }
        // nearest class centroid recovers every label
        for (r, c) in cube.labeled() {
            let s = cube.spectrum(r, c);
            let best = (1..=4)
                .filter(|&k| sig[k].is_some())
                .min_by(|&a, &b| {
                    let d = |k: usize| -> f32 {
                        sig[k]
                            .as_ref()
                            .unwrap()
                            .iter()
                            .zip(s)
                            .map(|(x, y)| (x - y).powi(2))
                            .sum()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(best, usize::from(cube.label(r, c)));
        }
    }

    #[test]
    fn default_synthetic_class_means_are_separated() {
        let p = SynthParams::default();
        let cube = synth_cube(&p).unwrap();
        let mut sums = vec![vec![0.0f64; p.bands]; p.classes];
        let mut counts = vec![0usize; p.classes];
        for (r, c) in cube.labeled() {
            let k = usize::from(cube.label(r, c)) - 1;
            counts[k] += 1;
            for (s, &v) in sums[k].iter_mut().zip(cube.spectrum(r, c)) {
                *s += f64::from(v);
            }
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
            .collect();
        for a in 0..p.classes {
            for b in a + 1..p.classes {
                let d: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 5.0 * p.noise, "classes {a},{b}: {d}");
            }
        }
        assert_eq!(synth_cube(&p).unwrap(), cube);
    }

    #[test]
    fn raw_and_csv_converters() {
        let cube = random_cube(3, 4, 2, 6);
        let mut bhw = Vec::new();
        for b in 0..2 {
            for px in cube.data.chunks_exact(2) {
                bhw.extend_from_slice(&px[b].to_le_bytes());
            }
        }
        let labels: Vec<u8> = cube.labels.iter().flat_map(|&l| (l as i16).to_le_bytes()).collect();
        let back = cube_from_raw("t", [3, 4, 2], RawLayout::Bhw, &bhw, &labels).unwrap();
        assert_eq!(back.data, cube.data);
        assert_eq!(back.labels, cube.labels);
        assert!(matches!(
            cube_from_raw("t", [3, 4, 2], RawLayout::Bhw, &bhw[..8], &labels),
            Err(Error::Truncated { .. })
        ));
        let data_csv = "1,2\n3,4\n";
        let labels_csv = "0,2\n";
        let c = cube_from_csv("c", data_csv, labels_csv).unwrap();
        assert_eq!(c.dims(), [1, 2, 2]);
        assert_eq!(c.labels, vec![0, 2]);
    }

    proptest! {
        #[test]
        fn split_partitions_labeled_pixels(seed in 0u64..1000, a in 1u32..7, b in 1u32..4, c in 1u32..7) {
            let cube = random_cube(9, 7, 1, seed);
            let s = stratified_split(&cube, [a, b, c], seed).unwrap();
            let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            let n = all.len();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(all, cube.labeled());
        }

        #[test]
        fn patch_center_and_interior_sum(seed in 0u64..200, r in 3usize..7, c in 3usize..7) {
            let cube = random_cube(10, 10, 3, seed);
            let m = 5;
            let p = extract_patch(&cube, r, c, m).unwrap();
            for b in 0..3 {
                prop_assert_eq!(p[(b * m + 2) * m + 2], cube.spectrum(r, c)[b]);
            }
            let raw: f64 = (r - 2..=r + 2)
                .flat_map(|i| (c - 2..=c + 2).map(move |j| (i, j)))
                .flat_map(|(i, j)| cube.spectrum(i, j).iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
                .sum();
            let got: f64 = p.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((raw - got).abs() < 1e-9);
        }
    }
}
