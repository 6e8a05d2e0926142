//! Grayscale images, registered pairs, PGM/PNG I/O, and patch sampling.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad {field}: {msg}")]
    Format { path: PathBuf, field: &'static str, msg: String },
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("pair is not registered: ir is {ir:?}, vi is {vi:?}")]
    Unregistered { ir: (usize, usize), vi: (usize, usize) },
    #[error("pair {index} is {height}x{width}, smaller than patch size {patch}")]
    TooSmall { index: usize, height: usize, width: usize, patch: usize },
    #[error("missing directory {0}")]
    MissingDir(PathBuf),
    #[error("{0}")]
    Corpus(String),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImageError::Invalid(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(ImageError::Invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ImageError::Invalid(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    /// Clamps into `[0, 1]` instead of rejecting out-of-range values.
    pub fn from_f64_clamped(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        Self::new(height, width, pixels)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(ImageError::Invalid(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }

    /// Top-left crop to the largest dimensions divisible by `p`.
    pub fn crop_to_multiple(&self, p: usize) -> Result<Self> {
        let (h, w) = (self.height / p * p, self.width / p * p);
        self.crop(0, 0, h, w)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x)).unwrap()
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x)).unwrap()
    }

    /// Pixel values on the 8-bit grid: `round(p * 255)` with halves rounded up.
    pub fn quantized(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| quantize(p as f64)).collect()
    }
}

pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Registered infrared/visible pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub ir: GrayImage,
    pub vi: GrayImage,
}

impl ImagePair {
    pub fn new(ir: GrayImage, vi: GrayImage) -> Result<Self> {
        if ir.dims() != vi.dims() {
            return Err(ImageError::Unregistered { ir: ir.dims(), vi: vi.dims() });
        }
        Ok(Self { ir, vi })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ir.dims()
    }
}

// ---------------------------------------------------------------------------
// File formats

/// Reads an 8-bit binary PGM (P5, maxval 255) or an 8-bit grayscale PNG.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io { path: path.into(), source })?;
    decode_gray(&bytes, path)
}

pub fn decode_gray(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes, path)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes, path)
    } else {
        let shown: String = bytes.iter().take(2).map(|&b| b as char).collect();
        Err(ImageError::Format { path: path.into(), field: "magic", msg: format!("expected P5 PGM or PNG, found {shown:?}") })
    }
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let fmt_err = |field: &'static str, msg: String| ImageError::Format { path: path.into(), field, msg };
    let mut pos = 2;
    let mut header = [0usize; 3];
    for (slot, field) in header.iter_mut().zip(["width", "height", "maxval"]) {
        // whitespace and `#` comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(field, "missing or non-numeric".into()));
        }
        *slot = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().map_err(|e| fmt_err(field, format!("{e}")))?;
    }
    let [width, height, maxval] = header;
    if maxval != 255 {
        return Err(fmt_err("maxval", format!("unsupported maxval {maxval}, expected 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fmt_err("header", "expected whitespace before raster".into()));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() < width * height {
        return Err(fmt_err("raster", format!("expected {} bytes, found {}", width * height, raster.len())));
    }
    let pixels = raster[..width * height].iter().map(|&b| b as f32 / 255.0).collect();
    GrayImage::new(height, width, pixels)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let fmt_err = |field: &'static str, msg: String| ImageError::Format { path: path.into(), field, msg };
    let decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = decoder.read_info().map_err(|e| fmt_err("png", e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(fmt_err("color type", format!("{color:?} is not grayscale")));
    }
    if depth != png::BitDepth::Eight {
        return Err(fmt_err("bit depth", format!("{depth:?}, expected 8")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| fmt_err("png", "image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt_err("png", e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        pixels.extend(row[..w].iter().map(|&b| b as f32 / 255.0));
    }
    GrayImage::new(h, w, pixels)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.quantized());
    out
}

/// Clamps, quantizes, and writes a binary PGM.
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|source| ImageError::Io { path: path.into(), source })
}

pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| ImageError::Io { path: path.into(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| ImageError::Io { path: path.into(), source: std::io::Error::other(e) };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&img.quantized()).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn is_image_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(), Some("pgm") | Some("png"))
}

/// Image files in `dir`, keyed by file stem and sorted by it.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(ImageError::MissingDir(dir.into()));
    }
    let entries = fs::read_dir(dir).map_err(|source| ImageError::Io { path: dir.into(), source })?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|source| ImageError::Io { path: dir.into(), source })?.path();
        if p.is_file() && is_image_file(&p) {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            out.push((stem, p));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `dir/ir/NAME` and `dir/vi/NAME` pairs matched by stem.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<(String, ImagePair)>> {
    let dir = dir.as_ref();
    let ir = list_images(&dir.join("ir"))?;
    let vi = list_images(&dir.join("vi"))?;
    let mut pairs = Vec::with_capacity(ir.len());
    for (name, ir_path) in &ir {
        let vi_path = vi
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| ImageError::Corpus(format!("{} has no visible counterpart", ir_path.display())))?;
        let pair =
            ImagePair::new(load_gray(ir_path)?, load_gray(vi_path)?).map_err(|e| ImageError::Corpus(format!("{name}: {e}")))?;
        pairs.push((name.clone(), pair));
    }
    if let Some((name, _)) = vi.iter().find(|(n, _)| !ir.iter().any(|(m, _)| m == n)) {
        return Err(ImageError::Corpus(format!("visible image {name} has no infrared counterpart")));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Patches

/// Training crops with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub patches: Vec<ImagePair>,
    /// Index into the source pair list for each patch.
    pub sources: Vec<usize>,
    /// Top-left `(row, col)` of each crop.
    pub offsets: Vec<(usize, usize)>,
}

/// `count` crops of `size x size`. Sources cycle through `pairs` in order;
/// offsets are uniform over all valid positions. The same crop is applied to
/// both modalities.
pub fn random_patches(pairs: &[ImagePair], size: usize, count: usize, seed: u64) -> Result<PatchSet> {
    if pairs.is_empty() {
        return Err(ImageError::Corpus("no image pairs to crop".into()));
    }
    for (index, p) in pairs.iter().enumerate() {
        let (height, width) = p.dims();
        if height < size || width < size {
            return Err(ImageError::TooSmall { index, height, width, patch: size });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PatchSet { size, patches: Vec::new(), sources: Vec::new(), offsets: Vec::new() };
    for i in 0..count {
        let src = i % pairs.len();
        let (h, w) = pairs[src].dims();
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        let pair = &pairs[src];
        set.patches.push(ImagePair { ir: pair.ir.crop(top, left, size, size)?, vi: pair.vi.crop(top, left, size, size)? });
        set.sources.push(src);
        set.offsets.push((top, left));
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Oriented sinusoidal texture in `[0.1, 0.9]`; `seed` picks frequency and phase.
pub fn texture_field(height: usize, width: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy) = (rng.random_range(0.3..0.8f32), rng.random_range(0.3..0.8f32));
    let (px, py) = (rng.random_range(0.0..std::f32::consts::TAU), rng.random_range(0.0..std::f32::consts::TAU));
    GrayImage::from_fn(height, width, |y, x| {
        let v = (fx * x as f32 + px).sin() * (fy * y as f32 + py).cos();
        0.5 + 0.4 * v
    })
    .expect("values in range")
}

/// Bright `side x side` square at `(top, left)` on black.
pub fn bright_square(height: usize, width: usize, top: usize, left: usize, side: usize) -> GrayImage {
    GrayImage::from_fn(height, width, |y, x| {
        let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
        if inside {
            0.95
        } else {
            0.0
        }
    })
    .expect("values in range")
}

/// Toy registered pair: a warm square on a dim background (infrared) and a
/// textured scene (visible). Square placement and texture depend on `seed`.
pub fn synthetic_pair(size: usize, seed: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let side = (size / 3).max(1);
    let top = rng.random_range(0..=size - side);
    let left = rng.random_range(0..=size - side);
    // faint warm background so the infrared importance map is not all ties
    let ir = GrayImage::from_fn(size, size, |y, x| {
        let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
        if inside {
            0.95
        } else {
            0.1 + 0.05 * ((x + 2 * y) as f32 * 0.4).sin()
        }
    })
    .expect("values in range");
    ImagePair { ir, vi: texture_field(size, size, seed) }
}

/// `count` synthetic pairs with consecutive seeds.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<ImagePair> {
    (0..count as u64).map(|i| synthetic_pair(size, seed + i)).collect()
}

/// Writes `dir/ir/pairNNN.pgm` and `dir/vi/pairNNN.pgm`.
pub fn write_corpus(dir: impl AsRef<Path>, pairs: &[ImagePair]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["ir", "vi"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|source| ImageError::Io { path: d.clone(), source })?;
    }
    for (i, p) in pairs.iter().enumerate() {
        save_gray(&p.ir, dir.join("ir").join(format!("pair{i:03}.pgm")))?;
        save_gray(&p.vi, dir.join("vi").join(format!("pair{i:03}.pgm")))?;
    }
    Ok(())
}
