//! Synthetic scenes with exact depth, sparse labels and the PNG dataset
//! layout (`images/<id>.png` RGB8, `depth/<id>.png` Luma16 with
//! `meters = value / 256`, 0 = invalid).

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageReader, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SparseDepth;
use crate::tensor::{Float, Tensor};
use crate::tokens::ImageTensor;

pub const DEPTH_SCALE: f64 = 256.0;

/// Deterministic sub-generator for `(seed, stream, index)`.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 32);
    ChaCha8Rng::seed_from_u64(rng.random())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Ground depth at the bottom row.
    pub ground_near: f64,
    /// Ground depth at the top row.
    pub ground_far: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Per-object colour offset amplitude.
    pub object_tint: f64,
    /// Std of per-pixel colour noise.
    pub texture_noise: f64,
    /// Fixes the texture noise independently of the geometry draw.
    #[serde(default)]
    pub texture_seed: Option<u64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            d_min: 1.0,
            d_max: 80.0,
            ground_near: 3.0,
            ground_far: 80.0,
            min_objects: 1,
            max_objects: 4,
            object_tint: 0.1,
            texture_noise: 0.03,
            texture_seed: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::InvalidRange(format!("need 0 < d_min < d_max, got [{}, {}]", self.d_min, self.d_max)));
        }
        if !(self.d_min <= self.ground_near && self.ground_near <= self.ground_far && self.ground_far <= self.d_max) {
            return Err(Error::InvalidRange(format!(
                "ground [{}, {}] must lie in [{}, {}]",
                self.ground_near, self.ground_far, self.d_min, self.d_max
            )));
        }
        if self.height < 2 || self.width < 2 || self.min_objects > self.max_objects {
            return Err(Error::InvalidConfig("scene needs at least 2x2 pixels and min_objects <= max_objects".into()));
        }
        if self.d_max * DEPTH_SCALE > f64::from(u16::MAX) {
            return Err(Error::InvalidRange(format!("d_max {} does not fit the 16-bit encoding", self.d_max)));
        }
        Ok(())
    }

    /// Ground depth of row `y` (inverse depth linear in `y`).
    pub fn ground_depth(&self, y: usize) -> f64 {
        let t = y as f64 / (self.height - 1) as f64;
        1.0 / (1.0 / self.ground_far + (1.0 / self.ground_near - 1.0 / self.ground_far) * t)
    }

    /// Base colour for a depth: warm when near, cool when far.
    pub fn depth_color(&self, d: f64) -> [f64; 3] {
        let t = ((d.ln() - self.d_min.ln()) / (self.d_max.ln() - self.d_min.ln())).clamp(0.0, 1.0);
        let near = [0.95, 0.45, 0.15];
        let far = [0.2, 0.5, 0.95];
        [0, 1, 2].map(|c| near[c] + (far[c] - near[c]) * t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

/// A fronto-parallel object at constant depth. Coordinates in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub depth: f64,
    pub tint: [f64; 3],
}

impl SceneObject {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.half_w;
        let dy = (y as f64 + 0.5 - self.cy) / self.half_h;
        match self.shape {
            Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

/// Samples objects standing on the ground plane; nearer ones are larger and
/// lower in the image.
pub fn sample_objects<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Vec<SceneObject> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let (lo, hi) = (cfg.ground_near.ln(), cfg.ground_far.ln());
    (0..n)
        .map(|_| {
            let depth = if hi > lo { rng.random_range(lo..hi).exp() } else { cfg.ground_near };
            let inv_span = 1.0 / cfg.ground_near - 1.0 / cfg.ground_far;
            let foot = if inv_span > 0.0 {
                (1.0 / depth - 1.0 / cfg.ground_far) / inv_span * (h - 1.0) + 0.5
            } else {
                rng.random_range(0.5..h)
            };
            let size = (cfg.ground_near / depth).sqrt() * h * rng.random_range(0.25..0.5);
            let half_h = size.max(1.0);
            let half_w = (size * rng.random_range(0.5..1.5)).max(1.0);
            let shape = if rng.random_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
            let tint = [0; 3].map(|_| rng.random_range(-1.0..=1.0) * cfg.object_tint);
            SceneObject { shape, cx: rng.random_range(0.0..w), cy: foot - half_h, half_w, half_h, depth, tint }
        })
        .collect()
}

/// Renders objects over the ground plane with a z-buffer. Returns the image
/// in `[0, 1]` and the exact depth map.
pub fn render_scene<F: Float, R: Rng + ?Sized>(
    cfg: &SceneConfig,
    objects: &[SceneObject],
    texture_rng: &mut R,
) -> Result<(ImageTensor<F>, Tensor<F>)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut depth = vec![0.0f64; h * w];
    let mut color = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        let d = cfg.ground_depth(y);
        let c = cfg.depth_color(d);
        for x in 0..w {
            depth[y * w + x] = d;
            color[y * w + x] = c;
        }
    }
    for obj in objects {
        let d = obj.depth.clamp(cfg.d_min, cfg.d_max);
        let base = cfg.depth_color(d);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if d < depth[i] && obj.covers(x, y) {
                    depth[i] = d;
                    color[i] = [0, 1, 2].map(|c| base[c] + obj.tint[c]);
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.texture_noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut img = vec![F::zero(); 3 * h * w];
    for (i, c) in color.iter().enumerate() {
        for ch in 0..3 {
            let n = if cfg.texture_noise > 0.0 { noise.sample(texture_rng) } else { 0.0 };
            img[ch * h * w + i] = F::lit((c[ch] + n).clamp(0.0, 1.0));
        }
    }
    let image = ImageTensor::new(Tensor::new([3, h, w], img))?;
    Ok((image, Tensor::new([h, w], depth.into_iter().map(F::lit).collect())))
}

/// A random scene. Geometry comes from `rng`; texture noise from
/// `cfg.texture_seed` when set, otherwise from the next draw of `rng`.
pub fn generate_scene<F: Float, R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<(ImageTensor<F>, Tensor<F>)> {
    cfg.validate()?;
    let objects = sample_objects(cfg, rng);
    let tex_seed = match cfg.texture_seed {
        Some(s) => s,
        None => rng.random(),
    };
    render_scene(cfg, &objects, &mut ChaCha8Rng::seed_from_u64(tex_seed))
}

/// Keeps each pixel with probability `density`.
pub fn sparsify<F: Float, R: Rng + ?Sized>(depth: &Tensor<F>, density: f64, rng: &mut R) -> Result<SparseDepth<F>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidRange(format!("density {density} outside (0, 1]")));
    }
    let valid: Vec<bool> = (0..depth.len()).map(|_| rng.random::<f64>() < density).collect();
    let values = Tensor::from_fn(depth.shape().to_vec(), |i| if valid[i] { depth[i] } else { F::zero() });
    SparseDepth::new(values, valid)
}

/// Image as stored on disk (8 bits per channel).
pub fn quantize_image<F: Float>(img: &ImageTensor<F>) -> ImageTensor<F> {
    let t = img.tensor().map(|v| F::lit(encode_u8(v.as_f64()) as f64 / 255.0));
    ImageTensor::new(t).expect("same shape")
}

/// Depth as stored on disk (1/256 m steps, 0 = invalid).
pub fn quantize_depth<F: Float>(gt: &SparseDepth<F>) -> SparseDepth<F> {
    let codes = encode_depth(gt);
    decode_depth(&codes, gt.height(), gt.width())
}

fn encode_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_depth<F: Float>(gt: &SparseDepth<F>) -> Vec<u16> {
    gt.values
        .data()
        .iter()
        .zip(&gt.valid)
        .map(|(&d, &ok)| {
            if ok {
                (d.as_f64() * DEPTH_SCALE).round().clamp(1.0, f64::from(u16::MAX)) as u16
            } else {
                0
            }
        })
        .collect()
}

fn decode_depth<F: Float>(codes: &[u16], h: usize, w: usize) -> SparseDepth<F> {
    let values = Tensor::from_fn([h, w], |i| F::lit(f64::from(codes[i]) / DEPTH_SCALE));
    let valid = codes.iter().map(|&c| c != 0).collect();
    SparseDepth { values, valid }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    pub depth: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub samples: Vec<SampleEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.samples.iter().filter(|s| s.depth.is_some()).count()
    }

    pub fn get(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn write_sample<F: Float>(root: &Path, id: &str, image: &ImageTensor<F>, depth: Option<&SparseDepth<F>>) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let img_dir = root.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| encode_u8(image.at(c, y as usize, x as usize).as_f64())))
    });
    let path = img_dir.join(format!("{id}.png"));
    buf.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
    if let Some(gt) = depth {
        if gt.height() != h || gt.width() != w {
            return Err(Error::format(&path, format!("depth {}x{} for image {h}x{w}", gt.height(), gt.width())));
        }
        let dir = root.join("depth");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let codes = encode_depth(gt);
        let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, codes).expect("sized buffer");
        let path = dir.join(format!("{id}.png"));
        buf.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let images = png_stems(&root.join("images"))?;
    let depth_dir = root.join("depth");
    let depths = if depth_dir.is_dir() { png_stems(&depth_dir)? } else { Vec::new() };
    if let Some((id, path)) = depths.iter().find(|(id, _)| !images.iter().any(|(i, _)| i == id)) {
        return Err(Error::format(path, format!("depth for {id} has no image")));
    }
    let samples = images
        .into_iter()
        .map(|(id, image)| {
            let depth = depths.iter().find(|(d, _)| *d == id).map(|(_, p)| p.clone());
            SampleEntry { id, image, depth }
        })
        .collect();
    Ok(DatasetIndex { root: root.to_path_buf(), samples })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

pub fn read_image<F: Float>(path: &Path) -> Result<ImageTensor<F>> {
    let rgb = open_image(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::format(path, "empty image"));
    }
    Ok(ImageTensor::from_fn(h, w, |c, y, x| F::lit(f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0)))
}

pub fn read_depth<F: Float>(path: &Path) -> Result<SparseDepth<F>> {
    match open_image(path)? {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Ok(decode_depth(buf.as_raw(), h, w))
        }
        other => Err(Error::format(path, format!("depth must be 16-bit single-channel, got {:?}", other.color()))),
    }
}

pub fn read_sample<F: Float>(index: &DatasetIndex, id: &str) -> Result<(ImageTensor<F>, Option<SparseDepth<F>>)> {
    let entry = index
        .get(id)
        .ok_or_else(|| Error::format(&index.root, format!("no sample {id}")))?;
    let image = read_image(&entry.image)?;
    let depth = match &entry.depth {
        None => None,
        Some(p) => {
            let d = read_depth(p)?;
            if d.height() != image.height() || d.width() != image.width() {
                return Err(Error::format(
                    p,
                    format!("depth {}x{} but image {}x{}", d.height(), d.width(), image.height(), image.width()),
                ));
            }
            Some(d)
        }
    };
    Ok((image, depth))
}

/// An in-memory sample.
#[derive(Clone, Debug)]
pub struct Sample<F> {
    pub id: String,
    pub image: ImageTensor<F>,
    pub gt: Option<SparseDepth<F>>,
}

pub fn read_all<F: Float>(index: &DatasetIndex) -> Result<Vec<Sample<F>>> {
    index
        .samples
        .iter()
        .map(|s| {
            let (image, gt) = read_sample(index, &s.id)?;
            Ok(Sample { id: s.id.clone(), image, gt })
        })
        .collect()
}

/// How a synthetic split is produced. Labeled samples come first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Fraction of labeled pixels kept.
    pub density: f64,
    pub seed: u64,
}

pub fn sample_id(i: usize) -> String {
    format!("{i:06}")
}

/// Generates a split in memory, quantized exactly as [`write_sample`] stores it.
pub fn synthesize<F: Float>(scene: &SceneConfig, split: &SplitSpec) -> Result<Vec<Sample<F>>> {
    (0..split.n_labeled + split.n_unlabeled)
        .map(|i| {
            let mut rng = derive_rng(split.seed, 0, i as u64);
            let (image, depth) = generate_scene::<F, _>(scene, &mut rng)?;
            let gt = if i < split.n_labeled {
                let sparse = sparsify(&depth, split.density, &mut derive_rng(split.seed, 1, i as u64))?;
                Some(quantize_depth(&sparse))
            } else {
                None
            };
            Ok(Sample { id: sample_id(i), image: quantize_image(&image), gt })
        })
        .collect()
}

/// Generates a split and writes it under `root`.
pub fn write_split(root: &Path, scene: &SceneConfig, split: &SplitSpec) -> Result<Vec<PathBuf>> {
    let samples = synthesize::<f64>(scene, split)?;
    let mut written = Vec::with_capacity(samples.len());
    for s in &samples {
        write_sample(root, &s.id, &s.image, s.gt.as_ref())?;
        written.push(root.join("images").join(format!("{}.png", s.id)));
    }
    Ok(written)
}
