//! Synthetic iris-like data generation, paired augmentation, PNG mask/image
//! I/O and tab-separated dataset manifests.
//!
//! Everything is a pure function of (seed, index, option draws): a manifest
//! plus a seed reproduces every training batch exactly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    BadImage { path: PathBuf, detail: String },
    #[error("{path}: mask contains non-binary value {value} (only 0 and 255 are allowed)")]
    NonBinaryMask { path: PathBuf, value: u8 },
    #[error("{path}: expected an 8-bit grayscale PNG")]
    NotGrayscale { path: PathBuf },
    #[error("manifest {path} line {line}: expected `image<TAB>mask`")]
    ManifestParse { path: PathBuf, line: usize },
    #[error("{image} is {iw}x{ih} but mask {mask} is {mw}x{mh}")]
    PairMismatch { image: PathBuf, iw: u32, ih: u32, mask: PathBuf, mw: u32, mh: u32 },
    #[error("manifest {path} is empty")]
    EmptyManifest { path: PathBuf },
    #[error("invalid synthesis parameters: {0}")]
    BadParams(String),
    #[error("output directory {0} exists and is not empty (use force to overwrite)")]
    OutputDirNotEmpty(PathBuf),
}

type Result<T> = std::result::Result<T, DataError>;

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Binary segmentation mask, row-major, values in {0, 1} (1 = iris).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn iris_area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

// ── Synthetic generation ────────────────────────────────────────────────

/// Parameters of the synthetic eye generator. Radii are in pixels; the
/// pupil range must sit strictly below the iris range.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub pupil_radius: (f64, f64),
    pub iris_radius: (f64, f64),
    pub center_jitter: f64,
    pub eyelid_prob: f64,
    /// Eyelid chord height as a fraction of the iris radius.
    pub eyelid_coverage: (f64, f64),
    pub specular_spots: (usize, usize),
    pub spot_radius: (f64, f64),
    pub noise_amp: f64,
    pub background: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 64,
            height: 64,
            pupil_radius: (5.0, 8.0),
            iris_radius: (18.0, 25.0),
            center_jitter: 3.0,
            eyelid_prob: 0.5,
            eyelid_coverage: (0.55, 0.85),
            specular_spots: (0, 3),
            spot_radius: (1.0, 2.0),
            noise_amp: 10.0,
            background: (150.0, 210.0),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(DataError::BadParams("image size must be positive".into()));
        }
        if self.pupil_radius.0 > self.pupil_radius.1
            || self.iris_radius.0 > self.iris_radius.1
            || self.pupil_radius.1 >= self.iris_radius.0
        {
            return Err(DataError::BadParams(format!(
                "pupil radius range {:?} must lie strictly below iris radius range {:?}",
                self.pupil_radius, self.iris_radius
            )));
        }
        if !(0.0..=1.0).contains(&self.eyelid_prob) {
            return Err(DataError::BadParams("eyelid_prob must be in [0,1]".into()));
        }
        if self.specular_spots.0 > self.specular_spots.1 {
            return Err(DataError::BadParams("specular spot range is inverted".into()));
        }
        Ok(())
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministic sample generator: identical (params.seed-derived rng
/// stream, index) always produces identical bytes. The mask is the clean
/// iris annulus minus eyelid chords and specular spots.
pub fn generate_sample(params: &SynthParams, seed: u64, index: u64) -> Result<(ImageGray, Mask)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    let (w, h) = (params.width, params.height);

    let cx = w as f64 / 2.0 + sample_range(&mut rng, (-params.center_jitter, params.center_jitter));
    let cy = h as f64 / 2.0 + sample_range(&mut rng, (-params.center_jitter, params.center_jitter));
    let r_iris = sample_range(&mut rng, params.iris_radius);
    let r_pupil = sample_range(&mut rng, params.pupil_radius);

    let lid_top = if rng.gen_bool(params.eyelid_prob) {
        Some(cy - sample_range(&mut rng, params.eyelid_coverage) * r_iris)
    } else {
        None
    };
    let lid_bottom = if rng.gen_bool(params.eyelid_prob) {
        Some(cy + sample_range(&mut rng, params.eyelid_coverage) * r_iris)
    } else {
        None
    };

    let n_spots = if params.specular_spots.1 > params.specular_spots.0 {
        rng.gen_range(params.specular_spots.0..=params.specular_spots.1)
    } else {
        params.specular_spots.0
    };
    let spots: Vec<(f64, f64, f64)> = (0..n_spots)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad = sample_range(&mut rng, (r_pupil + 1.0, r_iris - 1.0));
            let sr = sample_range(&mut rng, params.spot_radius);
            (cx + rad * angle.cos(), cy + rad * angle.sin(), sr)
        })
        .collect();

    let bg_top = sample_range(&mut rng, params.background);
    let bg_bottom = sample_range(&mut rng, params.background);
    let tex_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tex_freq = rng.gen_range(6..12) as f64;
    let radial_freq = rng.gen_range(1.5..3.5);

    let mut image = vec![0u8; w * h];
    let mut mask = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64;
            let fx = x as f64;
            let dx = fx - cx;
            let dy = fy - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let behind_lid = lid_top.map_or(false, |l| fy < l) || lid_bottom.map_or(false, |l| fy > l);
            let in_spot = spots.iter().any(|&(sx, sy, sr)| {
                let ddx = fx - sx;
                let ddy = fy - sy;
                ddx * ddx + ddy * ddy <= sr * sr
            });

            let mut value = bg_top + (bg_bottom - bg_top) * fy / h.max(1) as f64;
            if !behind_lid {
                if dist <= r_pupil {
                    value = 25.0;
                } else if dist <= r_iris {
                    let theta = dy.atan2(dx);
                    value = 95.0
                        + 16.0 * (tex_freq * theta + tex_phase).sin()
                        + 12.0 * (radial_freq * dist).sin();
                    if dist >= r_pupil && !in_spot {
                        mask[y * w + x] = 1;
                    }
                }
                if in_spot {
                    value = 243.0;
                }
            }
            if params.noise_amp > 0.0 {
                value += rng.gen_range(-params.noise_amp..params.noise_amp);
            }
            image[y * w + x] = value.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok((ImageGray { width: w, height: h, data: image }, Mask { width: w, height: h, data: mask }))
}

// ── Augmentation ────────────────────────────────────────────────────────

/// Flip/translate/photometric policy; no blur.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentOptions {
    pub hflip_prob: f64,
    pub max_translate_frac: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions { hflip_prob: 0.5, max_translate_frac: 0.1, brightness: 0.2, contrast: 0.2 }
    }
}

pub fn hflip_image(img: &ImageGray) -> ImageGray {
    let mut out = img.clone();
    for y in 0..img.height {
        let row = &mut out.data[y * img.width..(y + 1) * img.width];
        row.reverse();
    }
    out
}

pub fn hflip_mask(mask: &Mask) -> Mask {
    let img = ImageGray { width: mask.width, height: mask.height, data: mask.data.clone() };
    let flipped = hflip_image(&img);
    Mask { width: mask.width, height: mask.height, data: flipped.data }
}

/// Shift content by (+tx, +ty) with zero padding.
pub fn translate_pair(img: &ImageGray, mask: &Mask, tx: i64, ty: i64) -> (ImageGray, Mask) {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut oi = vec![0u8; img.data.len()];
    let mut om = vec![0u8; mask.data.len()];
    for y in 0..h {
        let sy = y - ty;
        if sy < 0 || sy >= h {
            continue;
        }
        for x in 0..w {
            let sx = x - tx;
            if sx < 0 || sx >= w {
                continue;
            }
            oi[(y * w + x) as usize] = img.data[(sy * w + sx) as usize];
            om[(y * w + x) as usize] = mask.data[(sy * w + sx) as usize];
        }
    }
    (
        ImageGray { width: img.width, height: img.height, data: oi },
        Mask { width: mask.width, height: mask.height, data: om },
    )
}

/// Draw order is fixed (flip, tx, ty, contrast, brightness) so a seeded rng
/// reproduces the augmentation exactly. Geometry applies to both image and
/// mask; the photometric jitter touches the image only.
pub fn augment(
    img: &ImageGray,
    mask: &Mask,
    rng: &mut ChaCha8Rng,
    opts: &AugmentOptions,
) -> (ImageGray, Mask) {
    let flip = opts.hflip_prob > 0.0 && rng.gen_bool(opts.hflip_prob);
    let max_tx = (img.width as f64 * opts.max_translate_frac).floor() as i64;
    let max_ty = (img.height as f64 * opts.max_translate_frac).floor() as i64;
    let tx = if max_tx > 0 { rng.gen_range(-max_tx..=max_tx) } else { 0 };
    let ty = if max_ty > 0 { rng.gen_range(-max_ty..=max_ty) } else { 0 };
    let contrast = 1.0 + sample_range(rng, (-opts.contrast, opts.contrast));
    let brightness = sample_range(rng, (-opts.brightness, opts.brightness)) * 255.0;

    let (mut img, mut mask) = if flip { (hflip_image(img), hflip_mask(mask)) } else { (img.clone(), mask.clone()) };
    if tx != 0 || ty != 0 {
        let moved = translate_pair(&img, &mask, tx, ty);
        img = moved.0;
        mask = moved.1;
    }
    if contrast != 1.0 || brightness != 0.0 {
        for v in img.data.iter_mut() {
            let p = contrast * (*v as f64 - 128.0) + 128.0 + brightness;
            *v = p.round().clamp(0.0, 255.0) as u8;
        }
    }
    (img, mask)
}

// ── Tensor conversion ───────────────────────────────────────────────────

/// `[1, H, W]` tensor scaled to [0, 1].
pub fn image_to_tensor(img: &ImageGray) -> Tensor {
    let data: Vec<f64> = img.data.iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![1, img.height, img.width], data).expect("image dims agree")
}

/// One-hot `[classes, H, W]` tensor; class 1 is iris.
pub fn mask_to_onehot(mask: &Mask, classes: usize) -> Tensor {
    let plane = mask.width * mask.height;
    let mut data = vec![0.0; classes * plane];
    for (i, &v) in mask.data.iter().enumerate() {
        data[(v as usize) * plane + i] = 1.0;
    }
    Tensor::new(vec![classes, mask.height, mask.width], data).expect("mask dims agree")
}

// ── PNG I/O ─────────────────────────────────────────────────────────────

pub fn save_image(path: &Path, img: &ImageGray) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("raster dims agree");
    buf.save(path).map_err(|e| DataError::BadImage { path: path.to_path_buf(), detail: e.to_string() })
}

pub fn load_image(path: &Path) -> Result<ImageGray> {
    let img = image::open(path).map_err(|e| DataError::BadImage { path: path.to_path_buf(), detail: e.to_string() })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(ImageGray {
            width: g.width() as usize,
            height: g.height() as usize,
            data: g.into_raw(),
        }),
        _ => Err(DataError::NotGrayscale { path: path.to_path_buf() }),
    }
}

/// Masks are stored as {0, 255} grayscale PNGs; anything else is rejected.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes)
        .expect("raster dims agree");
    buf.save(path).map_err(|e| DataError::BadImage { path: path.to_path_buf(), detail: e.to_string() })
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = load_image(path).map_err(|e| match e {
        DataError::NotGrayscale { path } => DataError::NotGrayscale { path },
        other => other,
    })?;
    let mut data = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => return Err(DataError::NonBinaryMask { path: path.to_path_buf(), value: other }),
        }
    }
    Ok(Mask { width: img.width, height: img.height, data })
}

// ── Manifests ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Ordered `image<TAB>mask` records; relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (img, mask) = line
                .split_once('\t')
                .ok_or(DataError::ManifestParse { path: path.to_path_buf(), line: i + 1 })?;
            entries.push(ManifestEntry { image: dir.join(img), mask: dir.join(mask) });
        }
        if entries.is_empty() {
            return Err(DataError::EmptyManifest { path: path.to_path_buf() });
        }
        Ok(Manifest { entries })
    }

    /// Write records with paths relative to the manifest directory.
    pub fn save(path: &Path, relative: &[(String, String)]) -> Result<()> {
        let mut text = String::new();
        for (img, mask) in relative {
            text.push_str(img);
            text.push('\t');
            text.push_str(mask);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load one image/mask pair and check the dimensions agree.
    pub fn load_pair(&self, index: usize) -> Result<(ImageGray, Mask)> {
        let e = &self.entries[index];
        let img = load_image(&e.image)?;
        let mask = load_mask(&e.mask)?;
        if img.width != mask.width || img.height != mask.height {
            return Err(DataError::PairMismatch {
                image: e.image.clone(),
                iw: img.width as u32,
                ih: img.height as u32,
                mask: e.mask.clone(),
                mw: mask.width as u32,
                mh: mask.height as u32,
            });
        }
        Ok((img, mask))
    }
}

/// Generate `count` samples starting at `start_index` and write them plus a
/// manifest under `dir`. Returns the manifest path.
pub fn write_dataset(
    params: &SynthParams,
    seed: u64,
    start_index: u64,
    count: usize,
    dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    let mut records = Vec::with_capacity(count);
    for k in 0..count {
        let idx = start_index + k as u64;
        let (img, mask) = generate_sample(params, seed, idx)?;
        let img_name = format!("img_{idx:05}.png");
        let mask_name = format!("mask_{idx:05}.png");
        save_image(&dir.join(&img_name), &img)?;
        save_mask(&dir.join(&mask_name), &mask)?;
        records.push((img_name, mask_name));
    }
    let manifest = dir.join("manifest.tsv");
    Manifest::save(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SynthParams::default();
        let (i1, m1) = generate_sample(&p, 7, 3).unwrap();
        let (i2, m2) = generate_sample(&p, 7, 3).unwrap();
        assert_eq!(i1, i2);
        assert_eq!(m1, m2);
        let (i3, _) = generate_sample(&p, 7, 4).unwrap();
        assert_ne!(i1, i3);
    }

    #[test]
    fn clean_annulus_matches_analytic_area() {
        let p = SynthParams {
            center_jitter: 0.0,
            eyelid_prob: 0.0,
            specular_spots: (0, 0),
            noise_amp: 0.0,
            ..SynthParams::default()
        };
        for idx in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            r.set_stream(idx + 1);
            // replicate the generator's first four draws to learn the radii
            let _cx = sample_range(&mut r, (-0.0, 0.0));
            let _cy = sample_range(&mut r, (-0.0, 0.0));
            let r_iris = sample_range(&mut r, p.iris_radius);
            let r_pupil = sample_range(&mut r, p.pupil_radius);

            let (_, mask) = generate_sample(&p, 11, idx).unwrap();
            let analytic = std::f64::consts::PI * (r_iris * r_iris - r_pupil * r_pupil);
            let band = std::f64::consts::TAU * (r_iris + r_pupil);
            let area = mask.iris_area() as f64;
            assert!(
                (area - analytic).abs() <= band,
                "index {idx}: area {area} vs analytic {analytic} (band {band})"
            );
        }
    }

    #[test]
    fn masks_are_strictly_binary() {
        let (_, mask) = generate_sample(&SynthParams::default(), 1, 0).unwrap();
        assert!(mask.data.iter().all(|&v| v == 0 || v == 1));
        assert!(mask.iris_area() > 0);
    }

    #[test]
    fn rejects_overlapping_radius_ranges() {
        let p = SynthParams { pupil_radius: (5.0, 20.0), iris_radius: (18.0, 25.0), ..Default::default() };
        assert!(matches!(p.validate(), Err(DataError::BadParams(_))));
    }

    #[test]
    fn augment_identity_options_change_nothing() {
        let (img, mask) = generate_sample(&SynthParams::default(), 2, 0).unwrap();
        let opts = AugmentOptions { hflip_prob: 0.0, max_translate_frac: 0.0, brightness: 0.0, contrast: 0.0 };
        let (ai, am) = augment(&img, &mask, &mut rng(0), &opts);
        assert_eq!(ai, img);
        assert_eq!(am, mask);
    }

    #[test]
    fn forced_flip_flips_mask_exactly() {
        let (img, mask) = generate_sample(&SynthParams::default(), 3, 1).unwrap();
        let opts = AugmentOptions { hflip_prob: 1.0, max_translate_frac: 0.0, brightness: 0.0, contrast: 0.0 };
        let (_, am) = augment(&img, &mask, &mut rng(0), &opts);
        for y in 0..mask.height {
            for x in 0..mask.width {
                assert_eq!(am.data[y * mask.width + x], mask.data[y * mask.width + (mask.width - 1 - x)]);
            }
        }
    }

    #[test]
    fn translation_moves_centroid_exactly() {
        let p = SynthParams { center_jitter: 0.0, eyelid_prob: 0.0, specular_spots: (0, 0), ..Default::default() };
        let (img, mask) = generate_sample(&p, 4, 0).unwrap();
        let centroid = |m: &Mask| {
            let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0.0f64);
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.data[y * m.width + x] == 1 {
                        sx += x as f64;
                        sy += y as f64;
                        n += 1.0;
                    }
                }
            }
            (sx / n, sy / n)
        };
        let before = centroid(&mask);
        // annulus is centred, so a (3, -2) shift stays unclipped
        let (_, moved) = translate_pair(&img, &mask, 3, -2);
        assert_eq!(moved.iris_area(), mask.iris_area());
        let after = centroid(&moved);
        assert!((after.0 - before.0 - 3.0).abs() < 1e-9);
        assert!((after.1 - before.1 + 2.0).abs() < 1e-9);
    }

    #[test]
    fn png_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mask) = generate_sample(&SynthParams::default(), 5, 2).unwrap();
        let ip = dir.path().join("img.png");
        let mp = dir.path().join("mask.png");
        save_image(&ip, &img).unwrap();
        save_mask(&mp, &mask).unwrap();
        assert_eq!(load_image(&ip).unwrap(), img);
        assert_eq!(load_mask(&mp).unwrap(), mask);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        let gray = ImageGray { width: 2, height: 2, data: vec![0, 255, 128, 0] };
        save_image(&p, &gray).unwrap();
        assert!(matches!(load_mask(&p), Err(DataError::NonBinaryMask { value: 128, .. })));
    }

    #[test]
    fn rgb_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let rgb = image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
        rgb.save(&p).unwrap();
        assert!(matches!(load_image(&p), Err(DataError::NotGrayscale { .. })));
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&SynthParams::default(), 9, 0, 4, dir.path()).unwrap();
        let m = Manifest::load(&manifest).unwrap();
        assert_eq!(m.len(), 4);
        for i in 0..4 {
            let (img, mask) = m.load_pair(i).unwrap();
            assert_eq!((img.width, img.height), (mask.width, mask.height));
        }
        // identical seeds produce identical files
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&SynthParams::default(), 9, 0, 4, dir2.path()).unwrap();
        for name in ["img_00000.png", "mask_00003.png", "manifest.tsv"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn manifest_rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        std::fs::write(&p, "only-one-column\n").unwrap();
        assert!(matches!(Manifest::load(&p), Err(DataError::ManifestParse { line: 1, .. })));
    }

    #[test]
    fn onehot_encloses_mask() {
        let mask = Mask { width: 2, height: 2, data: vec![0, 1, 1, 0] };
        let t = mask_to_onehot(&mask, 2);
        assert_eq!(t.shape, vec![2, 2, 2]);
        assert_eq!(t.data.as_ref(), &vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    }
}
