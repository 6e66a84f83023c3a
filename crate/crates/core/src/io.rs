//! File formats and configuration: binary PPM images, PGM label maps, `F32`
//! float rasters, intrinsics and pose text files, snippet manifests, run
//! configurations and the class table.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{format_kitti_poses, parse_kitti_poses, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::fit::{FitConfig, GradientMode, TargetMode};
use crate::losses::{LossConfig, LossWeights};
use crate::raster::{DepthMap, Image, LabelMap, Raster, NUM_CLASSES};

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Netpbm

/// Parses a binary Netpbm header and returns `(width, height, payload offset)`.
fn netpbm_header(bytes: &[u8], magic: &[u8; 2], kind: &'static str, path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(kind, path, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(kind, path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(kind, path, "bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(kind, path, "missing whitespace after maxval"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(kind, path, format!("only 8-bit files are supported, maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(kind, path, "empty raster"));
    }
    Ok((w, h, pos + 1))
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, kind: &'static str, path: &Path) -> Result<&'a [u8]> {
    match bytes.len().checked_sub(offset) {
        Some(n) if n == len => Ok(&bytes[offset..]),
        Some(n) => Err(Error::format(kind, path, format!("expected {len} payload bytes, found {n}"))),
        None => Err(Error::format(kind, path, "truncated")),
    }
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().flat_map(|px| px.map(quantize)));
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let (w, h, off) = netpbm_header(bytes, b"P6", "PPM image", path)?;
    let data = payload(bytes, off, 3 * w * h, "PPM image", path)?;
    let px = data
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Raster::from_vec(w, h, px)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    out
}

/// Reads a label map; ids outside `0..19` other than the ignore value are rejected.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let (w, h, off) = netpbm_header(bytes, b"P5", "PGM label map", path)?;
    let data = payload(bytes, off, w * h, "PGM label map", path)?;
    let labels = Raster::from_vec(w, h, data.to_vec())?;
    labels
        .validate_labels()
        .map_err(|e| Error::format("PGM label map", path, e.to_string()))?;
    Ok(labels)
}

// ---------------------------------------------------------------------------
// F32 rasters

pub fn encode_f32(raster: &Raster<f64>) -> Vec<u8> {
    let mut out = format!("F32 {} {}\n", raster.width(), raster.height()).into_bytes();
    for x in raster.data() {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8], path: &Path) -> Result<Raster<f64>> {
    const KIND: &str = "F32 raster";
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(KIND, path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(KIND, path, "header is not text"))?;
    let parts: Vec<&str> = header.split(' ').collect();
    let (w, h) = match parts.as_slice() {
        ["F32", w, h] => match (w.parse::<usize>(), h.parse::<usize>()) {
            (Ok(w), Ok(h)) if w > 0 && h > 0 => (w, h),
            _ => return Err(Error::format(KIND, path, format!("bad dimensions in {header:?}"))),
        },
        _ => return Err(Error::format(KIND, path, format!("expected \"F32 <width> <height>\", got {header:?}"))),
    };
    let data = payload(bytes, nl + 1, 4 * w * h, KIND, path)?;
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Raster::from_vec(w, h, values)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_ppm(&read_bytes(path)?, path)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_pgm(&read_bytes(path)?, path)
}

pub fn read_raster(path: &Path) -> Result<Raster<f64>> {
    decode_f32(&read_bytes(path)?, path)
}

/// Reads an `F32` raster and checks that every value is a positive depth.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let d = read_raster(path)?;
    d.validate_positive()
        .map_err(|e| Error::format("depth map", path, e.to_string()))?;
    Ok(d)
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    Intrinsics::parse(&read_text(path)?).map_err(|e| Error::format("intrinsics", path, e.to_string()))
}

pub fn format_intrinsics(k: &Intrinsics) -> String {
    format!("{k}\n")
}

/// Camera-to-world poses, one KITTI line each.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    parse_kitti_poses(&read_text(path)?).map_err(|e| Error::format("pose file", path, e.to_string()))
}

pub fn format_poses(poses: &[Pose]) -> String {
    format_kitti_poses(poses)
}

/// Maps `values` onto a blue-to-red ramp between `lo` and `hi`.
pub fn colorize(values: &Raster<f64>, lo: f64, hi: f64) -> Image {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.map(|x| {
        let t = if x.is_finite() { ((x - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        [t, 1.0 - (2.0 * t - 1.0).abs(), 1.0 - t]
    })
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
}

/// Frame list of one snippet. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnippetManifest {
    pub intrinsics: PathBuf,
    /// Camera-to-world ground-truth poses, one per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<PathBuf>,
    pub frames: Vec<FrameEntry>,
}

/// Snippet lengths accepted by the manifest.
pub const SNIPPET_LENGTHS: [usize; 3] = [2, 3, 5];

#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub image: Image,
    pub labels: LabelMap,
    pub depth: Option<DepthMap>,
}

#[derive(Clone, Debug)]
pub struct LoadedSnippet {
    pub intrinsics: Intrinsics,
    pub frames: Vec<LoadedFrame>,
    pub poses: Option<Vec<Pose>>,
}

impl LoadedSnippet {
    pub fn gt_depths(&self) -> Option<Vec<DepthMap>> {
        self.frames.iter().map(|f| f.depth.clone()).collect()
    }

    /// `T_{i→j} = c_j⁻¹ ∘ c_i` from the ground-truth camera poses.
    pub fn gt_relative(&self, i: usize, j: usize) -> Option<Pose> {
        self.poses.as_ref().map(|c| c[j].inverse().compose(&c[i]))
    }
}

impl SnippetManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: SnippetManifest = toml::from_str(text).map_err(|e| Error::format("manifest", path, e.to_string()))?;
        if !SNIPPET_LENGTHS.contains(&m.frames.len()) {
            return Err(Error::format(
                "manifest",
                path,
                format!("snippet length {} not in {SNIPPET_LENGTHS:?}", m.frames.len()),
            ));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Loads every referenced file and checks that all rasters share one size.
    pub fn load(&self, manifest_path: &Path) -> Result<LoadedSnippet> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        let at = |p: &Path| base.join(p);
        let intrinsics = read_intrinsics(&at(&self.intrinsics))?;
        let mut frames: Vec<LoadedFrame> = Vec::with_capacity(self.frames.len());
        for e in &self.frames {
            let image = read_image(&at(&e.image))?;
            let labels = read_labels(&at(&e.labels))?;
            let depth = e.depth.as_deref().map(|p| read_depth(&at(p))).transpose()?;
            let first = frames.first().map_or(&image, |f| &f.image);
            let dims = first.dims();
            let mismatch = |what: &Path, d: (usize, usize)| {
                Error::Shape(format!("{}: {}x{} but the snippet is {}x{}", what.display(), d.0, d.1, dims.0, dims.1))
            };
            if image.dims() != dims {
                return Err(mismatch(&e.image, image.dims()));
            }
            if labels.dims() != dims {
                return Err(mismatch(&e.labels, labels.dims()));
            }
            if let (Some(d), Some(p)) = (&depth, &e.depth) {
                if d.dims() != dims {
                    return Err(mismatch(p, d.dims()));
                }
            }
            frames.push(LoadedFrame { image, labels, depth });
        }
        let poses = self.poses.as_deref().map(|p| read_poses(&at(p))).transpose()?;
        if let Some(p) = &poses {
            if p.len() != frames.len() {
                return Err(Error::Shape(format!(
                    "{} poses for {} frames",
                    p.len(),
                    frames.len()
                )));
            }
        }
        Ok(LoadedSnippet {
            intrinsics,
            frames,
            poses,
        })
    }
}

// ---------------------------------------------------------------------------
// Class table

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    /// Member of the road-surface set of the ordering prior.
    #[serde(default)]
    pub ground: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTable {
    #[serde(rename = "class")]
    pub classes: Vec<ClassEntry>,
}

const DEFAULT_CLASSES: &str = include_str!("../../../config/classes.toml");

impl ClassTable {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let t: ClassTable = toml::from_str(text).map_err(|e| Error::format("class table", path, e.to_string()))?;
        let mut seen = [false; NUM_CLASSES as usize];
        for c in &t.classes {
            match seen.get_mut(c.id as usize) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::format("class table", path, format!("duplicate id {}", c.id))),
                None => return Err(Error::format("class table", path, format!("id {} outside 0..{NUM_CLASSES}", c.id))),
            }
        }
        if t.classes.len() != NUM_CLASSES as usize {
            return Err(Error::format(
                "class table",
                path,
                format!("expected {NUM_CLASSES} classes, found {}", t.classes.len()),
            ));
        }
        Ok(t)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn ground_ids(&self) -> Vec<u8> {
        self.classes.iter().filter(|c| c.ground).map(|c| c.id).collect()
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::parse(DEFAULT_CLASSES, Path::new("config/classes.toml")).expect("bundled class table is valid")
    }
}

// ---------------------------------------------------------------------------
// Run configuration

/// Loss terms that can be switched off for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub semantic_loss: bool,
    pub semantic_mask: bool,
    pub point_loss: bool,
    pub road_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            semantic_loss: true,
            semantic_mask: true,
            point_loss: true,
            road_loss: true,
        }
    }
}

/// Optimizer settings of `fit-synthetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub max_iterations: usize,
    pub init_depth: f64,
    pub depth_step: f64,
    pub pose_step: f64,
    pub tolerance: f64,
    pub mask_refresh: usize,
    pub targets: TargetMode,
    pub gradient_mode: GradientMode,
}

impl Default for FitSettings {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            max_iterations: f.max_iterations,
            init_depth: 10.0,
            depth_step: f.depth_step,
            pose_step: f.pose_step,
            tolerance: f.tolerance,
            mask_refresh: f.mask_refresh,
            targets: f.targets,
            gradient_mode: f.gradient_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub weights: LossWeights,
    pub depth_cap: f64,
    pub ablation: Ablation,
    /// Class table file; the bundled table when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub fit: FitSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            depth_cap: crate::DEFAULT_DEPTH_CAP,
            ablation: Ablation::default(),
            classes: None,
            output_dir: None,
            seed: 0,
            fit: FitSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::format("run config", path, e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads the file; relative `classes` paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let mut c = Self::parse(&read_text(path)?, path)?;
        if let Some(p) = &c.classes {
            if p.is_relative() {
                c.classes = Some(path.parent().unwrap_or(Path::new("")).join(p));
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_cap > 0.0 && self.depth_cap.is_finite()) {
            return Err(Error::Config(format!("depth cap {} must be positive", self.depth_cap)));
        }
        self.weights.validate(self.depth_cap)?;
        if !(self.fit.init_depth > 0.0 && self.fit.init_depth.is_finite()) {
            return Err(Error::Config(format!("initial depth {} must be positive", self.fit.init_depth)));
        }
        self.fit_config(Vec::new()).validate()
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        match &self.classes {
            Some(p) => ClassTable::read(p),
            None => Ok(ClassTable::default()),
        }
    }

    /// Weights with ablated terms zeroed, masking switch and road-set classes.
    pub fn loss_config(&self, ground_classes: Vec<u8>) -> LossConfig {
        let mut w = self.weights;
        if !self.ablation.semantic_loss {
            w.semantic = 0.0;
        }
        if !self.ablation.point_loss {
            w.point = 0.0;
        }
        if !self.ablation.road_loss {
            w.road = 0.0;
        }
        LossConfig {
            weights: w,
            semantic_masking: self.ablation.semantic_mask,
            ground_classes,
        }
    }

    pub fn fit_config(&self, ground_classes: Vec<u8>) -> FitConfig {
        let f = &self.fit;
        let base = FitConfig::default();
        FitConfig {
            loss: self.loss_config(ground_classes),
            max_iterations: f.max_iterations,
            depth_step: f.depth_step,
            pose_step: f.pose_step,
            tolerance: f.tolerance,
            gradient_mode: f.gradient_mode,
            mask_refresh: f.mask_refresh,
            targets: f.targets,
            max_depth_step: base.max_depth_step.max(f.depth_step),
            max_pose_step: base.max_pose_step.max(f.pose_step),
            ..base
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::raster::IGNORE_LABEL;

    fn p() -> &'static Path {
        Path::new("test")
    }

    #[test]
    fn depth_file_layout() {
        let d = DepthMap::filled(1, 1, 5.0);
        let bytes = encode_f32(&d);
        assert_eq!(bytes, b"F32 1 1\n\x00\x00\xa0\x40");
        assert_eq!(decode_f32(&bytes, p()).unwrap(), d);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut bytes = encode_pgm(&LabelMap::filled(2, 1, 3));
        *bytes.last_mut().unwrap() = 19;
        let err = decode_pgm(&bytes, p()).unwrap_err();
        assert!(err.to_string().contains("19"), "{err}");
        *bytes.last_mut().unwrap() = IGNORE_LABEL;
        assert!(decode_pgm(&bytes, p()).is_ok());
    }

    #[test]
    fn netpbm_header_comments_and_truncation() {
        let bytes = b"P5\n# comment\n2 1\n255\n\x01\x02";
        let l = decode_pgm(bytes, p()).unwrap();
        assert_eq!(l.data(), &[1, 2]);
        assert!(decode_pgm(&bytes[..bytes.len() - 1], p()).is_err());
        assert!(decode_pgm(b"P5\n2 1\n65535\n\x00\x00\x00\x00", p()).is_err());
        assert!(decode_ppm(bytes, p()).is_err());
    }

    #[test]
    fn f32_rejects_bad_headers() {
        assert!(decode_f32(b"F32 2 1\n\x00\x00\x00\x00", p()).is_err());
        assert!(decode_f32(b"F64 1 1\n\x00\x00\x00\x00", p()).is_err());
        assert!(decode_f32(b"F32 0 1\n", p()).is_err());
        assert!(decode_f32(b"no newline", p()).is_err());
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let img = Image::from_fn(w, h, |u, v| {
                let k = seed.wrapping_mul(31).wrapping_add((u * 7 + v * 13) as u64);
                [(k % 256) as f64 / 255.0, ((k / 3) % 256) as f64 / 255.0, ((k / 7) % 256) as f64 / 255.0]
            });
            let bytes = encode_ppm(&img);
            let back = decode_ppm(&bytes, p()).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_ppm(&back), bytes);
        }

        #[test]
        fn f32_round_trip(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..20)) {
            let r = Raster::from_vec(vals.len(), 1, vals.iter().map(|&x| x as f64).collect()).unwrap();
            let bytes = encode_f32(&r);
            let back = decode_f32(&bytes, p()).unwrap();
            prop_assert_eq!(encode_f32(&back), bytes);
            for (a, b) in back.data().iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), (*b as f64).to_bits());
            }
        }

        #[test]
        fn pgm_round_trip(labels in prop::collection::vec(prop_oneof![0u8..19, Just(IGNORE_LABEL)], 1..30)) {
            let l = LabelMap::from_vec(labels.len(), 1, labels).unwrap();
            let bytes = encode_pgm(&l);
            prop_assert_eq!(decode_pgm(&bytes, p()).unwrap(), l);
        }
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        write_atomic(&path, b"old contents").unwrap();
        write_atomic(&path, b"new").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"new");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn bundled_class_table() {
        let t = ClassTable::default();
        assert_eq!(t.classes.len(), 19);
        assert_eq!(t.id("road"), Some(0));
        assert_eq!(t.id("sidewalk"), Some(1));
        assert_eq!(t.ground_ids(), vec![0, 1]);
    }

    #[test]
    fn class_table_validation() {
        let dup = "[[class]]\nid = 0\nname = \"a\"\n[[class]]\nid = 0\nname = \"b\"\n";
        assert!(ClassTable::parse(dup, p()).is_err());
        let short = "[[class]]\nid = 0\nname = \"a\"\n";
        assert!(ClassTable::parse(short, p()).is_err());
    }

    #[test]
    fn run_config_defaults_and_ablation() {
        let c = RunConfig::parse("", p()).unwrap();
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.weights.point_penalty, 320.0);
        assert_eq!(c.depth_cap, 80.0);
        let c = RunConfig::parse("[ablation]\nroad_loss = false\nsemantic_mask = false\n", p()).unwrap();
        let l = c.loss_config(vec![0, 1]);
        assert_eq!(l.weights.road, 0.0);
        assert!(!l.semantic_masking);
        assert_eq!(l.weights.point, 0.1);
    }

    #[test]
    fn run_config_rejects_invalid_weights() {
        assert!(RunConfig::parse("[weights]\nalpha = 1.5\n", p()).is_err());
        assert!(RunConfig::parse("[weights]\npoint_penalty = 10.0\n", p()).is_err());
        assert!(RunConfig::parse("depth_cap = 200.0\n", p()).is_err());
        assert!(RunConfig::parse("unknown = 1\n", p()).is_err());
    }

    #[test]
    fn manifest_length_is_checked() {
        let frame = "[[frames]]\nimage = \"a.ppm\"\nlabels = \"a.pgm\"\n";
        let four = format!("intrinsics = \"k.txt\"\n{}", frame.repeat(4));
        assert!(SnippetManifest::parse(&four, p()).is_err());
        let three = format!("intrinsics = \"k.txt\"\n{}", frame.repeat(3));
        let m = SnippetManifest::parse(&three, p()).unwrap();
        assert_eq!(SnippetManifest::parse(&m.to_toml(), p()).unwrap(), m);
    }
}
