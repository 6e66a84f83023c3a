//! Analytic ray-cast renderer for parametric scenes with exact depth,
//! labels, occlusion and correspondence ground truth.

use std::f64::consts::TAU;

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pixel, Point3, Pose};
use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image, LabelMap, Mask, Raster, NUM_CLASSES};
use crate::warp::in_bounds;

/// Rendered depths must lie strictly above this value.
pub const MIN_RENDER_DEPTH: f64 = 0.1;

/// Scale applied to `ln z` when texturing the ground along the viewing axis.
const GROUND_LOG_SCALE: f64 = 2.0;

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

/// Axis-angle rotation and translation of a camera-to-world pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    #[serde(default = "zero3")]
    pub rotation: [f64; 3],
    #[serde(default = "zero3")]
    pub translation: [f64; 3],
}

impl PoseSpec {
    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [x, y, z],
        }
    }

    pub fn to_pose(&self) -> Pose {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        Pose::exp6(&Vector6::new(a, b, c, x, y, z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    /// Sinusoids per colour channel.
    pub components: usize,
    pub min_wavelength: f64,
    pub max_wavelength: f64,
    /// Bound on the summed amplitude around the mean value 0.5.
    pub amplitude: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            components: 6,
            min_wavelength: 1.5,
            max_wavelength: 4.0,
            amplitude: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// World plane `z = depth`.
    Plane { depth: f64 },
    /// World plane `y = height` (y points down).
    Ground { height: f64 },
    /// Axis-aligned box with corners at frame 0.
    Box { min: [f64; 3], max: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub class: u8,
    /// World translation per frame.
    #[serde(default = "zero3")]
    pub velocity: [f64; 3],
}

impl Primitive {
    fn offset(&self, frame: usize) -> Vector3<f64> {
        Vector3::from(self.velocity) * frame as f64
    }

    /// Ray parameter of the nearest hit with `t > 0`, at the given frame.
    fn intersect(&self, origin: &Point3, dir: &Vector3<f64>, frame: usize) -> Option<f64> {
        let o = origin - self.offset(frame);
        let t = match self.shape {
            Shape::Plane { depth } => (dir.z != 0.0).then(|| (depth - o.z) / dir.z)?,
            Shape::Ground { height } => (dir.y != 0.0).then(|| (height - o.y) / dir.y)?,
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (p, q) = ((min[a] - o[a]) / dir[a], (max[a] - o[a]) / dir[a]);
                    t0 = t0.max(p.min(q));
                    t1 = t1.min(p.max(q));
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > 0.0 {
                    t0
                } else {
                    t1
                }
            }
        };
        (t > 0.0 && t.is_finite()).then_some(t)
    }

    /// Surface coordinates fed to the texture, in the primitive's own frame.
    fn surface_coords(&self, world: &Point3, frame: usize) -> Vector3<f64> {
        let p = world - self.offset(frame);
        match self.shape {
            Shape::Plane { .. } => Vector3::new(p.x, p.y, 0.0),
            Shape::Ground { .. } => Vector3::new(p.x, GROUND_LOG_SCALE * p.z.max(1e-9).ln(), 0.0),
            Shape::Box { min, .. } => p - Vector3::from(min),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// Camera-to-world pose of each frame.
    pub frames: Vec<PoseSpec>,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub texture: TextureSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub depth_cap: f64,
}

fn default_cap() -> f64 {
    crate::DEFAULT_DEPTH_CAP
}

#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub image: Image,
    pub depth: DepthMap,
    pub labels: LabelMap,
    pub valid: Mask,
    /// Camera-to-world pose.
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Wave {
    k: Vector3<f64>,
    phase: f64,
    amp: f64,
}

/// Seeded sum-of-sinusoids colour texture.
#[derive(Clone, Debug)]
struct Texture {
    channels: [Vec<Wave>; 3],
}

impl Texture {
    fn new(spec: &TextureSpec, seed: u64, index: usize, planar: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let amp = if spec.components == 0 {
            0.0
        } else {
            spec.amplitude / spec.components as f64
        };
        let mut channel = || {
            (0..spec.components)
                .map(|_| {
                    let theta: f64 = rng.gen_range(0.0..TAU);
                    let dir = if planar {
                        Vector3::new(theta.cos(), theta.sin(), 0.0)
                    } else {
                        let z: f64 = rng.gen_range(-1.0..1.0);
                        let r = (1.0 - z * z).sqrt();
                        Vector3::new(r * theta.cos(), r * theta.sin(), z)
                    };
                    let lambda = if spec.max_wavelength > spec.min_wavelength {
                        rng.gen_range(spec.min_wavelength..spec.max_wavelength)
                    } else {
                        spec.min_wavelength
                    };
                    Wave {
                        k: dir * (TAU / lambda),
                        phase: rng.gen_range(0.0..TAU),
                        amp,
                    }
                })
                .collect::<Vec<_>>()
        };
        Self {
            channels: [channel(), channel(), channel()],
        }
    }

    fn eval(&self, x: &Vector3<f64>) -> [f64; 3] {
        let ch = |waves: &[Wave]| {
            let s: f64 = waves.iter().map(|w| w.amp * (w.k.dot(x) + w.phase).sin()).sum();
            (0.5 + s).clamp(0.0, 1.0)
        };
        [ch(&self.channels[0]), ch(&self.channels[1]), ch(&self.channels[2])]
    }
}

/// First surface along a ray.
#[derive(Clone, Copy, Debug)]
struct Hit {
    primitive: usize,
    t: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Scene(format!("image size {}×{} is empty", self.width, self.height)));
        }
        if self.frames.is_empty() {
            return Err(Error::Scene("scene has no frames".into()));
        }
        if self.primitives.is_empty() {
            return Err(Error::Scene("scene has no primitives".into()));
        }
        if !(self.depth_cap > MIN_RENDER_DEPTH) {
            return Err(Error::Scene(format!("depth cap {} must exceed {}", self.depth_cap, MIN_RENDER_DEPTH)));
        }
        let t = &self.texture;
        if !(t.min_wavelength > 0.0 && t.max_wavelength >= t.min_wavelength) {
            return Err(Error::Scene("texture wavelengths must satisfy 0 < min ≤ max".into()));
        }
        if !(0.0..=0.5).contains(&t.amplitude) {
            return Err(Error::Scene(format!("texture amplitude {} outside [0, 0.5]", t.amplitude)));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.class >= NUM_CLASSES {
                return Err(Error::Scene(format!("primitive {i} has class {} ≥ {NUM_CLASSES}", p.class)));
            }
            if let Shape::Box { min, max } = p.shape {
                if (0..3).any(|a| !(min[a] < max[a])) {
                    return Err(Error::Scene(format!("box {i} has min {min:?} not below max {max:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parses and validates a TOML scene description.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Scene(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn camera_pose(&self, frame: usize) -> Pose {
        self.frames[frame].to_pose()
    }

    /// Transform taking camera-`i` coordinates to camera-`j` coordinates.
    pub fn relative_pose(&self, i: usize, j: usize) -> Pose {
        self.camera_pose(j).inverse().compose(&self.camera_pose(i))
    }

    fn textures(&self) -> Vec<Texture> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, p)| Texture::new(&self.texture, self.seed, i, !matches!(p.shape, Shape::Box { .. })))
            .collect()
    }

    fn cast(&self, cam: &Pose, pixel: Pixel, frame: usize) -> Option<Hit> {
        let dir = cam.rotation * self.intrinsics.ray(pixel);
        let origin = cam.translation;
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(&origin, &dir, frame) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { primitive: i, t });
                }
            }
        }
        best
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.frames.len() {
            return Err(Error::Scene(format!(
                "frame {frame} out of range for a {}-frame scene",
                self.frames.len()
            )));
        }
        Ok(())
    }

    /// Ray-casts one frame. Depth is the camera `z` of the nearest surface.
    pub fn render(&self, frame: usize) -> Result<RenderedFrame> {
        self.validate()?;
        self.check_frame(frame)?;
        let cam = self.camera_pose(frame);
        let textures = self.textures();
        let (w, h) = (self.width, self.height);
        let mut image = Image::filled(w, h, [0.0; 3]);
        let mut depth = DepthMap::filled(w, h, 0.0);
        let mut labels = LabelMap::filled(w, h, 0);
        for v in 0..h {
            for u in 0..w {
                let pixel = Pixel::new(u as f64, v as f64);
                let hit = self.cast(&cam, pixel, frame).ok_or_else(|| {
                    Error::Scene(format!("pixel ({u}, {v}) of frame {frame} sees no primitive; add a background"))
                })?;
                if !(hit.t > MIN_RENDER_DEPTH && hit.t < self.depth_cap) {
                    return Err(Error::Scene(format!(
                        "pixel ({u}, {v}) of frame {frame} has depth {} outside ({MIN_RENDER_DEPTH}, {})",
                        hit.t, self.depth_cap
                    )));
                }
                let prim = &self.primitives[hit.primitive];
                let world = cam.translation + cam.rotation * self.intrinsics.ray(pixel) * hit.t;
                *image.get_mut(u, v) = textures[hit.primitive].eval(&prim.surface_coords(&world, frame));
                *depth.get_mut(u, v) = hit.t;
                *labels.get_mut(u, v) = prim.class;
            }
        }
        Ok(RenderedFrame {
            image,
            depth,
            labels,
            valid: Mask::filled(w, h, true),
            pose: cam,
        })
    }

    pub fn render_all(&self) -> Result<Vec<RenderedFrame>> {
        (0..self.frames.len()).map(|i| self.render(i)).collect()
    }

    /// Where the point seen at `pixel` in frame `i` lands in frame `j` if the
    /// scene were static: only camera motion is applied, so points on moving
    /// primitives generally come out inconsistent.
    pub fn ground_truth_correspondence(&self, i: usize, j: usize, pixel: Pixel) -> Result<Correspondence> {
        self.validate()?;
        self.check_frame(i)?;
        self.check_frame(j)?;
        let cam_i = self.camera_pose(i);
        let hit = self
            .cast(&cam_i, pixel, i)
            .ok_or_else(|| Error::Scene(format!("pixel ({}, {}) of frame {i} sees no primitive", pixel.u, pixel.v)))?;
        let prim = &self.primitives[hit.primitive];
        let world = cam_i.translation + cam_i.rotation * self.intrinsics.ray(pixel) * hit.t;
        let cam_j = self.camera_pose(j);
        let local = cam_j.inverse().transform(&world);
        let Some(q) = self.intrinsics.project(&local) else {
            return Ok(Correspondence {
                pixel: None,
                in_bounds: false,
                occluded: false,
                consistent: false,
                source_class: prim.class,
                target_class: None,
            });
        };
        let in_view = in_bounds(q, self.width, self.height);
        let seen = self.cast(&cam_j, q, j);
        let occluded = matches!(seen, Some(s) if s.t < local.z - 1e-9 * local.z.max(1.0));
        let target_class = seen.map(|s| self.primitives[s.primitive].class);
        Ok(Correspondence {
            pixel: Some(q),
            in_bounds: in_view,
            occluded,
            consistent: target_class == Some(prim.class),
            source_class: prim.class,
            target_class,
        })
    }

    /// Oracle for the semantic inconsistency mask of target `t` against source `s`:
    /// true where the classes seen at corresponding points differ.
    pub fn inconsistency_oracle(&self, t: usize, s: usize) -> Result<(Mask, Mask)> {
        let mut inconsistent = Mask::filled(self.width, self.height, false);
        let mut valid = Mask::filled(self.width, self.height, false);
        for v in 0..self.height {
            for u in 0..self.width {
                let c = self.ground_truth_correspondence(t, s, Pixel::new(u as f64, v as f64))?;
                if c.in_bounds {
                    *valid.get_mut(u, v) = true;
                    *inconsistent.get_mut(u, v) = !c.consistent;
                }
            }
        }
        Ok((inconsistent, valid))
    }

    /// Plain `u × v` raster of the primitive visible at each pixel of a frame.
    pub fn primitive_ids(&self, frame: usize) -> Result<Raster<usize>> {
        self.check_frame(frame)?;
        let cam = self.camera_pose(frame);
        let mut out = Raster::filled(self.width, self.height, usize::MAX);
        for v in 0..self.height {
            for u in 0..self.width {
                if let Some(hit) = self.cast(&cam, Pixel::new(u as f64, v as f64), frame) {
                    *out.get_mut(u, v) = hit.primitive;
                }
            }
        }
        Ok(out)
    }

    /// Fronto-parallel wall at `wall_depth` above a road-class ground plane one
    /// meter below the camera, with the given camera positions.
    pub fn wall_and_ground(width: usize, height: usize, wall_depth: f64, frames: Vec<PoseSpec>) -> SceneSpec {
        SceneSpec {
            width,
            height,
            intrinsics: Intrinsics {
                fx: width as f64 * 100.0 / 128.0,
                fy: width as f64 * 100.0 / 128.0,
                cx: (width as f64 - 1.0) / 2.0,
                cy: (height as f64 - 1.0) / 2.0,
            },
            frames,
            primitives: vec![
                Primitive {
                    shape: Shape::Plane { depth: wall_depth },
                    class: 2,
                    velocity: [0.0; 3],
                },
                Primitive {
                    shape: Shape::Ground { height: 1.0 },
                    class: 0,
                    velocity: [0.0; 3],
                },
            ],
            texture: TextureSpec::default(),
            seed: 7,
            depth_cap: crate::DEFAULT_DEPTH_CAP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Exact sub-pixel location in the other frame; `None` when behind the camera.
    pub pixel: Option<Pixel>,
    pub in_bounds: bool,
    /// The point is hidden behind another surface in the other frame.
    pub occluded: bool,
    /// The class seen at `pixel` in the other frame equals the source class.
    pub consistent: bool,
    pub source_class: u8,
    pub target_class: Option<u8>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::synthesize_view;

    fn plane_only(depth: f64, frames: Vec<PoseSpec>) -> SceneSpec {
        SceneSpec {
            width: 32,
            height: 24,
            intrinsics: Intrinsics::new(40.0, 40.0, 15.5, 11.5).unwrap(),
            frames,
            primitives: vec![Primitive {
                shape: Shape::Plane { depth },
                class: 2,
                velocity: [0.0; 3],
            }],
            texture: TextureSpec::default(),
            seed: 3,
            depth_cap: 80.0,
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut spec = SceneSpec::wall_and_ground(16, 8, 8.0, vec![PoseSpec::default(), PoseSpec::translation(0.4, 0.0, 0.2)]);
        spec.primitives.push(Primitive {
            shape: Shape::Box { min: [-1.0, -0.5, 5.0], max: [0.0, 0.5, 6.0] },
            class: 13,
            velocity: [-0.3, 0.0, 0.0],
        });
        let text = spec.to_toml();
        assert_eq!(SceneSpec::from_toml(&text).unwrap(), spec);
        assert!(SceneSpec::from_toml(&text.replace("velocity", "speed")).is_err());
    }

    #[test]
    fn plane_depth_is_constant() {
        let f = plane_only(5.0, vec![PoseSpec::default()]).render(0).unwrap();
        assert!(f.depth.data().iter().all(|d| (d - 5.0).abs() < 1e-12));
        assert!(f.labels.data().iter().all(|l| *l == 2));
        assert!(f.image.data().iter().flatten().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(f.valid.count(), 32 * 24);
    }

    #[test]
    fn ground_depth_grows_toward_horizon() {
        let spec = SceneSpec::wall_and_ground(64, 32, 30.0, vec![PoseSpec::default()]);
        let f = spec.render(0).unwrap();
        let u = 10;
        let mut prev = 0.0;
        for v in (0..32).rev() {
            if *f.labels.get(u, v) != 0 {
                break;
            }
            let d = *f.depth.get(u, v);
            // z = fy · y0 / (v − cy)
            let expected = spec.intrinsics.fy / (v as f64 - spec.intrinsics.cy);
            assert!((d - expected).abs() < 1e-9 * expected);
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn lateral_motion_shifts_the_image() {
        // fx · tx / d = 40 · 0.25 / 5 = 2 px
        let spec = plane_only(5.0, vec![PoseSpec::default(), PoseSpec::translation(0.25, 0.0, 0.0)]);
        let a = spec.render(0).unwrap();
        let b = spec.render(1).unwrap();
        for v in 0..24 {
            for u in 0..30 {
                let (x, y) = (a.image.get(u + 2, v), b.image.get(u, v));
                for c in 0..3 {
                    assert!((x[c] - y[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let spec = plane_only(5.0, vec![PoseSpec::default()]);
        assert_eq!(spec.render(0).unwrap().image, spec.render(0).unwrap().image);
        let mut other = spec.clone();
        other.seed = 4;
        assert_ne!(spec.render(0).unwrap().image, other.render(0).unwrap().image);
    }

    #[test]
    fn coverage_and_range_errors() {
        let mut spec = plane_only(5.0, vec![PoseSpec::default()]);
        spec.primitives[0].shape = Shape::Ground { height: 1.0 };
        assert!(spec.render(0).is_err());
        let far = plane_only(200.0, vec![PoseSpec::default()]);
        assert!(far.render(0).is_err());
        let mut bad = plane_only(5.0, vec![PoseSpec::default()]);
        bad.primitives[0].class = 19;
        assert!(bad.render(0).is_err());
    }

    #[test]
    fn static_warp_reconstructs_target() {
        let spec = SceneSpec::wall_and_ground(
            128,
            64,
            8.0,
            vec![PoseSpec::default(), PoseSpec::translation(0.4, 0.0, 0.2)],
        );
        let t = spec.render(0).unwrap();
        let s = spec.render(1).unwrap();
        let (rec, valid) = synthesize_view(&s.image, &t.depth, &spec.intrinsics, &spec.relative_pose(0, 1));
        let mut err = 0.0;
        for i in 0..rec.len() {
            if valid.data()[i] {
                let (a, b) = (rec.data()[i], t.image.data()[i]);
                err += (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
            }
        }
        let mae = err / valid.count() as f64;
        assert!(mae <= 2e-3, "mae {mae}");
    }

    #[test]
    fn identity_correspondence_and_box_occlusion() {
        let mut spec = plane_only(10.0, vec![PoseSpec::default(), PoseSpec::default()]);
        let c = spec.ground_truth_correspondence(0, 0, Pixel::new(3.0, 4.0)).unwrap();
        let q = c.pixel.unwrap();
        assert!((q.u - 3.0).abs() < 1e-9 && (q.v - 4.0).abs() < 1e-9);
        assert!(c.consistent && !c.occluded && c.in_bounds);

        // a box that slides in front of the wall by frame 1
        spec.primitives.push(Primitive {
            shape: Shape::Box {
                min: [-3.0, -1.0, 4.0],
                max: [-2.0, 1.0, 5.0],
            },
            class: 13,
            velocity: [2.5, 0.0, 0.0],
        });
        let c = spec.ground_truth_correspondence(0, 1, Pixel::new(15.5, 11.5)).unwrap();
        assert!(c.occluded);
        assert!(!c.consistent);
        assert_eq!(c.target_class, Some(13));

        // a pixel on the box maps to where the box used to be, now showing the wall
        let ids = spec.primitive_ids(1).unwrap();
        let (u, v) = (0..32 * 24)
            .map(|i| (i % 32, i / 32))
            .find(|&(u, v)| *ids.get(u, v) == 1)
            .expect("box visible in frame 1");
        let c = spec.ground_truth_correspondence(1, 0, Pixel::new(u as f64, v as f64)).unwrap();
        assert_eq!(c.source_class, 13);
        assert!(!c.consistent);
    }
}
