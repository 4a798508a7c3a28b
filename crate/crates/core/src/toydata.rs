//! Procedural toy videos: one square or disc moving with elastic reflection.
//!
//! Positions and sizes are fractions of the frame width (and height for the
//! vertical coordinate). Pixel `(i, j)` covers `[j, j+1] × [i, i+1]` in pixel
//! units, so the square's coverage is an exact box overlap and integer-pixel
//! motion translates the rendering exactly.

use atmv_tensor::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, Frame};
use crate::conditioning::SemanticCondition;
use crate::error::{dim_err, Result};
use crate::latent::LatentVideo;
use crate::Real;

/// Width of the semantic condition vector built from a scene.
pub const CONDITION_WIDTH: usize = 8;

pub const RADIUS_RANGE: (f64, f64) = (0.1, 0.25);
pub const SPEED_LIMIT: f64 = 0.1;
pub const INTENSITY_RANGE: (f64, f64) = (0.5, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Square,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeClass,
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
}

impl SceneSpec {
    /// `[one-hot class (2), x₀, y₀, vx·10, vy·10, radius, intensity]`.
    pub fn condition(&self) -> SemanticCondition {
        let (sq, disc) = match self.shape {
            ShapeClass::Square => (1.0, 0.0),
            ShapeClass::Disc => (0.0, 1.0),
        };
        SemanticCondition::new(
            [
                sq,
                disc,
                self.center.0,
                self.center.1,
                self.velocity.0 * 10.0,
                self.velocity.1 * 10.0,
                self.radius,
                self.intensity,
            ]
            .iter()
            .map(|&v| v as Real)
            .collect(),
        )
    }

    /// Center after `k` frames, folded back into `[r, 1 − r]` on each axis.
    pub fn center_at(&self, k: usize) -> (f64, f64) {
        let fold = |p0: f64, v: f64| reflect(p0 + k as f64 * v, self.radius, 1.0 - self.radius);
        (fold(self.center.0, self.velocity.0), fold(self.center.1, self.velocity.1))
    }

    /// True when the unfolded trajectory over `frames` stays inside the walls.
    pub fn wall_free(&self, frames: usize) -> bool {
        let (lo, hi) = (self.radius, 1.0 - self.radius);
        (0..frames).all(|k| {
            let x = self.center.0 + k as f64 * self.velocity.0;
            let y = self.center.1 + k as f64 * self.velocity.1;
            (lo..=hi).contains(&x) && (lo..=hi).contains(&y)
        })
    }

    /// Scene advanced by `k` frames: same shape, reflected velocity.
    pub fn advanced(&self, k: usize) -> SceneSpec {
        let axis = |p0: f64, v: f64| {
            let (lo, hi) = (self.radius, 1.0 - self.radius);
            let period = 2.0 * (hi - lo);
            let m = (p0 + k as f64 * v - lo).rem_euclid(period);
            if m > hi - lo {
                -v
            } else {
                v
            }
        };
        SceneSpec {
            center: self.center_at(k),
            velocity: (
                axis(self.center.0, self.velocity.0),
                axis(self.center.1, self.velocity.1),
            ),
            ..self.clone()
        }
    }
}

fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let len = hi - lo;
    if len <= 0.0 {
        return lo;
    }
    let m = (p - lo).rem_euclid(2.0 * len);
    lo + if m > len { 2.0 * len - m } else { m }
}

pub fn generate_scene(rng: &mut Rng) -> SceneSpec {
    let shape = if rng.bernoulli(0.5) {
        ShapeClass::Square
    } else {
        ShapeClass::Disc
    };
    let radius = rng.uniform_range(RADIUS_RANGE.0, RADIUS_RANGE.1);
    let center = (
        rng.uniform_range(radius, 1.0 - radius),
        rng.uniform_range(radius, 1.0 - radius),
    );
    let velocity = (
        rng.uniform_range(-SPEED_LIMIT, SPEED_LIMIT),
        rng.uniform_range(-SPEED_LIMIT, SPEED_LIMIT),
    );
    let intensity = rng.uniform_range(INTENSITY_RANGE.0, INTENSITY_RANGE.1);
    SceneSpec {
        shape,
        center,
        velocity,
        radius,
        intensity,
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn render_frame(scene: &SceneSpec, k: usize, height: usize, width: usize) -> Frame {
    let (cx, cy) = scene.center_at(k);
    let (cx, cy) = (cx * width as f64, cy * height as f64);
    let r = scene.radius * width as f64;
    let mut pixels = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let cover = match scene.shape {
                ShapeClass::Square => {
                    overlap(j as f64, j as f64 + 1.0, cx - r, cx + r)
                        * overlap(i as f64, i as f64 + 1.0, cy - r, cy + r)
                }
                ShapeClass::Disc => {
                    let d = (j as f64 + 0.5 - cx).hypot(i as f64 + 0.5 - cy);
                    (r - d + 0.5).clamp(0.0, 1.0)
                }
            };
            pixels.push((scene.intensity * cover) as Real);
        }
    }
    Frame {
        height,
        width,
        pixels,
    }
}

pub fn render_video(scene: &SceneSpec, frames: usize, height: usize, width: usize) -> Result<Vec<Frame>> {
    if height % 2 != 0 || width % 2 != 0 || height == 0 || width == 0 {
        return Err(dim_err!("render needs even, nonzero extents, got {height}×{width}"));
    }
    Ok((0..frames)
        .map(|k| render_frame(scene, k, height, width))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub scene: SceneSpec,
    pub frames: Vec<Frame>,
    pub latents: LatentVideo,
    pub condition: SemanticCondition,
    pub seed: u64,
}

impl ClipSample {
    pub fn from_scene(scene: SceneSpec, frames: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        let rendered = render_video(&scene, frames, height, width)?;
        let latents = rendered.iter().map(encode).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            condition: scene.condition(),
            latents: LatentVideo::from_frames(&latents)?,
            frames: rendered,
            scene,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            clips: 4096,
            frames: 8,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub params: DatasetParams,
    pub train: Vec<ClipSample>,
    pub val: Vec<ClipSample>,
}

/// Per-clip seed; independent of how many clips are generated or in what order.
pub fn clip_seed(dataset_seed: u64, index: usize) -> u64 {
    Rng::derive_seed(dataset_seed, index as u64)
}

pub fn make_clip(params: &DatasetParams, index: usize) -> Result<ClipSample> {
    let seed = clip_seed(params.seed, index);
    let scene = generate_scene(&mut Rng::new(seed));
    ClipSample::from_scene(scene, params.frames, params.height, params.width, seed)
}

/// First `clips·9/10` (integer division) indices train, the rest validate.
pub fn make_dataset(params: &DatasetParams) -> Result<Dataset> {
    if params.clips == 0 || params.frames == 0 {
        return Err(dim_err!("dataset needs at least one clip and one frame"));
    }
    let n_train = params.clips * 9 / 10;
    let mut all = (0..params.clips)
        .map(|i| make_clip(params, i))
        .collect::<Result<Vec<_>>>()?;
    let val = all.split_off(n_train);
    Ok(Dataset {
        params: params.clone(),
        train: all,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(shape: ShapeClass, vx: f64) -> SceneSpec {
        SceneSpec {
            shape,
            center: (0.3, 0.5),
            velocity: (vx, 0.0),
            radius: 0.15,
            intensity: 0.8,
        }
    }

    #[test]
    fn scene_determinism_and_ranges() {
        assert_eq!(generate_scene(&mut Rng::new(4)), generate_scene(&mut Rng::new(4)));
        let mut rng = Rng::new(0);
        let scenes: Vec<_> = (0..1000).map(|_| generate_scene(&mut rng)).collect();
        assert!(scenes.iter().any(|s| s.shape == ShapeClass::Square));
        assert!(scenes.iter().any(|s| s.shape == ShapeClass::Disc));
        for s in &scenes {
            assert!((0.1..=0.25).contains(&s.radius));
            assert!((0.5..=1.0).contains(&s.intensity));
            assert!(s.velocity.0.abs() <= 0.1 && s.velocity.1.abs() <= 0.1);
            assert!(s.condition().vector.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn static_scene_repeats() {
        let f = render_video(&scene(ShapeClass::Disc, 0.0), 4, 32, 32).unwrap();
        assert!(f.iter().all(|x| x == &f[0]));
    }

    #[test]
    fn integer_shift_translates_exactly() {
        for shape in [ShapeClass::Square, ShapeClass::Disc] {
            let f = render_video(&scene(shape, 2.0 / 32.0), 4, 32, 32).unwrap();
            for (k, fk) in f.iter().enumerate() {
                for i in 0..32 {
                    for j in 2 * k..32 {
                        let d = (fk.at(i, j) - f[0].at(i, j - 2 * k)).abs();
                        assert!(d < 1e-5, "{shape:?} k={k} ({i},{j}) {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn pixels_in_unit_range() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let s = generate_scene(&mut rng);
            for f in render_video(&s, 8, 32, 32).unwrap() {
                assert!(f.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn reflection_stays_inside() {
        let s = SceneSpec {
            velocity: (0.09, -0.07),
            ..scene(ShapeClass::Square, 0.0)
        };
        for k in 0..100 {
            let (x, y) = s.center_at(k);
            assert!((0.15..=0.85).contains(&x) && (0.15..=0.85).contains(&y));
        }
        let a = s.advanced(13);
        for k in 0..10 {
            let (p, q) = (a.center_at(k), s.center_at(13 + k));
            assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_split_and_consistency() {
        let p = DatasetParams {
            clips: 20,
            frames: 3,
            ..Default::default()
        };
        let d = make_dataset(&p).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (18, 2));
        let again = make_dataset(&p).unwrap();
        assert_eq!(d.train, again.train);
        assert_eq!(d.val[1], make_clip(&p, 19).unwrap());
        for c in &d.train {
            for (k, f) in c.frames.iter().enumerate() {
                assert_eq!(encode(f).unwrap(), c.latents.frame(k));
            }
        }
        assert!(render_video(&scene(ShapeClass::Disc, 0.0), 2, 31, 32).is_err());
    }
}
