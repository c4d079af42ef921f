//! Procedurally animated cartoon faces.
//!
//! A face is drawn in its own frame (`x` right, `y` down, about one unit
//! tall) and placed on the image by a similarity transform. All positions
//! use the keypoint convention: `-1` and `1` are the centers of the border
//! pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{AppError, Result};
use crate::image_io::Image;
use crate::manifest::Manifest;

pub const MIN_SIZE: usize = 32;
pub const MANIFEST_NAME: &str = "manifest.txt";
pub const NUM_LANDMARKS: usize = 5;
const SUPERSAMPLE: usize = 4;

const FACE_CENTER: [f64; 2] = [0.0, 0.05];
const FACE_RADII: [f64; 2] = [0.55, 0.7];
const EYE_Y: f64 = -0.12;
const EYE_DX: f64 = 0.22;
const NOSE: [f64; 2] = [0.0, 0.12];
const MOUTH_Y: f64 = 0.36;
const MOUTH_HALF_WIDTH: f64 = 0.2;

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub background: Rgb,
    pub skin: Rgb,
    pub hair: Rgb,
    pub iris: Rgb,
    pub mouth: Rgb,
    /// Multiplies the face width.
    pub face_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub center: [f64; 2],
    /// Radians, clockwise on screen.
    pub angle: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expression {
    /// 0 closed, 1 wide open.
    pub eye_open: f64,
    /// 0 closed, 1 wide open.
    pub mouth_open: f64,
    /// -1 frown, 1 smile.
    pub mouth_curve: f64,
}

/// Sinusoidal head motion plus a random walk on the expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub base: Pose,
    pub translate_amp: [f64; 2],
    pub rotate_amp: f64,
    pub scale_amp: f64,
    /// Frames per full oscillation.
    pub period: f64,
    pub phase: [f64; 4],
    pub expression: Expression,
    /// Standard deviation of each expression increment.
    pub expression_step: f64,
}

impl Trajectory {
    /// A head that never moves and never changes expression.
    pub fn still(base: Pose, expression: Expression) -> Self {
        Trajectory {
            base,
            translate_amp: [0.0; 2],
            rotate_amp: 0.0,
            scale_amp: 0.0,
            period: 1.0,
            phase: [0.0; 4],
            expression,
            expression_step: 0.0,
        }
    }

    pub fn pose(&self, t: usize) -> Pose {
        let w = core::f64::consts::TAU * t as f64 / self.period;
        let s = |i: usize| (w + self.phase[i]).sin();
        Pose {
            center: [
                self.base.center[0] + self.translate_amp[0] * s(0),
                self.base.center[1] + self.translate_amp[1] * s(1),
            ],
            angle: self.base.angle + self.rotate_amp * s(2),
            scale: self.base.scale * (1.0 + self.scale_amp * s(3)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub appearance: Appearance,
    pub trajectory: Trajectory,
    /// Seeds the expression random walk.
    pub seed: u64,
}

impl Scene {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut color = |lo: f32, hi: f32| -> Rgb { core::array::from_fn(|_| rng.random_range(lo..hi)) };
        let background = color(0.05, 0.5);
        let skin = color(0.55, 0.95);
        let hair = color(0.0, 0.45);
        let iris = color(0.0, 0.6);
        let mouth = [rng.random_range(0.5..0.9), rng.random_range(0.0..0.3), rng.random_range(0.05..0.35)];
        let appearance = Appearance { background, skin, hair, iris, mouth, face_width: rng.random_range(0.85..1.1) };
        let base = Pose {
            center: [rng.random_range(-0.08..0.08), rng.random_range(-0.05..0.08)],
            angle: rng.random_range(-0.1..0.1),
            scale: rng.random_range(0.85..1.0),
        };
        let expression = Expression {
            eye_open: rng.random_range(0.4..1.0),
            mouth_open: rng.random_range(0.0..0.6),
            mouth_curve: rng.random_range(-0.5..0.8),
        };
        let trajectory = Trajectory {
            base,
            translate_amp: [rng.random_range(0.0..0.12), rng.random_range(0.0..0.08)],
            rotate_amp: rng.random_range(0.0..0.25),
            scale_amp: rng.random_range(0.0..0.08),
            period: rng.random_range(18.0..40.0),
            phase: core::array::from_fn(|_| rng.random_range(0.0..core::f64::consts::TAU)),
            expression,
            expression_step: 0.12,
        };
        Scene { appearance, trajectory, seed: rng.random() }
    }

    /// Pose and expression of every frame.
    pub fn frames(&self, num_frames: usize) -> Vec<(Pose, Expression)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let step = Normal::new(0.0, self.trajectory.expression_step.max(0.0)).expect("finite deviation");
        let mut e = self.trajectory.expression;
        (0..num_frames)
            .map(|t| {
                if t > 0 && self.trajectory.expression_step > 0.0 {
                    e.eye_open = reflect(e.eye_open + step.sample(&mut rng), 0.0, 1.0);
                    e.mouth_open = reflect(e.mouth_open + step.sample(&mut rng), 0.0, 1.0);
                    e.mouth_curve = reflect(e.mouth_curve + step.sample(&mut rng), -1.0, 1.0);
                }
                (self.trajectory.pose(t), e)
            })
            .collect()
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let mut x = (v - lo).rem_euclid(2.0 * span);
    if x > span {
        x = 2.0 * span - x;
    }
    lo + x
}

/// Eye centers (left, right), nose tip, mouth corners (left, right).
pub fn landmarks(app: &Appearance, pose: &Pose) -> [[f64; 2]; NUM_LANDMARKS] {
    let fw = app.face_width;
    let local = [
        [-EYE_DX * fw, EYE_Y],
        [EYE_DX * fw, EYE_Y],
        NOSE,
        [-MOUTH_HALF_WIDTH * fw, MOUTH_Y],
        [MOUTH_HALF_WIDTH * fw, MOUTH_Y],
    ];
    local.map(|q| to_image(pose, q))
}

fn to_image(pose: &Pose, q: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.angle.sin_cos();
    [pose.center[0] + pose.scale * (c * q[0] - s * q[1]), pose.center[1] + pose.scale * (s * q[0] + c * q[1])]
}

fn to_face(pose: &Pose, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.angle.sin_cos();
    let d = [(p[0] - pose.center[0]) / pose.scale, (p[1] - pose.center[1]) / pose.scale];
    [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
}

fn in_ellipse(q: [f64; 2], center: [f64; 2], radii: [f64; 2]) -> bool {
    let dx = (q[0] - center[0]) / radii[0];
    let dy = (q[1] - center[1]) / radii[1];
    dx * dx + dy * dy <= 1.0
}

/// Color of the face-frame point `q`.
fn shade(app: &Appearance, e: &Expression, q: [f64; 2]) -> Rgb {
    let fw = app.face_width;
    let face_radii = [FACE_RADII[0] * fw, FACE_RADII[1]];
    let in_face = in_ellipse(q, FACE_CENTER, face_radii);
    let hair_radii = [face_radii[0] * 1.1, FACE_RADII[1] * 0.8];
    if !in_face {
        if in_ellipse(q, [0.0, -0.22], hair_radii) {
            return app.hair;
        }
        return app.background;
    }
    // fringe across the top of the face
    if q[1] < -0.42 + 0.04 * (q[0] * 9.0).sin() {
        return app.hair;
    }
    for side in [-1.0, 1.0] {
        let c = [side * EYE_DX * fw, EYE_Y];
        let ry = 0.015 + 0.065 * e.eye_open;
        if in_ellipse(q, c, [0.11, ry]) {
            if in_ellipse(q, c, [0.045, 0.045]) {
                return app.iris;
            }
            return [0.96, 0.96, 0.94];
        }
        // brow
        if in_ellipse(q, [c[0], EYE_Y - 0.13 - 0.03 * e.eye_open], [0.12, 0.022]) {
            return app.hair;
        }
    }
    if in_ellipse(q, NOSE, [0.05, 0.09]) {
        return app.skin.map(|v| v * 0.8);
    }
    let w = MOUTH_HALF_WIDTH * fw;
    let u = q[0] / w;
    if u.abs() < 1.0 {
        let bow = 1.0 - u * u;
        let mid = MOUTH_Y + 0.09 * e.mouth_curve * bow;
        let half = 0.012 + 0.06 * e.mouth_open * bow.sqrt();
        if (q[1] - mid).abs() <= half {
            return app.mouth;
        }
    }
    app.skin
}

/// One anti-aliased RGB frame.
pub fn render_frame(app: &Appearance, pose: &Pose, e: &Expression, size: usize) -> Result<Image> {
    if size < MIN_SIZE {
        return Err(AppError::data(format!("frame size {size} is below the minimum of {MIN_SIZE}")));
    }
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let step = 2.0 / (size - 1) as f64;
    let n = SUPERSAMPLE;
    let weight = 1.0 / (n * n) as f32;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f32; 3];
            for sy in 0..n {
                for sx in 0..n {
                    let off = |s: usize| ((s as f64 + 0.5) / n as f64 - 0.5) * step;
                    let p = [-1.0 + x as f64 * step + off(sx), -1.0 + y as f64 * step + off(sy)];
                    let c = shade(app, e, to_face(pose, p));
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                data[k * plane + y * size + x] = acc[k] * weight;
            }
        }
    }
    Image::new(size, size, 3, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Image>,
    pub landmarks: Vec<[[f64; 2]; NUM_LANDMARKS]>,
}

pub fn render_sequence(scene: &Scene, num_frames: usize, size: usize) -> Result<Sequence> {
    if size < MIN_SIZE {
        return Err(AppError::data(format!("frame size {size} is below the minimum of {MIN_SIZE}")));
    }
    let mut frames = Vec::with_capacity(num_frames);
    let mut marks = Vec::with_capacity(num_frames);
    for (pose, e) in scene.frames(num_frames) {
        frames.push(render_frame(&scene.appearance, &pose, &e, size)?);
        marks.push(landmarks(&scene.appearance, &pose));
    }
    Ok(Sequence { frames, landmarks: marks })
}

/// Renders `sequences` random scenes to `out/seq_XXX/frame_XXX.ppm`, with
/// landmark tracks beside each sequence and `out/manifest.txt` listing the
/// frames relative to `out`.
pub fn write_dataset(out: &Path, sequences: usize, frames: usize, size: usize, seed: u64) -> Result<Manifest> {
    if size < MIN_SIZE {
        return Err(AppError::data(format!("frame size {size} is below the minimum of {MIN_SIZE}")));
    }
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest::default();
    for s in 0..sequences {
        let scene = Scene::random(&mut rng);
        let seq = render_sequence(&scene, frames, size)?;
        let dir_name = format!("seq_{s:03}");
        let dir = out.join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        let mut paths = Vec::with_capacity(frames);
        let mut marks = String::from("frame,x0,y0,x1,y1,x2,y2,x3,y3,x4,y4\n");
        for (f, (img, lm)) in seq.frames.iter().zip(&seq.landmarks).enumerate() {
            let name = format!("frame_{f:03}.ppm");
            img.save(&dir.join(&name))?;
            paths.push(PathBuf::from(&dir_name).join(name));
            let coords: Vec<String> = lm.iter().flat_map(|p| p.iter().map(|v| v.to_string())).collect();
            marks.push_str(&format!("{f},{}\n", coords.join(",")));
        }
        let lm_path = dir.join("landmarks.csv");
        fs::write(&lm_path, marks).map_err(|e| AppError::io(&lm_path, e))?;
        manifest.sequences.push(paths);
    }
    manifest.save(&out.join(MANIFEST_NAME))?;
    Ok(manifest)
}
