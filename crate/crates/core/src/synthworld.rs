//! Deterministic synthetic figure world: paired (appearance, pose)
//! samples with bit-exact rasterization, template prompts, and
//! analytic background masks. The renderer doubles as the evaluation
//! oracle, so there is no antialiasing anywhere.

use crate::error::{Error, Result};
use crate::formats;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadShape {
    Circle,
    Square,
    Triangle,
}

impl HeadShape {
    pub const ALL: [HeadShape; 3] = [HeadShape::Circle, HeadShape::Square, HeadShape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            HeadShape::Circle => "circle",
            HeadShape::Square => "square",
            HeadShape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl BodyColor {
    pub const ALL: [BodyColor; 4] = [
        BodyColor::Red,
        BodyColor::Green,
        BodyColor::Blue,
        BodyColor::Yellow,
    ];
    pub fn word(self) -> &'static str {
        match self {
            BodyColor::Red => "red",
            BodyColor::Green => "green",
            BodyColor::Blue => "blue",
            BodyColor::Yellow => "yellow",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            BodyColor::Red => [1.0, 0.0, 0.0],
            BodyColor::Green => [0.0, 1.0, 0.0],
            BodyColor::Blue => [0.0, 0.0, 1.0],
            BodyColor::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundColor {
    White,
    Gray,
    Cyan,
    Magenta,
}

impl BackgroundColor {
    pub const ALL: [BackgroundColor; 4] = [
        BackgroundColor::White,
        BackgroundColor::Gray,
        BackgroundColor::Cyan,
        BackgroundColor::Magenta,
    ];
    pub fn word(self) -> &'static str {
        match self {
            BackgroundColor::White => "white",
            BackgroundColor::Gray => "gray",
            BackgroundColor::Cyan => "cyan",
            BackgroundColor::Magenta => "magenta",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            BackgroundColor::White => [1.0, 1.0, 1.0],
            BackgroundColor::Gray => [0.5, 0.5, 0.5],
            BackgroundColor::Cyan => [0.0, 1.0, 1.0],
            BackgroundColor::Magenta => [1.0, 0.0, 1.0],
        }
    }
    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.word() == w)
    }
}

/// Everything that determines rendering apart from the pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppearanceSpec {
    pub head_shape: HeadShape,
    pub body_color: BodyColor,
    pub background_color: BackgroundColor,
    pub limb_thickness: u32,
}

pub const NUM_JOINTS: usize = 8;
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head",
    "neck",
    "chest",
    "pelvis",
    "left_hand",
    "right_hand",
    "left_foot",
    "right_foot",
];

/// Bones as (joint index, joint index) pairs.
pub const BONES: [(usize, usize); 7] = [
    (0, 1), // head-neck
    (1, 2), // neck-chest
    (2, 3), // chest-pelvis
    (1, 4), // neck-left_hand
    (1, 5), // neck-right_hand
    (3, 6), // pelvis-left_foot
    (3, 7), // pelvis-right_foot
];

/// Canonical bone lengths in normalized coordinates, indexed like BONES.
pub const CANONICAL_BONE_LENGTHS: [f64; 7] = [0.10, 0.08, 0.14, 0.16, 0.16, 0.20, 0.20];

/// Fixed per-bone colors for pose renderings, indexed like BONES.
pub const BONE_COLORS: [[f32; 3]; 7] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
];

/// 8 named joints in normalized [0,1]^2 coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPose {
    pub joints: [[f64; 2]; NUM_JOINTS],
}

impl SkeletonPose {
    pub fn in_bounds(&self) -> bool {
        self.joints
            .iter()
            .all(|j| (0.0..=1.0).contains(&j[0]) && (0.0..=1.0).contains(&j[1]))
    }

    pub fn bone_length(&self, bone: usize) -> f64 {
        let (a, b) = BONES[bone];
        let dx = self.joints[a][0] - self.joints[b][0];
        let dy = self.joints[a][1] - self.joints[b][1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Smooth sinusoidal motion in joint-angle space; bone lengths are the
/// canonical ones exactly, so the +-20% constraint holds by
/// construction. Angular amplitudes and frequencies are bounded so no
/// joint moves more than 0.08 between consecutive frames.
pub fn sample_motion(seed: u64, num_frames: usize) -> Vec<SkeletonPose> {
    assert!(num_frames >= 1, "num_frames must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f7469); // motion stream
    // oscillator (amplitude, angular freq, phase) with A*w <= max_step
    let mut osc = |a_max: f64, max_step: f64| {
        let w: f64 = rng.gen_range(0.15..0.9);
        let a: f64 = rng.gen_range(0.0..a_max.min(max_step / w));
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        move |t: f64| a * (w * t + phase).sin()
    };
    let root_x = osc(0.05, 0.018);
    let root_y = osc(0.04, 0.015);
    let torso = osc(0.15, 0.05);
    let arm_l = osc(0.65, 0.22);
    let arm_r = osc(0.65, 0.22);
    let leg_l = osc(0.35, 0.2);
    let leg_r = osc(0.35, 0.2);

    let lens = CANONICAL_BONE_LENGTHS;
    (0..num_frames)
        .map(|frame| {
            let t = frame as f64;
            let pelvis = [0.5 + root_x(t), 0.60 + root_y(t)];
            let th = torso(t);
            let up = |from: [f64; 2], len: f64| [from[0] + len * th.sin(), from[1] - len * th.cos()];
            let chest = up(pelvis, lens[2]);
            let neck = up(chest, lens[1]);
            let head = up(neck, lens[0]);
            let hang = |from: [f64; 2], len: f64, ang: f64| {
                [from[0] + len * ang.sin(), from[1] + len * ang.cos()]
            };
            let left_hand = hang(neck, lens[3], -0.55 + arm_l(t));
            let right_hand = hang(neck, lens[4], 0.55 + arm_r(t));
            let left_foot = hang(pelvis, lens[5], -0.22 + leg_l(t));
            let right_foot = hang(pelvis, lens[6], 0.22 + leg_r(t));
            SkeletonPose {
                joints: [
                    head, neck, chest, pelvis, left_hand, right_hand, left_foot, right_foot,
                ],
            }
        })
        .collect()
}

fn point_segment_dist(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (px - a[0], py - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (px - (a[0] + t * abx), py - (a[1] + t * aby));
    (dx * dx + dy * dy).sqrt()
}

/// Head radius in pixels for a given frame size.
pub fn head_radius(size: (usize, usize)) -> f64 {
    0.10 * size.0.min(size.1) as f64
}

/// Point-in-head test at pixel-center coordinates, shared by the
/// renderer and the per-pixel test oracles.
pub fn head_covers(shape: HeadShape, center: [f64; 2], r: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - center[0], py - center[1]);
    match shape {
        HeadShape::Circle => dx * dx + dy * dy <= r * r,
        HeadShape::Square => dx.abs() <= r && dy.abs() <= r,
        HeadShape::Triangle => {
            // upward-pointing: apex (0,-r), base corners (+-r, +r)
            dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
        }
    }
}

fn validate_render_args(pose: &SkeletonPose, size: (usize, usize)) -> Result<()> {
    if size.0 < 16 || size.1 < 16 {
        return Err(Error::Invalid(format!("frame size {size:?} below 16x16")));
    }
    if !pose.in_bounds() {
        return Err(Error::Invalid("pose coordinate outside [0,1]".into()));
    }
    Ok(())
}

/// True if the figure (limbs or head) covers the pixel center.
pub fn figure_covers(
    pose: &SkeletonPose,
    appearance: &AppearanceSpec,
    size: (usize, usize),
    row: usize,
    col: usize,
) -> bool {
    let (h, w) = size;
    let px = (col as f64 + 0.5) / w as f64;
    let py = (row as f64 + 0.5) / h as f64;
    let pxp = px * w as f64;
    let pyp = py * h as f64;
    let limb_r = 0.5 + appearance.limb_thickness as f64 / 2.0;
    for (a, b) in BONES {
        let ja = [pose.joints[a][0] * w as f64, pose.joints[a][1] * h as f64];
        let jb = [pose.joints[b][0] * w as f64, pose.joints[b][1] * h as f64];
        if point_segment_dist(pxp, pyp, ja, jb) <= limb_r {
            return true;
        }
    }
    let hc = [pose.joints[0][0] * w as f64, pose.joints[0][1] * h as f64];
    head_covers(appearance.head_shape, hc, head_radius(size), pxp, pyp)
}

/// Rasterize one appearance frame (3,H,W) in [0,1]. Integer
/// deterministic: every pixel is either the exact background color or
/// the exact body color.
pub fn render_frame(
    pose: &SkeletonPose,
    appearance: &AppearanceSpec,
    size: (usize, usize),
) -> Result<Tensor<f32>> {
    validate_render_args(pose, size)?;
    let (h, w) = size;
    let bg = appearance.background_color.rgb();
    let body = appearance.body_color.rgb();
    let mut data = vec![0.0f32; 3 * h * w];
    for row in 0..h {
        for col in 0..w {
            let color = if figure_covers(pose, appearance, size, row, col) {
                body
            } else {
                bg
            };
            for c in 0..3 {
                data[c * h * w + row * w + col] = color[c];
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Rasterize the skeleton with fixed per-bone colors on an exact-zero
/// background.
pub fn render_pose_frame(pose: &SkeletonPose, size: (usize, usize)) -> Result<Tensor<f32>> {
    validate_render_args(pose, size)?;
    let (h, w) = size;
    let mut data = vec![0.0f32; 3 * h * w];
    let radius = 1.0f64;
    for row in 0..h {
        for col in 0..w {
            let pxp = col as f64 + 0.5;
            let pyp = row as f64 + 0.5;
            // later bones draw over earlier ones
            for (bone, &(a, b)) in BONES.iter().enumerate() {
                let ja = [pose.joints[a][0] * w as f64, pose.joints[a][1] * h as f64];
                let jb = [pose.joints[b][0] * w as f64, pose.joints[b][1] * h as f64];
                if point_segment_dist(pxp, pyp, ja, jb) <= radius {
                    for c in 0..3 {
                        data[c * h * w + row * w + col] = BONE_COLORS[bone][c];
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Template words plus shape/color names, pad and the null-text
/// sentinel; the whole closed vocabulary of the world.
pub fn vocabulary_words() -> Vec<&'static str> {
    let mut v = vec!["<pad>", "<null>", "a", "figure", "with", "head", "and", "body", "on", "background"];
    for s in HeadShape::ALL {
        v.push(s.word());
    }
    for c in BodyColor::ALL {
        v.push(c.word());
    }
    for c in BackgroundColor::ALL {
        if !v.contains(&c.word()) {
            v.push(c.word());
        }
    }
    v
}

/// "a figure with {head_shape} head and {body_color} body on
/// {background_color} background"
pub fn compose_prompt(appearance: &AppearanceSpec) -> String {
    format!(
        "a figure with {} head and {} body on {} background",
        appearance.head_shape.word(),
        appearance.body_color.word(),
        appearance.background_color.word()
    )
}

/// Background mask over a whole pose sequence: 1 where the pixel is
/// background in every frame, with the union figure footprint dilated
/// by limb_thickness pixels (Chebyshev radius).
pub fn make_mask(
    poses: &[SkeletonPose],
    appearance: &AppearanceSpec,
    size: (usize, usize),
) -> Result<Tensor<f32>> {
    if poses.is_empty() {
        return Err(Error::Invalid("make_mask: empty pose sequence".into()));
    }
    let (h, w) = size;
    let mut figure = vec![false; h * w];
    for pose in poses {
        validate_render_args(pose, size)?;
        for row in 0..h {
            for col in 0..w {
                if !figure[row * w + col] && figure_covers(pose, appearance, size, row, col) {
                    figure[row * w + col] = true;
                }
            }
        }
    }
    let r = appearance.limb_thickness as isize;
    let mut mask = vec![1.0f32; h * w];
    for row in 0..h as isize {
        for col in 0..w as isize {
            'dilate: for di in -r..=r {
                for dj in -r..=r {
                    let (i, j) = (row + di, col + dj);
                    if i >= 0
                        && i < h as isize
                        && j >= 0
                        && j < w as isize
                        && figure[i as usize * w + j as usize]
                    {
                        mask[row as usize * w + col as usize] = 0.0;
                        break 'dilate;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w], mask)
}

/// One generated sample, fully in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub frames: Tensor<f32>,
    pub pose_frames: Tensor<f32>,
    pub prompt: String,
    pub mask: Tensor<f32>,
    pub appearance: AppearanceSpec,
    pub poses: Vec<SkeletonPose>,
}

pub fn generate_sample(
    id: &str,
    seed: u64,
    appearance: AppearanceSpec,
    num_frames: usize,
    size: (usize, usize),
) -> Result<Sample> {
    let poses = sample_motion(seed, num_frames);
    let (h, w) = size;
    let mut frames = Tensor::zeros(vec![num_frames, 3, h, w]);
    let mut pose_frames = Tensor::zeros(vec![num_frames, 3, h, w]);
    for (f, pose) in poses.iter().enumerate() {
        let frame = render_frame(pose, &appearance, size)?;
        let pframe = render_pose_frame(pose, size)?;
        frames.data_mut()[f * 3 * h * w..(f + 1) * 3 * h * w].copy_from_slice(frame.data());
        pose_frames.data_mut()[f * 3 * h * w..(f + 1) * 3 * h * w].copy_from_slice(pframe.data());
    }
    let mask = make_mask(&poses, &appearance, size)?;
    Ok(Sample {
        id: id.to_string(),
        frames,
        pose_frames,
        prompt: compose_prompt(&appearance),
        mask,
        appearance,
        poses,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub frames_path: String,
    pub pose_path: String,
    pub mask_path: String,
    pub joints_path: String,
    pub prompt: String,
    pub appearance: AppearanceSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: (usize, usize),
    pub num_frames: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn train_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == "train")
    }
    pub fn test_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == "test")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub num_frames: usize,
    pub image_size: (usize, usize),
    pub split: f64,
    pub limb_thickness: u32,
}

/// The (body color, background color) pair that never appears in the
/// train split; the probe for text-driven background control.
pub const HELD_OUT_COMBO: (BodyColor, BackgroundColor) =
    (BodyColor::Yellow, BackgroundColor::Magenta);

fn draw_appearance(rng: &mut ChaCha8Rng, limb_thickness: u32, exclude_held_out: bool) -> AppearanceSpec {
    loop {
        let spec = AppearanceSpec {
            head_shape: HeadShape::ALL[rng.gen_range(0..3)],
            body_color: BodyColor::ALL[rng.gen_range(0..4)],
            background_color: BackgroundColor::ALL[rng.gen_range(0..4)],
            limb_thickness,
        };
        if !exclude_held_out
            || (spec.body_color, spec.background_color) != HELD_OUT_COMBO
        {
            return spec;
        }
    }
}

/// Generate and write the dataset directory: manifest.json plus
/// per-sample TEN1 tensors. Deterministic in (config, seed).
pub fn build_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if config.count < 2 {
        return Err(Error::Invalid("build_dataset: count must be >= 2".into()));
    }
    let n_test = ((config.count as f64) * config.split).round() as usize;
    let n_train = config.count - n_test;
    if n_test == 0 || n_train == 0 {
        return Err(Error::Invalid(format!(
            "build_dataset: split {} leaves an empty split for count {}",
            config.split, config.count
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let is_test = i >= n_train;
        let id = format!("sample_{i:04}");
        let appearance = if is_test && i == n_train {
            // guaranteed held-out combination in the test split
            AppearanceSpec {
                head_shape: HeadShape::ALL[rng.gen_range(0..3)],
                body_color: HELD_OUT_COMBO.0,
                background_color: HELD_OUT_COMBO.1,
                limb_thickness: config.limb_thickness,
            }
        } else {
            draw_appearance(&mut rng, config.limb_thickness, !is_test)
        };
        let sample_seed = seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1));
        let sample = generate_sample(
            &id,
            sample_seed,
            appearance,
            config.num_frames,
            config.image_size,
        )?;
        let frames_path = format!("{id}_frames.ten1");
        let pose_path = format!("{id}_pose.ten1");
        let mask_path = format!("{id}_mask.ten1");
        let joints_path = format!("{id}_joints.ten1");
        formats::write_ten1(&out_dir.join(&frames_path), &sample.frames)?;
        formats::write_ten1(&out_dir.join(&pose_path), &sample.pose_frames)?;
        formats::write_ten1(&out_dir.join(&mask_path), &sample.mask)?;
        let joints = Tensor::from_fn(vec![config.num_frames, NUM_JOINTS, 2], |k| {
            let f = k / (NUM_JOINTS * 2);
            let j = (k / 2) % NUM_JOINTS;
            sample.poses[f].joints[j][k % 2] as f32
        });
        formats::write_ten1(&out_dir.join(&joints_path), &joints)?;
        entries.push(ManifestEntry {
            id,
            split: if is_test { "test" } else { "train" }.to_string(),
            frames_path,
            pose_path,
            mask_path,
            joints_path,
            prompt: sample.prompt.clone(),
            appearance,
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        image_size: config.image_size,
        num_frames: config.num_frames,
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let json = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&json)?)
}

/// A sample's tensors loaded back from a dataset directory.
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub frames: Tensor<f32>,
    pub pose_frames: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub poses: Vec<SkeletonPose>,
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<LoadedSample> {
    let frames = formats::read_ten1(&dir.join(&entry.frames_path))?;
    let pose_frames = formats::read_ten1(&dir.join(&entry.pose_path))?;
    let mask = formats::read_ten1(&dir.join(&entry.mask_path))?;
    let joints = formats::read_ten1(&dir.join(&entry.joints_path))?;
    let f = joints.shape()[0];
    let mut poses = Vec::with_capacity(f);
    for fr in 0..f {
        let mut pose = SkeletonPose {
            joints: [[0.0; 2]; NUM_JOINTS],
        };
        for j in 0..NUM_JOINTS {
            pose.joints[j][0] = joints.data()[fr * NUM_JOINTS * 2 + j * 2] as f64;
            pose.joints[j][1] = joints.data()[fr * NUM_JOINTS * 2 + j * 2 + 1] as f64;
        }
        poses.push(pose);
    }
    Ok(LoadedSample {
        entry: entry.clone(),
        frames,
        pose_frames,
        mask,
        poses,
    })
}

/// Relative paths of every file a dataset directory contains, for
/// digest-style comparisons.
pub fn dataset_files(manifest: &DatasetManifest) -> Vec<PathBuf> {
    let mut files = vec![PathBuf::from("manifest.json")];
    for e in &manifest.entries {
        files.push(PathBuf::from(&e.frames_path));
        files.push(PathBuf::from(&e.pose_path));
        files.push(PathBuf::from(&e.mask_path));
        files.push(PathBuf::from(&e.joints_path));
    }
    files
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_appearance() -> AppearanceSpec {
        AppearanceSpec {
            head_shape: HeadShape::Circle,
            body_color: BodyColor::Red,
            background_color: BackgroundColor::White,
            limb_thickness: 2,
        }
    }

    #[test]
    fn motion_single_frame_and_determinism() {
        let one = sample_motion(7, 1);
        assert_eq!(one.len(), 1);
        for bone in 0..BONES.len() {
            let len = one[0].bone_length(bone);
            let canon = CANONICAL_BONE_LENGTHS[bone];
            assert!((len - canon).abs() <= 0.2 * canon, "bone {bone}: {len} vs {canon}");
        }
        let a = sample_motion(7, 8);
        let b = sample_motion(7, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn motion_step_bound_exhaustive_scan() {
        for seed in [7u64, 11, 99, 12345] {
            let poses = sample_motion(seed, 16);
            for f in 1..poses.len() {
                for j in 0..NUM_JOINTS {
                    let dx = poses[f].joints[j][0] - poses[f - 1].joints[j][0];
                    let dy = poses[f].joints[j][1] - poses[f - 1].joints[j][1];
                    let step = (dx * dx + dy * dy).sqrt();
                    assert!(step <= 0.08, "seed {seed} frame {f} joint {j}: step {step}");
                }
            }
            for p in &poses {
                assert!(p.in_bounds());
            }
        }
    }

    #[test]
    fn render_background_and_determinism() {
        let pose = sample_motion(7, 1).remove(0);
        let app = default_appearance();
        let frame = render_frame(&pose, &app, (32, 32)).unwrap();
        // corner pixel is background (figure lives near the center)
        assert_eq!(frame.data()[0], 1.0);
        let again = render_frame(&pose, &app, (32, 32)).unwrap();
        assert_eq!(frame, again);
    }

    #[test]
    fn render_head_center_via_point_oracle() {
        let pose = sample_motion(3, 1).remove(0);
        for shape in HeadShape::ALL {
            let app = AppearanceSpec {
                head_shape: shape,
                ..default_appearance()
            };
            let frame = render_frame(&pose, &app, (32, 32)).unwrap();
            let row = (pose.joints[0][1] * 32.0) as usize;
            let col = (pose.joints[0][0] * 32.0) as usize;
            // independent point-in-shape oracle at the head center pixel
            let covered = head_covers(
                shape,
                [pose.joints[0][0] * 32.0, pose.joints[0][1] * 32.0],
                head_radius((32, 32)),
                col as f64 + 0.5,
                row as f64 + 0.5,
            );
            assert!(covered);
            assert_eq!(frame.data()[row * 32 + col], app.body_color.rgb()[0]);
        }
    }

    #[test]
    fn render_rejects_out_of_bounds_pose() {
        let mut pose = sample_motion(7, 1).remove(0);
        pose.joints[4][0] = 1.5;
        assert!(render_frame(&pose, &default_appearance(), (32, 32)).is_err());
        let pose = sample_motion(7, 1).remove(0);
        assert!(render_frame(&pose, &default_appearance(), (8, 8)).is_err());
    }

    #[test]
    fn pose_frame_black_background_and_bone_colors() {
        let pose = sample_motion(7, 1).remove(0);
        let frame = render_pose_frame(&pose, (32, 32)).unwrap();
        assert_eq!(frame.data()[0], 0.0);
        // point-to-segment oracle: find a pixel covered only by the
        // head-neck bone and check its exact color
        let (h, w) = (32usize, 32usize);
        let mut checked = false;
        'outer: for row in 0..h {
            for col in 0..w {
                let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                let covering: Vec<usize> = BONES
                    .iter()
                    .enumerate()
                    .filter(|(_, &(a, b))| {
                        let ja = [pose.joints[a][0] * 32.0, pose.joints[a][1] * 32.0];
                        let jb = [pose.joints[b][0] * 32.0, pose.joints[b][1] * 32.0];
                        point_segment_dist(px, py, ja, jb) <= 1.0
                    })
                    .map(|(i, _)| i)
                    .collect();
                if covering.len() == 1 {
                    let bone = covering[0];
                    for c in 0..3 {
                        assert_eq!(frame.data()[c * h * w + row * w + col], BONE_COLORS[bone][c]);
                    }
                    checked = true;
                    break 'outer;
                }
            }
        }
        assert!(checked, "no single-bone pixel found");
    }

    #[test]
    fn different_poses_differ() {
        let poses = sample_motion(21, 8);
        let a = render_pose_frame(&poses[0], (32, 32)).unwrap();
        let b = render_pose_frame(&poses[7], (32, 32)).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| x != y)
            .count();
        assert!(diff >= 1, "pose frames identical");
    }

    #[test]
    fn prompt_template_and_vocabulary_closure() {
        let app = default_appearance();
        assert_eq!(
            compose_prompt(&app),
            "a figure with circle head and red body on white background"
        );
        let vocab = vocabulary_words();
        for shape in HeadShape::ALL {
            for body in BodyColor::ALL {
                for bg in BackgroundColor::ALL {
                    let prompt = compose_prompt(&AppearanceSpec {
                        head_shape: shape,
                        body_color: body,
                        background_color: bg,
                        limb_thickness: 2,
                    });
                    for word in prompt.split(' ') {
                        assert!(vocab.contains(&word), "unknown word {word}");
                    }
                }
            }
        }
        // prompts differing only in background differ only in the last token
        let a = compose_prompt(&default_appearance());
        let b = compose_prompt(&AppearanceSpec {
            background_color: BackgroundColor::Cyan,
            ..default_appearance()
        });
        let (ta, tb): (Vec<&str>, Vec<&str>) = (a.split(' ').collect(), b.split(' ').collect());
        assert_eq!(ta.len(), tb.len());
        let diffs: Vec<usize> = (0..ta.len()).filter(|&i| ta[i] != tb[i]).collect();
        assert_eq!(diffs, vec![ta.len() - 2]);
    }

    #[test]
    fn mask_partition_and_brute_force_count() {
        let poses = sample_motion(7, 4);
        let app = default_appearance();
        let mask = make_mask(&poses, &app, (32, 32)).unwrap();
        assert_eq!(mask.data()[0], 1.0); // corner background
        // head-center pixel of frame 0 is figure
        let row = (poses[0].joints[0][1] * 32.0) as usize;
        let col = (poses[0].joints[0][0] * 32.0) as usize;
        assert_eq!(mask.data()[row * 32 + col], 0.0);
        // brute-force union + dilation recount
        let mut union = vec![false; 32 * 32];
        for p in &poses {
            for r in 0..32 {
                for c in 0..32 {
                    union[r * 32 + c] |= figure_covers(p, &app, (32, 32), r, c);
                }
            }
        }
        let t = app.limb_thickness as isize;
        let mut dilated = 0usize;
        for r in 0..32isize {
            for c in 0..32isize {
                let mut hit = false;
                for di in -t..=t {
                    for dj in -t..=t {
                        let (i, j) = (r + di, c + dj);
                        if (0..32).contains(&i) && (0..32).contains(&j) && union[i as usize * 32 + j as usize] {
                            hit = true;
                        }
                    }
                }
                if hit {
                    dilated += 1;
                }
            }
        }
        let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 32 * 32 - dilated);
    }

    #[test]
    fn oracle_closure_rerender_is_bit_exact() {
        let sample = generate_sample("s", 9, default_appearance(), 4, (32, 32)).unwrap();
        for (f, pose) in sample.poses.iter().enumerate() {
            let re = render_frame(pose, &sample.appearance, (32, 32)).unwrap();
            assert_eq!(&sample.frames.data()[f * 3 * 32 * 32..(f + 1) * 3 * 32 * 32], re.data());
        }
    }

    #[test]
    fn build_dataset_split_holdout_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            count: 10,
            num_frames: 2,
            image_size: (32, 32),
            split: 0.2,
            limb_thickness: 2,
        };
        let m = build_dataset(&cfg, 7, dir.path()).unwrap();
        assert_eq!(m.train_entries().count(), 8);
        assert_eq!(m.test_entries().count(), 2);
        // held-out combination present in test, absent in train
        assert!(m
            .test_entries()
            .any(|e| (e.appearance.body_color, e.appearance.background_color) == HELD_OUT_COMBO));
        assert!(m
            .train_entries()
            .all(|e| (e.appearance.body_color, e.appearance.background_color) != HELD_OUT_COMBO));
        let bytes = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        build_dataset(&cfg, 7, dir2.path()).unwrap();
        let bytes2 = std::fs::read(dir2.path().join("manifest.json")).unwrap();
        assert_eq!(bytes, bytes2);
        // reload a sample and check closure against the stored tensors
        let entry = m.entries[0].clone();
        let loaded = load_sample(dir.path(), &entry).unwrap();
        let re = render_frame(&loaded.poses[0], &entry.appearance, (32, 32)).unwrap();
        assert_eq!(&loaded.frames.data()[..3 * 32 * 32], re.data());
        assert!(build_dataset(
            &DatasetConfig { count: 1, ..cfg.clone() },
            7,
            dir.path()
        )
        .is_err());
    }
}
