//! Checkpoint and dataset plumbing shared by the subcommands: DYC1
//! files with JSON config echoes, and helpers that turn dataset
//! entries into sampler-ready conditioning.

use anyhow::{bail, Context, Result};
use poselab_core::conditioning::Vocabulary;
use poselab_core::diffusion::{
    ConditioningBundle, NoiseSchedule, PreparedSample, ValItem,
};
use poselab_core::dit::{DiTConfig, DiTModel};
use poselab_core::formats::Checkpoint;
use poselab_core::latentspace::AutoencoderParams;
use poselab_core::synthworld::{
    self, DatasetManifest, LoadedSample, ManifestEntry,
};
use poselab_core::tensor::Tensor;
use poselab_core::{diffusion, synthworld as sw};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Metadata carried in the autoencoder checkpoint's config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeMeta {
    pub c_lat: usize,
    pub kappa: f32,
    pub trained: bool,
    pub final_loss: f32,
    /// The resolved command config that produced this artifact.
    pub run: serde_json::Value,
}

pub struct AeArtifact {
    pub ae: AutoencoderParams,
    pub meta: AeMeta,
}

pub fn save_ae(path: &Path, ae: &AutoencoderParams, meta: &AeMeta) -> Result<()> {
    let echo = serde_json::to_string_pretty(meta)?;
    let ck = Checkpoint::new(ae.params.clone(), echo);
    std::fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn load_ae(path: &Path) -> Result<AeArtifact> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let meta: AeMeta = serde_json::from_str(&ck.config_echo)
        .with_context(|| format!("{} is not an autoencoder checkpoint", path.display()))?;
    Ok(AeArtifact {
        ae: AutoencoderParams {
            params: ck.tensors,
            c_lat: meta.c_lat,
            trained: meta.trained,
        },
        meta,
    })
}

/// Metadata carried in the denoiser checkpoint's config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub dit: DiTConfig,
    pub schedule_steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub run: serde_json::Value,
}

pub struct ModelArtifact {
    pub model: DiTModel,
    pub meta: ModelMeta,
}

impl ModelArtifact {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(diffusion::make_schedule(
            self.meta.schedule_steps,
            self.meta.beta_1,
            self.meta.beta_t,
        )?)
    }
}

pub fn save_model(path: &Path, model: &DiTModel, meta: &ModelMeta) -> Result<()> {
    let echo = serde_json::to_string_pretty(meta)?;
    let ck = Checkpoint::new(model.params.clone(), echo);
    std::fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let meta: ModelMeta = serde_json::from_str(&ck.config_echo)
        .with_context(|| format!("{} is not a denoiser checkpoint", path.display()))?;
    Ok(ModelArtifact {
        model: DiTModel {
            config: meta.dit.clone(),
            params: ck.tensors,
        },
        meta,
    })
}

/// Assert the denoiser and autoencoder agree on latent geometry and
/// that the dataset matches the model's token grid.
pub fn check_compat(
    model: &ModelArtifact,
    ae: &AeArtifact,
    manifest: &DatasetManifest,
) -> Result<()> {
    let cfg = &model.meta.dit;
    if cfg.c_lat != ae.meta.c_lat {
        bail!(
            "checkpoint mismatch: model expects {} latent channels, autoencoder has {}",
            cfg.c_lat,
            ae.meta.c_lat
        );
    }
    let (h, w) = manifest.image_size;
    if cfg.frames != manifest.num_frames || cfg.h_lat * 4 != h || cfg.w_lat * 4 != w {
        bail!(
            "checkpoint mismatch: model grid {}x{}x{} vs dataset {}x{}x{}",
            cfg.frames,
            cfg.h_lat * 4,
            cfg.w_lat * 4,
            manifest.num_frames,
            h,
            w
        );
    }
    Ok(())
}

pub fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: &str,
) -> Result<Vec<LoadedSample>> {
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        out.push(synthworld::load_sample(dir, e)?);
    }
    if out.is_empty() {
        bail!("dataset at {} has no '{split}' samples", dir.display());
    }
    Ok(out)
}

pub fn prepare_split(
    samples: &[LoadedSample],
    ae: &AeArtifact,
    vocab: &Vocabulary,
    l_t: usize,
    masked: bool,
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| Ok(diffusion::prepare_sample(s, &ae.ae, ae.meta.kappa, vocab, l_t, masked)?))
        .collect()
}

/// Oracle render of this entry's appearance driven by another pose
/// track; the "shuffled" side of the pose-discrimination probe.
pub fn render_with_poses(
    entry: &ManifestEntry,
    poses: &[sw::SkeletonPose],
    size: (usize, usize),
) -> Result<Tensor<f32>> {
    let (h, w) = size;
    let mut out = Tensor::zeros(vec![poses.len(), 3, h, w]);
    for (i, p) in poses.iter().enumerate() {
        let frame = synthworld::render_frame(p, &entry.appearance, size)?;
        out.data_mut()[i * 3 * h * w..(i + 1) * 3 * h * w].copy_from_slice(frame.data());
    }
    Ok(out)
}

/// Build validation items from held-out samples: conditioning plus
/// matched and shuffled oracle renders. Shuffled poses come from the
/// next item in the list (wrapping), which always differs because
/// every sample has its own motion seed.
pub fn build_val_items(
    samples: &[LoadedSample],
    prepared: &[PreparedSample],
    size: (usize, usize),
    count: usize,
    no_pose: bool,
) -> Result<Vec<ValItem>> {
    let n = count.min(samples.len());
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let other = &samples[(i + 1) % samples.len()];
        let mut cond = ConditioningBundle::from_prepared(&prepared[i]);
        if no_pose {
            cond = cond.without_pose();
        }
        items.push(ValItem {
            cond,
            gt_matched: samples[i].frames.clone(),
            gt_shuffled: render_with_poses(&samples[i].entry, &other.poses, size)?,
        });
    }
    Ok(items)
}
