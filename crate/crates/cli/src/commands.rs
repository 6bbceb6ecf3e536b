//! Resolved per-command configurations and their implementations.
//! Every command writes a `config.json` echo into its output
//! directory; rerunning with `--config <that file>` reproduces the
//! artifacts bit-identically.

use crate::artifacts::{self, AeArtifact, AeMeta, ModelArtifact, ModelMeta};
use anyhow::{bail, Context, Result};
use poselab_core::conditioning::{self, InjectionMode, Vocabulary};
use poselab_core::diffusion::{self, ConditioningBundle, SamplerConfig, TrainConfig};
use poselab_core::dit::{self, DiTConfig};
use poselab_core::evalkit::{self, MapKind};
use poselab_core::formats;
use poselab_core::latentspace;
use poselab_core::synthworld::{self, BackgroundColor, DatasetConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn require(path: &str, flag: &str) -> Result<PathBuf> {
    if path.is_empty() {
        bail!("missing required --{flag}");
    }
    Ok(PathBuf::from(path))
}

fn write_echo<C: Serialize>(out: &Path, cfg: &C) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

// ---- gen-data ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataCfg {
    pub out: String,
    pub count: usize,
    pub frames: usize,
    pub size: usize,
    pub split: f64,
    pub thickness: u32,
    pub seed: u64,
}

impl Default for GenDataCfg {
    fn default() -> Self {
        GenDataCfg {
            out: String::new(),
            count: 500,
            frames: 8,
            size: 32,
            split: 0.2,
            thickness: 1,
            seed: 0,
        }
    }
}

pub fn cmd_gen_data(cfg: &GenDataCfg) -> Result<()> {
    let out = require(&cfg.out, "out")?;
    let ds = DatasetConfig {
        count: cfg.count,
        num_frames: cfg.frames,
        image_size: (cfg.size, cfg.size),
        split: cfg.split,
        limb_thickness: cfg.thickness,
    };
    let manifest = synthworld::build_dataset(&ds, cfg.seed, &out)?;
    write_echo(&out, cfg)?;
    let train = manifest.train_entries().count();
    let test = manifest.test_entries().count();
    let held = manifest
        .test_entries()
        .filter(|e| {
            (e.appearance.body_color, e.appearance.background_color) == synthworld::HELD_OUT_COMBO
        })
        .count();
    println!(
        "gen-data: wrote {} samples ({train} train / {test} test, {held} held-out combo) to {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

// ---- train-ae ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainAeCfg {
    pub data: String,
    pub out: String,
    pub steps: usize,
    pub batch: usize,
    pub c_lat: usize,
    pub seed: u64,
}

impl Default for TrainAeCfg {
    fn default() -> Self {
        TrainAeCfg {
            data: String::new(),
            out: String::new(),
            steps: 2000,
            batch: 16,
            c_lat: 4,
            seed: 0,
        }
    }
}

pub fn cmd_train_ae(cfg: &TrainAeCfg) -> Result<()> {
    let data = require(&cfg.data, "data")?;
    let out = require(&cfg.out, "out")?;
    let manifest = synthworld::load_manifest(&data)?;
    let samples = artifacts::load_split(&data, &manifest, "train")?;
    let (h, w) = manifest.image_size;
    let mut frames = Vec::new();
    for s in &samples {
        for f in 0..manifest.num_frames {
            let per = 3 * h * w;
            frames.push(
                poselab_core::tensor::Tensor::new(
                    vec![3, h, w],
                    s.frames.data()[f * per..(f + 1) * per].to_vec(),
                )
                .unwrap(),
            );
        }
    }
    let (ae, log) = if cfg.c_lat == 4 {
        latentspace::train_autoencoder(&frames, cfg.steps, cfg.batch, cfg.seed)?
    } else {
        bail!("autoencoder is fixed at 4 latent channels");
    };
    // calibrate the output scale on training videos
    let videos: Vec<_> = samples.iter().map(|s| s.frames.clone()).collect();
    let calib = latentspace::calibrate_kappa(&ae, &videos, 64.max(manifest.num_frames))?;
    let meta = AeMeta {
        c_lat: ae.c_lat,
        kappa: calib.kappa,
        trained: ae.trained,
        final_loss: log.final_loss,
        run: serde_json::to_value(cfg)?,
    };
    write_echo(&out, cfg)?;
    artifacts::save_ae(&out.join("autoencoder.dyc1"), &ae, &meta)?;
    let mut txt = String::new();
    for (i, m) in log.window_means.iter().enumerate() {
        writeln!(txt, "window {} loss {m:.6}", (i + 1) * 100).unwrap();
    }
    writeln!(txt, "final {:.6} kappa {:.6}", log.final_loss, calib.kappa).unwrap();
    std::fs::write(out.join("train_log.txt"), txt)?;
    println!(
        "train-ae: {} steps, final loss {:.6}, kappa {:.6} -> {}",
        cfg.steps,
        log.final_loss,
        calib.kappa,
        out.join("autoencoder.dyc1").display()
    );
    Ok(())
}

// ---- train ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCmdCfg {
    pub data: String,
    pub ae: String,
    pub out: String,
    pub mode: InjectionMode,
    pub joint_text: bool,
    pub masked: bool,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub text_dropout: f32,
    pub seed: u64,
    pub log_every: usize,
    pub val_every: usize,
    pub val_items: usize,
    pub schedule_steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_t: usize,
    pub l_t: usize,
    pub gated: bool,
}

impl Default for TrainCmdCfg {
    fn default() -> Self {
        let scale = 1000.0 / diffusion::DEFAULT_STEPS as f64;
        TrainCmdCfg {
            data: String::new(),
            ae: String::new(),
            out: String::new(),
            mode: InjectionMode::PadaLn,
            joint_text: true,
            masked: false,
            steps: 5000,
            batch: 4,
            lr: diffusion::DEFAULT_LR,
            weight_decay: 0.0,
            text_dropout: diffusion::DEFAULT_TEXT_DROPOUT,
            seed: 0,
            log_every: 100,
            val_every: 0,
            val_items: 4,
            schedule_steps: diffusion::DEFAULT_STEPS,
            beta_1: 1e-4 * scale,
            beta_t: 0.02 * scale,
            d: 128,
            blocks: 6,
            heads: 4,
            d_t: 64,
            l_t: 16,
            gated: false,
        }
    }
}

impl TrainCmdCfg {
    pub fn dit_config(
        &self,
        ae: &AeArtifact,
        manifest: &synthworld::DatasetManifest,
        vocab: &Vocabulary,
    ) -> Result<DiTConfig> {
        let (h, w) = manifest.image_size;
        if h % 4 != 0 || w % 4 != 0 {
            bail!("image size {h}x{w} is not divisible by the encoder stride");
        }
        let cfg = DiTConfig {
            d: self.d,
            blocks: self.blocks,
            heads: self.heads,
            patch: 2,
            frames: manifest.num_frames,
            c_lat: ae.meta.c_lat,
            h_lat: h / 4,
            w_lat: w / 4,
            l_t: self.l_t,
            d_t: self.d_t,
            vocab_size: vocab.len(),
            mode: self.mode,
            capture_block: self.blocks / 2,
            gated_injection: self.gated,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            text_dropout: self.text_dropout,
            mode: self.mode,
            joint_text: self.joint_text,
            masked: self.masked,
            seed: self.seed,
            log_every: self.log_every,
            val_every: self.val_every,
            val_items: self.val_items,
        }
    }
}

pub fn cmd_train(cfg: &TrainCmdCfg) -> Result<ModelArtifact> {
    let data = require(&cfg.data, "data")?;
    let ae_path = require(&cfg.ae, "ae")?;
    let out = require(&cfg.out, "out")?;
    let ae = artifacts::load_ae(&ae_path)?;
    let manifest = synthworld::load_manifest(&data)?;
    let vocab = Vocabulary::world();
    let dit_cfg = cfg.dit_config(&ae, &manifest, &vocab)?;
    let train_samples = artifacts::load_split(&data, &manifest, "train")?;
    let prepared = artifacts::prepare_split(&train_samples, &ae, &vocab, cfg.l_t, cfg.masked)?;
    let schedule = diffusion::make_schedule(cfg.schedule_steps, cfg.beta_1, cfg.beta_t)?;
    let val_storage;
    let val_ctx = if cfg.val_every > 0 {
        let test_samples = artifacts::load_split(&data, &manifest, "test")?;
        let test_prepared =
            artifacts::prepare_split(&test_samples, &ae, &vocab, cfg.l_t, cfg.masked)?;
        let items = artifacts::build_val_items(
            &test_samples,
            &test_prepared,
            manifest.image_size,
            cfg.val_items,
            false,
        )?;
        val_storage = diffusion::ValContext {
            ae: &ae.ae,
            kappa: ae.meta.kappa,
            items,
        };
        Some(&val_storage)
    } else {
        None
    };
    let tc = cfg.train_config();
    let (model, log) = diffusion::train(&tc, &dit_cfg, &prepared, val_ctx, &schedule)?;
    let meta = ModelMeta {
        dit: dit_cfg,
        schedule_steps: cfg.schedule_steps,
        beta_1: cfg.beta_1,
        beta_t: cfg.beta_t,
        run: serde_json::to_value(cfg)?,
    };
    write_echo(&out, cfg)?;
    artifacts::save_model(&out.join("model.dyc1"), &model, &meta)?;
    let mut txt = String::new();
    for r in &log.losses {
        writeln!(txt, "step {} loss {:.6}", r.step, r.loss).unwrap();
    }
    for v in &log.validations {
        writeln!(txt, "val {} win_rate {:.3}", v.step, v.win_rate).unwrap();
    }
    std::fs::write(out.join("train_log.txt"), txt)?;
    let counts = dit::count_parameters(&model);
    println!(
        "train: mode={} joint_text={} masked={} steps={} final_loss={:.6} params={} -> {}",
        cfg.mode.name(),
        cfg.joint_text,
        cfg.masked,
        cfg.steps,
        log.final_loss,
        counts.total,
        out.join("model.dyc1").display()
    );
    Ok(ModelArtifact { model, meta })
}

// ---- sample ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleCfg {
    pub model: String,
    pub ae: String,
    pub data: String,
    pub out: String,
    pub item: usize,
    pub seed: u64,
    pub guidance: f32,
    pub no_pose: bool,
    pub masked: bool,
    /// Optional background-color word substituted into the prompt.
    pub background: Option<String>,
}

impl Default for SampleCfg {
    fn default() -> Self {
        SampleCfg {
            model: String::new(),
            ae: String::new(),
            data: String::new(),
            out: String::new(),
            item: 0,
            seed: 0,
            guidance: 1.0,
            no_pose: false,
            masked: false,
            background: None,
        }
    }
}

fn prompt_with_background(entry: &synthworld::ManifestEntry, word: &str) -> Result<String> {
    if BackgroundColor::from_word(word).is_none() {
        bail!("unknown background color '{word}'");
    }
    let mut app = entry.appearance.clone();
    app.background_color = BackgroundColor::from_word(word).unwrap();
    Ok(synthworld::compose_prompt(&app))
}

struct ItemContext {
    cond: ConditioningBundle,
    sample: synthworld::LoadedSample,
}

fn load_item(
    cfg_model: &ModelArtifact,
    ae: &AeArtifact,
    data: &Path,
    item: usize,
    no_pose: bool,
    masked: bool,
    background: Option<&str>,
) -> Result<ItemContext> {
    let manifest = synthworld::load_manifest(data)?;
    artifacts::check_compat(cfg_model, ae, &manifest)?;
    let entries: Vec<_> = manifest.test_entries().cloned().collect();
    if item >= entries.len() {
        bail!("item {item} out of range ({} test samples)", entries.len());
    }
    let sample = synthworld::load_sample(data, &entries[item])?;
    let vocab = Vocabulary::world();
    let l_t = cfg_model.meta.dit.l_t;
    let mut prepared =
        diffusion::prepare_sample(&sample, &ae.ae, ae.meta.kappa, &vocab, l_t, masked)?;
    if let Some(word) = background {
        let prompt = prompt_with_background(&sample.entry, word)?;
        prepared.text_ids = conditioning::tokenize(&prompt, &vocab, l_t)?;
    }
    let mut cond = ConditioningBundle::from_prepared(&prepared);
    if no_pose {
        cond = cond.without_pose();
    }
    Ok(ItemContext { cond, sample })
}

pub fn cmd_sample(cfg: &SampleCfg) -> Result<()> {
    let out = require(&cfg.out, "out")?;
    let model = artifacts::load_model(&require(&cfg.model, "model")?)?;
    let ae = artifacts::load_ae(&require(&cfg.ae, "ae")?)?;
    let data = require(&cfg.data, "data")?;
    let ctx = load_item(
        &model,
        &ae,
        &data,
        cfg.item,
        cfg.no_pose,
        cfg.masked,
        cfg.background.as_deref(),
    )?;
    let schedule = model.schedule()?;
    let sc = SamplerConfig {
        guidance_scale: cfg.guidance,
        seed: cfg.seed,
        capture: false,
    };
    let outv = diffusion::sample(&model.model, &ae.ae, ae.meta.kappa, &ctx.cond, &schedule, &sc)?;
    write_echo(&out, cfg)?;
    formats::write_ten1(&out.join("video.ten1"), &outv.video)?;
    formats::write_ppm_strip(&out.join("video.ppm"), &outv.video)?;
    formats::write_ppm_strip(&out.join("reference.ppm"), &ctx.sample.frames)?;
    let m = evalkit::frame_metrics(&outv.video, &ctx.sample.frames)?;
    println!(
        "sample: item {} psnr {:.2} ssim {:.4} -> {}",
        cfg.item,
        m.psnr_db,
        m.ssim,
        out.join("video.ppm").display()
    );
    Ok(())
}

// ---- eval ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCfg {
    pub model: String,
    pub ae: String,
    pub data: String,
    pub out: String,
    pub items: usize,
    pub seed: u64,
    pub guidance: f32,
    pub no_pose: bool,
    pub masked: bool,
    /// When set, run the background-control probe with this color
    /// word substituted into every prompt.
    pub probe_background: Option<String>,
    /// Probe control arm: keep the original prompts but still score
    /// the probe against `probe_background`.
    #[serde(default)]
    pub probe_hold_prompt: bool,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            model: String::new(),
            ae: String::new(),
            data: String::new(),
            out: String::new(),
            items: 50,
            seed: 0,
            guidance: 1.0,
            no_pose: false,
            masked: false,
            probe_background: None,
            probe_hold_prompt: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub items: usize,
    pub wins: usize,
    pub win_rate: f32,
    pub mean_psnr: f32,
    pub mean_ssim: f32,
    pub mean_l1: f32,
    pub probe_controlled: Option<usize>,
    pub probe_rate: Option<f32>,
}

pub fn cmd_eval(cfg: &EvalCfg) -> Result<EvalSummary> {
    let out = require(&cfg.out, "out")?;
    let model = artifacts::load_model(&require(&cfg.model, "model")?)?;
    let ae = artifacts::load_ae(&require(&cfg.ae, "ae")?)?;
    let data = require(&cfg.data, "data")?;
    let manifest = synthworld::load_manifest(&data)?;
    artifacts::check_compat(&model, &ae, &manifest)?;
    let schedule = model.schedule()?;
    let test_entries = manifest.test_entries().count();
    // the probe is only informative on items whose true background
    // differs from the prompted one
    let indices: Vec<usize> = match cfg.probe_background.as_deref() {
        Some(word) => {
            let target = BackgroundColor::from_word(word)
                .with_context(|| format!("unknown background color '{word}'"))?;
            manifest
                .test_entries()
                .enumerate()
                .filter(|(_, e)| e.appearance.background_color != target)
                .map(|(i, _)| i)
                .collect()
        }
        None => (0..test_entries).collect(),
    };
    let n = cfg.items.min(indices.len());
    if n == 0 {
        bail!("no test items to evaluate");
    }
    let mut table = String::from(
        "item l1 psnr psnr_star ssim psnr_matched psnr_shuffled win probe\n",
    );
    let mut wins = 0usize;
    let mut probe_hits = 0usize;
    let (mut sum_psnr, mut sum_ssim, mut sum_l1) = (0.0f64, 0.0, 0.0);
    for (k, &i) in indices[..n].iter().enumerate() {
        let ctx = load_item(
            &model,
            &ae,
            &data,
            i,
            cfg.no_pose,
            cfg.masked,
            if cfg.probe_hold_prompt {
                None
            } else {
                cfg.probe_background.as_deref()
            },
        )?;
        let sc = SamplerConfig {
            guidance_scale: cfg.guidance,
            seed: cfg.seed.wrapping_add(k as u64),
            capture: false,
        };
        let gen =
            diffusion::sample(&model.model, &ae.ae, ae.meta.kappa, &ctx.cond, &schedule, &sc)?;
        let m = evalkit::frame_metrics(&gen.video, &ctx.sample.frames)?;
        // shuffled poses: the next test item's motion track
        let other_entry = manifest.test_entries().nth((i + 1) % test_entries).unwrap();
        let other = synthworld::load_sample(&data, other_entry)?;
        let shuffled = artifacts::render_with_poses(
            &ctx.sample.entry,
            &other.poses,
            manifest.image_size,
        )?;
        let (pm, ps, win) =
            evalkit::pose_discrimination(&gen.video, &ctx.sample.frames, &shuffled)?;
        if win {
            wins += 1;
        }
        let probe = if let Some(word) = cfg.probe_background.as_deref() {
            let target = BackgroundColor::from_word(word)
                .with_context(|| format!("unknown background color '{word}'"))?;
            let (_, _, controlled) = evalkit::background_probe(
                &gen.video,
                &ctx.sample.mask,
                target.rgb(),
                ctx.sample.entry.appearance.background_color.rgb(),
            )?;
            if controlled {
                probe_hits += 1;
            }
            if controlled { "yes" } else { "no" }
        } else {
            "-"
        };
        sum_psnr += m.psnr_db as f64;
        sum_ssim += m.ssim as f64;
        sum_l1 += m.l1 as f64;
        writeln!(
            table,
            "{i} {:.4} {:.2} {:.2} {:.4} {:.2} {:.2} {} {probe}",
            m.l1,
            m.psnr_db,
            m.psnr_star_db,
            m.ssim,
            pm,
            ps,
            if win { "yes" } else { "no" }
        )
        .unwrap();
    }
    let summary = EvalSummary {
        items: n,
        wins,
        win_rate: wins as f32 / n as f32,
        mean_psnr: (sum_psnr / n as f64) as f32,
        mean_ssim: (sum_ssim / n as f64) as f32,
        mean_l1: (sum_l1 / n as f64) as f32,
        probe_controlled: cfg.probe_background.as_ref().map(|_| probe_hits),
        probe_rate: cfg
            .probe_background
            .as_ref()
            .map(|_| probe_hits as f32 / n as f32),
    };
    write_echo(&out, cfg)?;
    std::fs::write(out.join("eval.txt"), table)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "eval: {n} items, win_rate {:.3}, mean psnr {:.2}, mean ssim {:.4}{}",
        summary.win_rate,
        summary.mean_psnr,
        summary.mean_ssim,
        match summary.probe_rate {
            Some(r) => format!(", probe rate {r:.3}"),
            None => String::new(),
        }
    );
    Ok(summary)
}

// ---- attn-viz ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnVizCfg {
    pub model: String,
    pub ae: String,
    pub data: String,
    pub out: String,
    pub item: usize,
    pub seed: u64,
    /// Query frame and within-frame token used to slice the temporal
    /// view; defaults pick the middle of both ranges.
    pub frame: Option<usize>,
    pub spatial_index: Option<usize>,
}

impl Default for AttnVizCfg {
    fn default() -> Self {
        AttnVizCfg {
            model: String::new(),
            ae: String::new(),
            data: String::new(),
            out: String::new(),
            item: 0,
            seed: 0,
            frame: None,
            spatial_index: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnVizSummary {
    pub spatial_diagonality: f32,
    pub temporal_diagonality: f32,
}

pub fn cmd_attn_viz(cfg: &AttnVizCfg) -> Result<AttnVizSummary> {
    let out = require(&cfg.out, "out")?;
    let model = artifacts::load_model(&require(&cfg.model, "model")?)?;
    let ae = artifacts::load_ae(&require(&cfg.ae, "ae")?)?;
    let data = require(&cfg.data, "data")?;
    let ctx = load_item(&model, &ae, &data, cfg.item, false, false, None)?;
    let schedule = model.schedule()?;
    let sc = SamplerConfig {
        guidance_scale: 1.0,
        seed: cfg.seed,
        capture: true,
    };
    let gen = diffusion::sample(&model.model, &ae.ae, ae.meta.kappa, &ctx.cond, &schedule, &sc)?;
    let cap = gen
        .capture
        .context("sampler produced no attention capture")?;
    let dcfg = &model.meta.dit;
    let frame = cfg.frame.unwrap_or(dcfg.frames / 2);
    let spatial_index = cfg.spatial_index.unwrap_or(dcfg.l_f() / 2);
    let views = dit::capture_attention(&cap, dcfg, frame, spatial_index)?;
    // band width 0 for within-frame tokens, 1 for adjacent frames
    let spatial = evalkit::diagonality_report(&views.spatial, MapKind::Spatial, 0)?;
    let temporal = evalkit::diagonality_report(&views.temporal, MapKind::Temporal, 1)?;
    write_echo(&out, cfg)?;
    formats::write_ppm_heatmap(&out.join("spatial.ppm"), &views.spatial)?;
    formats::write_ppm_heatmap(&out.join("temporal.ppm"), &views.temporal)?;
    formats::write_ppm_heatmap(&out.join("spatial_binary.ppm"), &spatial.binarized)?;
    formats::write_ppm_heatmap(&out.join("temporal_binary.ppm"), &temporal.binarized)?;
    let report = format!(
        "block {} frame {frame} spatial_index {spatial_index}\n\
         spatial band 0 diagonality {:.4}\n\
         temporal band 1 diagonality {:.4}\n",
        cap.block, spatial.score, temporal.score
    );
    std::fs::write(out.join("report.txt"), report)?;
    println!(
        "attn-viz: spatial diagonality {:.4}, temporal diagonality {:.4} -> {}",
        spatial.score,
        temporal.score,
        out.display()
    );
    Ok(AttnVizSummary {
        spatial_diagonality: spatial.score,
        temporal_diagonality: temporal.score,
    })
}

// ---- ablate ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateCfg {
    pub data: String,
    pub ae: String,
    pub out: String,
    pub steps: usize,
    pub batch: usize,
    pub items: usize,
    pub seed: u64,
    /// Base training config overrides applied to every arm.
    pub train: TrainCmdCfg,
}

impl Default for AblateCfg {
    fn default() -> Self {
        AblateCfg {
            data: String::new(),
            ae: String::new(),
            out: String::new(),
            steps: 3000,
            batch: 4,
            items: 20,
            seed: 0,
            train: TrainCmdCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub mode: String,
    pub joint_text: bool,
    pub win_rate: f32,
    pub wins: usize,
    pub items: usize,
    pub total_params: usize,
    pub injection_overhead: usize,
    pub overhead_ratio: f64,
    pub final_loss: f32,
}

pub fn cmd_ablate(cfg: &AblateCfg) -> Result<Vec<AblateRow>> {
    let out = require(&cfg.out, "out")?;
    require(&cfg.data, "data")?;
    require(&cfg.ae, "ae")?;
    std::fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    for mode in InjectionMode::ALL {
        for joint_text in [true, false] {
            let arm = format!("{}_{}", mode.name(), if joint_text { "joint" } else { "nontext" });
            let arm_dir = out.join(&arm);
            let mut tc = cfg.train.clone();
            tc.data = cfg.data.clone();
            tc.ae = cfg.ae.clone();
            tc.out = arm_dir.to_string_lossy().into_owned();
            tc.mode = mode;
            tc.joint_text = joint_text;
            tc.steps = cfg.steps;
            tc.batch = cfg.batch;
            tc.seed = cfg.seed;
            let artifact = cmd_train(&tc)?;
            let counts = dit::count_parameters(&artifact.model);
            let ec = EvalCfg {
                model: arm_dir.join("model.dyc1").to_string_lossy().into_owned(),
                ae: cfg.ae.clone(),
                data: cfg.data.clone(),
                out: arm_dir.join("eval").to_string_lossy().into_owned(),
                items: cfg.items,
                seed: cfg.seed,
                ..EvalCfg::default()
            };
            let summary = cmd_eval(&ec)?;
            rows.push(AblateRow {
                mode: mode.name().to_string(),
                joint_text,
                win_rate: summary.win_rate,
                wins: summary.wins,
                items: summary.items,
                total_params: counts.total,
                injection_overhead: counts.injection_overhead,
                overhead_ratio: counts.overhead_ratio,
                final_loss: {
                    let log = std::fs::read_to_string(arm_dir.join("train_log.txt"))?;
                    log.lines()
                        .filter_map(|l| l.strip_prefix("step "))
                        .filter_map(|l| l.split(" loss ").nth(1))
                        .last()
                        .and_then(|v| v.parse().ok())
                        .unwrap_or(f32::NAN)
                },
            });
        }
    }
    let mut table = String::from(
        "mode joint_text win_rate total_params injection_overhead overhead_ratio final_loss\n",
    );
    for r in &rows {
        writeln!(
            table,
            "{} {} {:.3} ({}/{}) {} {} {:.4} {:.4}",
            r.mode,
            r.joint_text,
            r.win_rate,
            r.wins,
            r.items,
            r.total_params,
            r.injection_overhead,
            r.overhead_ratio,
            r.final_loss
        )
        .unwrap();
    }
    write_echo(&out, cfg)?;
    std::fs::write(out.join("ablate.txt"), &table)?;
    std::fs::write(out.join("ablate.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(rows)
}
