//! DDPM machinery: noise schedule, forward corruption, epsilon-matching
//! training objective, ancestral reverse sampler with optional
//! classifier-free guidance, and the end-to-end trainer.

use crate::conditioning::{self, InjectionMode, Vocabulary};
use crate::dit::{self, AttentionCapture, DiTConfig, DiTModel, PoseInput};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::latentspace::{self, AutoencoderParams, LatentVideo};
use crate::params::AdamW;
use crate::synthworld::LoadedSample;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Default schedule length; betas are rescaled by 1000/T so total
/// signal decay matches the conventional 1000-step linear schedule.
pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_LR: f32 = 1e-3;
pub const DEFAULT_TEXT_DROPOUT: f32 = 0.1;

/// Divergence guard: abort when the loss exceeds 10x the trailing
/// median for this many consecutive steps.
const DIVERGE_FACTOR: f32 = 10.0;
const DIVERGE_PATIENCE: usize = 500;
const MEDIAN_WINDOW: usize = 100;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f32>,
    pub alpha: Vec<f32>,
    pub alpha_bar: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f32> {
        Ok(self.alpha_bar[self.check_t(t)?])
    }
}

/// Linear beta schedule with derived alpha / alpha-bar / sigma tables.
pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::Invalid(format!(
            "beta range ({beta_1}, {beta_t}) must satisfy 0 < beta_1 <= beta_T < 1"
        )));
    }
    if steps > 1 && beta_1 == beta_t {
        return Err(Error::Invalid("betas must be strictly increasing".into()));
    }
    let mut beta = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut sigma = Vec::with_capacity(steps);
    let mut prod = 1.0f64;
    for i in 0..steps {
        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        let b = beta_1 + (beta_t - beta_1) * frac;
        prod *= 1.0 - b;
        beta.push(b as f32);
        alpha.push((1.0 - b) as f32);
        alpha_bar.push(prod as f32);
        sigma.push(b.sqrt() as f32);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

pub fn default_schedule() -> NoiseSchedule {
    let scale = 1000.0 / DEFAULT_STEPS as f64;
    make_schedule(DEFAULT_STEPS, 1e-4 * scale, 0.02 * scale).unwrap()
}

/// Forward corruption x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps.
pub fn q_sample(
    x0: &Tensor<f32>,
    t: usize,
    epsilon: &Tensor<f32>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    if x0.shape() != epsilon.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} vs signal {:?}",
            epsilon.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)? as f64;
    let (cs, cn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0.zip_map(epsilon, |x, e| cs * x + cn * e).unwrap())
}

/// One ancestral step x_{t-1} = (x_t - ((1-a_t)/sqrt(1-ab_t)) eps_hat)
/// / sqrt(a_t) + sigma_t z. The final step (t=1) takes no noise, so z
/// must be absent there.
pub fn reverse_step(
    x_t: &Tensor<f32>,
    t: usize,
    epsilon_hat: &Tensor<f32>,
    z: Option<&Tensor<f32>>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let idx = schedule.check_t(t)?;
    if x_t.shape() != epsilon_hat.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs state {:?}",
            epsilon_hat.shape(),
            x_t.shape()
        )));
    }
    if t == 1 && z.is_some() {
        return Err(Error::Invalid("no noise is added at the final step".into()));
    }
    let a = schedule.alpha[idx] as f64;
    let ab = schedule.alpha_bar[idx] as f64;
    let coeff = ((1.0 - a) / (1.0 - ab).sqrt()) as f32;
    let inv = (1.0 / a.sqrt()) as f32;
    let mut out = x_t.zip_map(epsilon_hat, |x, e| inv * (x - coeff * e)).unwrap();
    if let Some(z) = z {
        if z.shape() != x_t.shape() {
            return Err(Error::Shape(format!("z {:?} vs state {:?}", z.shape(), x_t.shape())));
        }
        let s = schedule.sigma[idx];
        out = out.zip_map(z, |o, n| o + s * n).unwrap();
    }
    Ok(out)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// 1.0 disables guidance and skips the null-text branch.
    pub guidance_scale: f32,
    pub seed: u64,
    /// Record attention probabilities of the capture block at the
    /// final conditional pass.
    pub capture: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            guidance_scale: 1.0,
            seed: 0,
            capture: false,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub text_dropout: f32,
    pub mode: InjectionMode,
    /// false runs the non-text arm: all prompts become the null
    /// sentinel, and pose input is withheld for the first half of
    /// training then introduced.
    pub joint_text: bool,
    /// Zero the figure region of the image-conditioning latent so
    /// background appearance must come from the prompt.
    pub masked: bool,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables in-training validation.
    pub val_every: usize,
    pub val_items: usize,
}

impl TrainConfig {
    pub fn default_with_mode(mode: InjectionMode) -> Self {
        TrainConfig {
            steps: 5000,
            batch: 4,
            lr: DEFAULT_LR,
            weight_decay: 0.0,
            text_dropout: DEFAULT_TEXT_DROPOUT,
            mode,
            joint_text: true,
            masked: false,
            seed: 0,
            log_every: 100,
            val_every: 0,
            val_items: 2,
        }
    }
}

/// One dataset item with all frozen-encoder work done up front.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// Kappa-scaled video latent (F,C,H',W'); these are the channels
    /// that get noised.
    pub video_latent: Tensor<f32>,
    /// First-frame latent (1,C,H',W'), masked if requested.
    pub image_latent: LatentVideo,
    pub pose_latent: LatentVideo,
    /// Raw skeleton frames (F,3,H,W) for the external pose encoder.
    pub pose_frames: Tensor<f32>,
    pub text_ids: Vec<usize>,
}

pub fn prepare_sample(
    sample: &LoadedSample,
    ae: &AutoencoderParams,
    kappa: f32,
    vocab: &Vocabulary,
    l_t: usize,
    masked: bool,
) -> Result<PreparedSample> {
    let video_latent = latentspace::encode(&sample.frames, ae, kappa)?;
    let s = sample.frames.shape();
    let first = Tensor::new(
        vec![1, 3, s[2], s[3]],
        sample.frames.data()[..3 * s[2] * s[3]].to_vec(),
    )
    .unwrap();
    let mut image_latent = latentspace::encode(&first, ae, kappa)?;
    if masked {
        image_latent = conditioning::apply_image_mask(&image_latent, &sample.mask)?;
    }
    let pose_latent = latentspace::encode_pose_video(&sample.pose_frames, ae, kappa)?;
    let text_ids = conditioning::tokenize(&sample.entry.prompt, vocab, l_t)?;
    Ok(PreparedSample {
        video_latent: video_latent.data,
        image_latent,
        pose_latent,
        pose_frames: sample.pose_frames.clone(),
        text_ids,
    })
}

fn gaussian_like(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) as f32
    })
}

fn zero_latent_like(v: &LatentVideo) -> LatentVideo {
    LatentVideo {
        data: Tensor::zeros(v.data.shape().to_vec()),
        kappa_applied: v.kappa_applied,
    }
}

/// Build the batch loss graph. Pose input is withheld (zeroed) when
/// pose_active is false; prompts fall back to the null sentinel per
/// the dropout probability or unconditionally when joint_text is off.
fn build_loss(
    model: &DiTModel,
    batch: &[PreparedSample],
    schedule: &NoiseSchedule,
    text_dropout: f32,
    joint_text: bool,
    pose_active: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Graph<f32>, crate::params::Binding, crate::graph::NodeId)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let cfg = &model.config;
    let mut g = Graph::new();
    let b = model.params.bind_trainable(&mut g);
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let t = rng.gen_range(1..=schedule.steps());
        let eps = gaussian_like(item.video_latent.shape().to_vec(), rng);
        let drop_text = !joint_text || rng.gen_range(0.0f32..1.0) < text_dropout;
        let ids: Vec<usize> = if drop_text {
            conditioning::null_ids(cfg.l_t)
        } else {
            item.text_ids.clone()
        };
        let x_t = q_sample(&item.video_latent, t, &eps, schedule)?;
        let noise_lv = LatentVideo {
            data: x_t,
            kappa_applied: true,
        };
        let pose_lv = if pose_active {
            item.pose_latent.clone()
        } else {
            zero_latent_like(&item.pose_latent)
        };
        let x_in = latentspace::assemble_vision_latent(
            &noise_lv,
            &item.image_latent,
            &pose_lv,
            cfg.mode,
        )?;
        let x_node = g.input(x_in);
        let pose_node = match cfg.mode {
            InjectionMode::Uvt => None,
            InjectionMode::PadaLn | InjectionMode::CrossAttention => Some(g.input(pose_lv.data)),
            InjectionMode::ExpertAdd => Some(g.input(if pose_active {
                item.pose_frames.clone()
            } else {
                Tensor::zeros(item.pose_frames.shape().to_vec())
            })),
        };
        let (eps_hat, _) = dit::forward_graph(&mut g, &b, cfg, x_node, t, &ids, pose_node, false)?;
        let eps_node = g.input(eps);
        losses.push(g.mse(eps_hat, eps_node));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l);
    }
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {lv}")));
    }
    Ok((g, b, loss))
}

/// Evaluate the training objective on one batch without updating
/// parameters.
pub fn training_loss(
    model: &DiTModel,
    batch: &[PreparedSample],
    schedule: &NoiseSchedule,
    text_dropout: f32,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g, _, loss) = build_loss(model, batch, schedule, text_dropout, true, true, &mut rng)?;
    Ok(g.value(loss).item())
}

/// Everything the sampler needs besides the model: kappa-scaled
/// conditioning latents, raw pose frames, and token ids.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub image_latent: LatentVideo,
    pub pose_latent: LatentVideo,
    pub pose_frames: Tensor<f32>,
    pub text_ids: Vec<usize>,
}

impl ConditioningBundle {
    pub fn from_prepared(p: &PreparedSample) -> Self {
        ConditioningBundle {
            image_latent: p.image_latent.clone(),
            pose_latent: p.pose_latent.clone(),
            pose_frames: p.pose_frames.clone(),
            text_ids: p.text_ids.clone(),
        }
    }

    /// Zero out the pose pathway (the no-pose control arm).
    pub fn without_pose(mut self) -> Self {
        self.pose_latent = zero_latent_like(&self.pose_latent);
        self.pose_frames = Tensor::zeros(self.pose_frames.shape().to_vec());
        self
    }
}

pub struct SampleOutput {
    /// (F,3,H,W) in [0,1].
    pub video: Tensor<f32>,
    pub capture: Option<AttentionCapture>,
}

pub fn sample(
    model: &DiTModel,
    ae: &AutoencoderParams,
    kappa: f32,
    cond: &ConditioningBundle,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<SampleOutput> {
    sample_inner(model, ae, kappa, cond, schedule, sampler, |_, _| {})
}

/// Sampler body with a per-step hook over (t, assembled latent); the
/// hook exists so tests can watch the conditioning channels.
pub fn sample_inner(
    model: &DiTModel,
    ae: &AutoencoderParams,
    kappa: f32,
    cond: &ConditioningBundle,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    mut hook: impl FnMut(usize, &Tensor<f32>),
) -> Result<SampleOutput> {
    if !sampler.guidance_scale.is_finite() || sampler.guidance_scale < 0.0 {
        return Err(Error::Invalid(format!(
            "guidance scale {} must be finite and >= 0",
            sampler.guidance_scale
        )));
    }
    if kappa <= 0.0 {
        return Err(Error::Invalid(format!("kappa {kappa} must be positive")));
    }
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut x = gaussian_like(vec![cfg.frames, cfg.c_lat, cfg.h_lat, cfg.w_lat], &mut rng);
    let null = conditioning::null_ids(cfg.l_t);
    let mut capture = None;
    for t in (1..=schedule.steps()).rev() {
        let noise_lv = LatentVideo {
            data: x,
            kappa_applied: true,
        };
        let x_in = latentspace::assemble_vision_latent(
            &noise_lv,
            &cond.image_latent,
            &cond.pose_latent,
            cfg.mode,
        )?;
        hook(t, &x_in);
        let pose = match cfg.mode {
            InjectionMode::Uvt => PoseInput::None,
            InjectionMode::PadaLn | InjectionMode::CrossAttention => {
                PoseInput::Latent(&cond.pose_latent.data)
            }
            InjectionMode::ExpertAdd => PoseInput::Frames(&cond.pose_frames),
        };
        let want_capture = sampler.capture && t == 1;
        let (eps_c, cap) = dit::forward(model, &x_in, t, &cond.text_ids, &pose, want_capture)?;
        if want_capture {
            capture = cap;
        }
        let eps_hat = if sampler.guidance_scale == 1.0 {
            eps_c
        } else {
            let (eps_n, _) = dit::forward(model, &x_in, t, &null, &pose, false)?;
            let s = sampler.guidance_scale;
            eps_n.zip_map(&eps_c, |n, c| n + s * (c - n)).unwrap()
        };
        if !eps_hat.all_finite() {
            return Err(Error::Numeric(format!("non-finite prediction at t={t}")));
        }
        let z = if t > 1 {
            Some(gaussian_like(noise_lv.data.shape().to_vec(), &mut rng))
        } else {
            None
        };
        x = reverse_step(&noise_lv.data, t, &eps_hat, z.as_ref(), schedule)?;
    }
    let x0 = x.map(|v| v / kappa);
    let video = latentspace::decode(&x0, ae)?.map(|v| v.clamp(0.0, 1.0));
    Ok(SampleOutput { video, capture })
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f32,
}

#[derive(Debug, Clone)]
pub struct ValRecord {
    pub step: usize,
    pub win_rate: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<TrainRecord>,
    pub validations: Vec<ValRecord>,
    pub final_loss: f32,
}

/// Held-out items for in-training validation: conditioning plus the
/// deterministic renders of the matched and a shuffled pose track.
pub struct ValItem {
    pub cond: ConditioningBundle,
    pub gt_matched: Tensor<f32>,
    pub gt_shuffled: Tensor<f32>,
}

pub struct ValContext<'a> {
    pub ae: &'a AutoencoderParams,
    pub kappa: f32,
    pub items: Vec<ValItem>,
}

fn trailing_median(window: &[f32]) -> f32 {
    let mut v = window.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn run_validation(
    model: &DiTModel,
    ctx: &ValContext,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> Result<f32> {
    let n = count.min(ctx.items.len());
    if n == 0 {
        return Ok(0.0);
    }
    let mut wins = 0usize;
    for (i, item) in ctx.items.iter().take(n).enumerate() {
        let out = sample(
            model,
            ctx.ae,
            ctx.kappa,
            &item.cond,
            schedule,
            &SamplerConfig {
                guidance_scale: 1.0,
                seed: seed.wrapping_add(i as u64),
                capture: false,
            },
        )?;
        let (_, _, win) =
            crate::evalkit::pose_discrimination(&out.video, &item.gt_matched, &item.gt_shuffled)?;
        if win {
            wins += 1;
        }
    }
    Ok(wins as f32 / n as f32)
}

/// Train a denoiser from scratch. Data order, noise draws, and text
/// dropout all derive from the config seed, so identical configs give
/// bit-identical checkpoints.
pub fn train(
    cfg: &TrainConfig,
    dit_cfg: &DiTConfig,
    dataset: &[PreparedSample],
    val: Option<&ValContext>,
    schedule: &NoiseSchedule,
) -> Result<(DiTModel, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    if dit_cfg.mode != cfg.mode {
        return Err(Error::Invalid(format!(
            "model mode {} vs training mode {}",
            dit_cfg.mode.name(),
            cfg.mode.name()
        )));
    }
    let mut model = dit::init_dit(dit_cfg, cfg.seed)?;
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok((model, log));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f72_6465);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973);
    let mut opt = AdamW::new(cfg.lr as f64, cfg.weight_decay as f64);
    let mut window: Vec<f32> = Vec::with_capacity(MEDIAN_WINDOW);
    let mut high_streak = 0usize;
    let mut last = 0.0f32;
    for step in 0..cfg.steps {
        // the non-text arm withholds pose for its first half
        let pose_active = cfg.joint_text || step >= cfg.steps / 2;
        let batch: Vec<PreparedSample> = (0..cfg.batch)
            .map(|_| dataset[order_rng.gen_range(0..dataset.len())].clone())
            .collect();
        let (mut g, b, loss) = build_loss(
            &model,
            &batch,
            schedule,
            cfg.text_dropout,
            cfg.joint_text,
            pose_active,
            &mut noise_rng,
        )?;
        let lv = g.value(loss).item();
        g.backward(loss);
        opt.step(&mut model.params, |name| {
            g.grad(b.id(name)).cloned()
        });
        last = lv;
        if window.len() >= MEDIAN_WINDOW {
            window.remove(0);
        }
        window.push(lv);
        let median = trailing_median(&window);
        if lv > DIVERGE_FACTOR * median {
            high_streak += 1;
            if high_streak >= DIVERGE_PATIENCE {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {lv} > {DIVERGE_FACTOR}x trailing median {median} \
                     for {DIVERGE_PATIENCE} steps (step {step})"
                )));
            }
        } else {
            high_streak = 0;
        }
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log.losses.push(TrainRecord {
                step: step + 1,
                loss: lv,
            });
        }
        if cfg.val_every > 0 && (step + 1) % cfg.val_every == 0 {
            if let Some(ctx) = val {
                let win_rate =
                    run_validation(&model, ctx, schedule, cfg.val_items, cfg.seed ^ 0x7661_6c00)?;
                log.validations.push(ValRecord {
                    step: step + 1,
                    win_rate,
                });
            }
        }
    }
    log.final_loss = last;
    Ok((model, log))
}
