//! Command-line surface: argument parsing and config-file merging.
//! Each subcommand resolves to a plain config struct (flags override
//! file values override defaults) and delegates to `commands`.

pub mod artifacts;
pub mod commands;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use commands::{
    AblateCfg, AttnVizCfg, EvalCfg, GenDataCfg, SampleCfg, TrainAeCfg, TrainCmdCfg,
};
use poselab_core::conditioning::InjectionMode;
use serde::de::DeserializeOwned;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "poselab",
    version,
    about = "Desk-scale laboratory for pose-conditioned video diffusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic figure dataset.
    GenData(GenDataArgs),
    /// Train and calibrate the frame autoencoder.
    TrainAe(TrainAeArgs),
    /// Train a pose-conditioned denoiser.
    Train(TrainArgs),
    /// Sample a video from a trained checkpoint.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on held-out items.
    Eval(EvalArgs),
    /// Render attention heatmaps and diagonality reports.
    AttnViz(AttnVizArgs),
    /// Run the injection-mode x text-arm ablation grid.
    Ablate(AblateArgs),
}

fn load_base<C: DeserializeOwned + Default>(config: &Option<PathBuf>) -> Result<C> {
    match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(C::default()),
    }
}

fn on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got '{other}'")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<InjectionMode, String> {
    InjectionMode::parse(s).map_err(|e| e.to_string())
}

macro_rules! merge {
    ($cfg:expr, $args:expr, $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field { $cfg.$field = v; } )*
    };
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub thickness: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl GenDataArgs {
    pub fn resolve(self) -> Result<GenDataCfg> {
        let mut cfg: GenDataCfg = load_base(&self.config)?;
        merge!(cfg, self, out, count, frames, size, split, thickness, seed);
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainAeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainAeArgs {
    pub fn resolve(self) -> Result<TrainAeCfg> {
        let mut cfg: TrainAeCfg = load_base(&self.config)?;
        merge!(cfg, self, data, out, steps, batch, seed);
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub ae: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<InjectionMode>,
    #[arg(long, value_parser = on_off)]
    pub joint_text: Option<bool>,
    #[arg(long, value_parser = on_off)]
    pub masked: Option<bool>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub text_dropout: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub val_every: Option<usize>,
    #[arg(long)]
    pub val_items: Option<usize>,
    /// Schedule length; betas rescale with it unless given explicitly.
    #[arg(long)]
    pub schedule_steps: Option<usize>,
    #[arg(long)]
    pub beta_1: Option<f64>,
    #[arg(long)]
    pub beta_t: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_t: Option<usize>,
    #[arg(long)]
    pub l_t: Option<usize>,
}

impl TrainArgs {
    pub fn resolve(self) -> Result<TrainCmdCfg> {
        let mut cfg: TrainCmdCfg = load_base(&self.config)?;
        if let Some(t) = self.schedule_steps {
            cfg.schedule_steps = t;
            if self.beta_1.is_none() && self.beta_t.is_none() {
                // cap the rescale so beta stays a valid probability on
                // very short schedules
                let scale = (1000.0 / t as f64).min(0.999 / 0.02);
                cfg.beta_1 = 1e-4 * scale;
                cfg.beta_t = 0.02 * scale;
            }
        }
        merge!(
            cfg, self, data, ae, out, mode, joint_text, masked, steps, batch, lr, text_dropout,
            seed, log_every, val_every, val_items, beta_1, beta_t, d, blocks, heads, d_t, l_t
        );
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub ae: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// Index into the held-out split.
    #[arg(long)]
    pub item: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub guidance: Option<f32>,
    /// Zero the pose conditioning (control arm).
    #[arg(long, value_parser = on_off)]
    pub no_pose: Option<bool>,
    /// Mask the figure out of the image conditioning.
    #[arg(long, value_parser = on_off)]
    pub masked: Option<bool>,
    /// Background color word substituted into the prompt.
    #[arg(long)]
    pub background: Option<String>,
}

impl SampleArgs {
    pub fn resolve(self) -> Result<SampleCfg> {
        let mut cfg: SampleCfg = load_base(&self.config)?;
        merge!(cfg, self, model, ae, data, out, item, seed, guidance, no_pose, masked);
        if self.background.is_some() {
            cfg.background = self.background;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub ae: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub guidance: Option<f32>,
    #[arg(long, value_parser = on_off)]
    pub no_pose: Option<bool>,
    #[arg(long, value_parser = on_off)]
    pub masked: Option<bool>,
    /// Run the background-control probe with this color word.
    #[arg(long)]
    pub probe_background: Option<String>,
    /// Probe control arm: keep original prompts, still score the probe.
    #[arg(long, value_parser = on_off)]
    pub probe_hold_prompt: Option<bool>,
}

impl EvalArgs {
    pub fn resolve(self) -> Result<EvalCfg> {
        let mut cfg: EvalCfg = load_base(&self.config)?;
        merge!(
            cfg, self, model, ae, data, out, items, seed, guidance, no_pose, masked,
            probe_hold_prompt
        );
        if self.probe_background.is_some() {
            cfg.probe_background = self.probe_background;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct AttnVizArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub ae: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub item: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub spatial_index: Option<usize>,
}

impl AttnVizArgs {
    pub fn resolve(self) -> Result<AttnVizCfg> {
        let mut cfg: AttnVizCfg = load_base(&self.config)?;
        merge!(cfg, self, model, ae, data, out, item, seed);
        if self.frame.is_some() {
            cfg.frame = self.frame;
        }
        if self.spatial_index.is_some() {
            cfg.spatial_index = self.spatial_index;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub ae: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl AblateArgs {
    pub fn resolve(self) -> Result<AblateCfg> {
        let mut cfg: AblateCfg = load_base(&self.config)?;
        merge!(cfg, self, data, ae, out, steps, batch, items, seed);
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => commands::cmd_gen_data(&a.resolve()?),
        Command::TrainAe(a) => commands::cmd_train_ae(&a.resolve()?),
        Command::Train(a) => commands::cmd_train(&a.resolve()?).map(|_| ()),
        Command::Sample(a) => commands::cmd_sample(&a.resolve()?),
        Command::Eval(a) => commands::cmd_eval(&a.resolve()?).map(|_| ()),
        Command::AttnViz(a) => commands::cmd_attn_viz(&a.resolve()?).map(|_| ()),
        Command::Ablate(a) => commands::cmd_ablate(&a.resolve()?).map(|_| ()),
    }
}

/// Parse and run an argv-style invocation; the programmatic entry
/// point used by tests.
pub fn run_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}
