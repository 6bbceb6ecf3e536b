//! Shared convolutional frame autoencoder: 4x spatial downsampling to
//! a small latent, a global scaling factor kappa calibrated so latent
//! elements have unit std, and assembly of the vision latent stack
//! (noise, image conditioning, optionally pose) per injection mode.
//!
//! One parameter set encodes training video, reference image, and pose
//! renderings alike. Frames live in [0,1] everywhere else; the mapping
//! to [-1,1] happens only here, at the autoencoder boundary.

use crate::conditioning::InjectionMode;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{AdamW, Binding, ParamStore};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Encoder/decoder weights plus the latent channel count. `trained`
/// is false for a fresh initialization (0-step training).
#[derive(Clone)]
pub struct AutoencoderParams {
    pub params: ParamStore<f32>,
    pub c_lat: usize,
    pub trained: bool,
}

/// F x C_lat x H' x W' latent tensor; `kappa_applied` must be true
/// before the latent enters the transformer.
#[derive(Debug, Clone)]
pub struct LatentVideo {
    pub data: Tensor<f32>,
    pub kappa_applied: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct KappaCalibration {
    pub kappa: f32,
    pub calibration_count: usize,
    pub latent_std: f32,
}

/// (name, out channels, in channels) of every conv layer, in order.
const LAYERS: [(&str, usize, usize); 10] = [
    ("ae.enc0", 48, 3),
    ("ae.enc1", 48, 48),
    ("ae.enc2", 96, 48),
    ("ae.enc3", 96, 96),
    ("ae.enc4", 0, 96), // out = c_lat
    ("ae.dec0", 96, 0), // in = c_lat
    ("ae.dec1", 96, 96),
    ("ae.dec2", 48, 96),
    ("ae.dec3", 48, 48),
    ("ae.dec4", 3, 48),
];

pub fn init_autoencoder(c_lat: usize, seed: u64) -> AutoencoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (name, out_c, in_c) in LAYERS {
        let out_c = if out_c == 0 { c_lat } else { out_c };
        let in_c = if in_c == 0 { c_lat } else { in_c };
        let fan_in = in_c * 9;
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
        let w = Tensor::from_fn(vec![out_c, in_c, 3, 3], |_| normal.sample(&mut rng) as f32);
        params.insert(&format!("{name}.w"), w);
        params.insert(&format!("{name}.b"), Tensor::zeros(vec![out_c]));
    }
    AutoencoderParams {
        params,
        c_lat,
        trained: false,
    }
}

fn conv_block(g: &mut Graph<f32>, b: &Binding, x: NodeId, name: &str, stride: usize) -> NodeId {
    g.conv2d(x, b.id(&format!("{name}.w")), b.id(&format!("{name}.b")), stride, 1)
}

/// Encoder body on a (N,3,H,W) node already mapped to [-1,1].
pub fn encoder_graph(g: &mut Graph<f32>, b: &Binding, x: NodeId) -> NodeId {
    let h = conv_block(g, b, x, "ae.enc0", 1);
    let h = g.silu(h);
    let h = conv_block(g, b, h, "ae.enc1", 2);
    let h = g.silu(h);
    let h = conv_block(g, b, h, "ae.enc2", 1);
    let h = g.silu(h);
    let h = conv_block(g, b, h, "ae.enc3", 2);
    let h = g.silu(h);
    conv_block(g, b, h, "ae.enc4", 1)
}

/// Decoder body on a (N,c_lat,H',W') node; output is in [-1,1] space.
pub fn decoder_graph(g: &mut Graph<f32>, b: &Binding, z: NodeId) -> NodeId {
    let h = conv_block(g, b, z, "ae.dec0", 1);
    let h = g.silu(h);
    let h = g.upsample2x(h);
    let h = conv_block(g, b, h, "ae.dec1", 1);
    let h = g.silu(h);
    let h = conv_block(g, b, h, "ae.dec2", 1);
    let h = g.silu(h);
    let h = g.upsample2x(h);
    let h = conv_block(g, b, h, "ae.dec3", 1);
    let h = g.silu(h);
    conv_block(g, b, h, "ae.dec4", 1)
}

fn check_encodable(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!("expected (F,3,H,W), got {shape:?}")));
    }
    let (f, h, w) = (shape[0], shape[2], shape[3]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!("frame size {h}x{w} not divisible by 4")));
    }
    Ok((f, h, w))
}

/// Encode (F,3,H,W) frames in [0,1] to a kappa-scaled latent.
pub fn encode(frames: &Tensor<f32>, params: &AutoencoderParams, kappa: f32) -> Result<LatentVideo> {
    let (_, _, _) = check_encodable(frames.shape())?;
    let mut g = Graph::new();
    let b = params.params.bind_frozen(&mut g);
    let x = g.input(frames.map(|v| 2.0 * v - 1.0));
    let z = encoder_graph(&mut g, &b, x);
    let data = g.value(z).map(|v| v * kappa);
    Ok(LatentVideo {
        data,
        kappa_applied: true,
    })
}

/// Encode skeleton renderings with the same shared encoder. The
/// frame/channel permutation some temporal encoders need is a no-op
/// for a frame-wise encoder, so the pipeline is identical to `encode`.
pub fn encode_pose_video(
    pose_frames: &Tensor<f32>,
    params: &AutoencoderParams,
    kappa: f32,
) -> Result<LatentVideo> {
    encode(pose_frames, params, kappa)
}

/// Decode an unscaled latent (divide by kappa first) back to frames in
/// [0,1], without clamping.
pub fn decode(latent: &Tensor<f32>, params: &AutoencoderParams) -> Result<Tensor<f32>> {
    let s = latent.shape();
    if s.len() != 4 || s[1] != params.c_lat {
        return Err(Error::Shape(format!(
            "expected (F,{},H',W'), got {s:?}",
            params.c_lat
        )));
    }
    let mut g = Graph::new();
    let b = params.params.bind_frozen(&mut g);
    let z = g.input(latent.clone());
    let y = decoder_graph(&mut g, &b, z);
    Ok(g.value(y).map(|v| (v + 1.0) / 2.0))
}

/// kappa = 1 / std over all latent elements of the first `count`
/// calibration frames (unscaled encoder outputs).
pub fn calibrate_kappa(
    params: &AutoencoderParams,
    videos: &[Tensor<f32>],
    count: usize,
) -> Result<KappaCalibration> {
    if count < 64 {
        return Err(Error::Invalid(format!(
            "calibration needs >= 64 frames, asked for {count}"
        )));
    }
    let mut elements: Vec<f32> = Vec::new();
    let mut frames_used = 0usize;
    'outer: for video in videos {
        let (f, _, h, w) = {
            let (f, h, w) = check_encodable(video.shape())?;
            (f, 3, h, w)
        };
        for frame in 0..f {
            if frames_used == count {
                break 'outer;
            }
            let one = Tensor::new(
                vec![1, 3, h, w],
                video.data()[frame * 3 * h * w..(frame + 1) * 3 * h * w].to_vec(),
            )?;
            let z = encode(&one, params, 1.0)?;
            elements.extend_from_slice(z.data.data());
            frames_used += 1;
        }
    }
    if frames_used < count {
        return Err(Error::Invalid(format!(
            "calibration set has only {frames_used} frames, need {count}"
        )));
    }
    let all = Tensor::new(vec![elements.len()], elements)?;
    let latent_std = all.std();
    if latent_std < 1e-6 {
        return Err(Error::Numeric(format!(
            "degenerate latent std {latent_std}"
        )));
    }
    Ok(KappaCalibration {
        kappa: 1.0 / latent_std,
        calibration_count: frames_used,
        latent_std,
    })
}

#[derive(Debug, Clone)]
pub struct AeTrainLog {
    /// Mean reconstruction loss per 100-step window.
    pub window_means: Vec<f32>,
    pub final_loss: f32,
}

/// Train the autoencoder on a pool of (3,H,W) frames and freeze it.
/// 0 steps returns the untrained initialization.
pub fn train_autoencoder(
    frames: &[Tensor<f32>],
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<(AutoencoderParams, AeTrainLog)> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut ae = init_autoencoder(4, seed);
    if steps == 0 {
        return Ok((
            ae,
            AeTrainLog {
                window_means: vec![],
                final_loss: f32::NAN,
            },
        ));
    }
    let shape = frames[0].shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae);
    let mut opt = AdamW::new(1e-3, 0.0);
    let mut initial_loss = f32::NAN;
    let mut over_initial = 0usize;
    let mut window_sum = 0.0f32;
    let mut window_means = Vec::new();
    let mut last = 0.0f32;
    for step in 0..steps {
        // cosine decay 1e-3 -> 1e-4 tightens late reconstruction
        let progress = step as f64 / steps as f64;
        opt.lr = (1e-4 + 9e-4 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32;
        let mut batch_data = Vec::with_capacity(batch * 3 * h * w);
        for _ in 0..batch {
            let idx = rand::Rng::gen_range(&mut rng, 0..frames.len());
            batch_data.extend_from_slice(frames[idx].data());
        }
        let x_raw = Tensor::new(vec![batch, 3, h, w], batch_data)?;
        let mut g = Graph::new();
        let b = ae.params.bind_trainable(&mut g);
        let x = g.input(x_raw.map(|v| 2.0 * v - 1.0));
        let z = encoder_graph(&mut g, &b, x);
        let y = decoder_graph(&mut g, &b, z);
        let loss = g.mse(y, x);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {step}")));
        }
        if step == 0 {
            initial_loss = lv;
        }
        if lv > 10.0 * initial_loss {
            over_initial += 1;
            if over_initial >= 200 {
                return Err(Error::Diverged(format!(
                    "loss {lv} above 10x initial {initial_loss} for 200 steps (step {step})"
                )));
            }
        } else {
            over_initial = 0;
        }
        g.backward(loss);
        opt.step(&mut ae.params, |name| g.grad(b.id(name)).cloned());
        window_sum += lv;
        last = lv;
        if (step + 1) % 100 == 0 {
            window_means.push(window_sum / 100.0);
            window_sum = 0.0;
        }
    }
    ae.trained = true;
    Ok((
        ae,
        AeTrainLog {
            window_means,
            final_loss: last,
        },
    ))
}

/// Stack the noise latent with the image-conditioning channels (image
/// latent at frame 0, zeros after: the zero padding), and for UVT also
/// the pose latent: channel counts {UVT: 3C, CA: 2C, PadaLN: 2C,
/// ExpertAdd: 2C}.
pub fn assemble_vision_latent(
    noise: &LatentVideo,
    image_latent: &LatentVideo,
    pose_latent: &LatentVideo,
    mode: InjectionMode,
) -> Result<Tensor<f32>> {
    let ns = noise.data.shape();
    let is = image_latent.data.shape();
    let ps = pose_latent.data.shape();
    if ns.len() != 4 {
        return Err(Error::Shape(format!("noise latent must be rank 4, got {ns:?}")));
    }
    let (f, c, h, w) = (ns[0], ns[1], ns[2], ns[3]);
    if is != [1, c, h, w] {
        return Err(Error::Shape(format!(
            "image latent must be (1,{c},{h},{w}), got {is:?}"
        )));
    }
    if mode == InjectionMode::Uvt && ps != [f, c, h, w] {
        return Err(Error::Shape(format!(
            "pose latent must be ({f},{c},{h},{w}), got {ps:?}"
        )));
    }
    let chw = c * h * w;
    let out_c = if mode == InjectionMode::Uvt { 3 * c } else { 2 * c };
    let mut out = Tensor::zeros(vec![f, out_c, h, w]);
    for fr in 0..f {
        let dst = &mut out.data_mut()[fr * out_c * h * w..(fr + 1) * out_c * h * w];
        dst[..chw].copy_from_slice(&noise.data.data()[fr * chw..(fr + 1) * chw]);
        if fr == 0 {
            dst[chw..2 * chw].copy_from_slice(image_latent.data.data());
        }
        if mode == InjectionMode::Uvt {
            dst[2 * chw..].copy_from_slice(&pose_latent.data.data()[fr * chw..(fr + 1) * chw]);
        }
    }
    Ok(out)
}
