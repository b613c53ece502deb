//! Model assembly: architecture configuration, seeded parameter
//! initialization, and the per-timestep forward pass that training and
//! evaluation share.

use std::fmt;
use std::str::FromStr;

use crate::encoders::{self, LatentStats, INPUT_H, INPUT_W, LATENT};
use crate::error::{Error, Result};
use crate::fusion;
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::temporal::{self, Fanouts};
use crate::tensor::Tensor;

pub use crate::temporal::Head;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Cnn,
    Vae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Early,
    Hybrid,
}

/// Second input stream fed alongside RGB. `None` runs the RGB-only
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Flow,
    Depth,
    None,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Flow => 2,
            Modality::Depth => 1,
            Modality::None => 0,
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(EncoderKind::Cnn),
            "vae" => Ok(EncoderKind::Vae),
            _ => Err(Error::config(format!("unknown encoder '{s}' (expected cnn or vae)"))),
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionKind::Early),
            "hybrid" => Ok(FusionKind::Hybrid),
            _ => Err(Error::config(format!("unknown fusion '{s}' (expected early or hybrid)"))),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Modality::Flow),
            "depth" => Ok(Modality::Depth),
            "none" => Ok(Modality::None),
            _ => Err(Error::config(format!("unknown modality '{s}' (expected flow, depth, or none)"))),
        }
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncp" => Ok(Head::Ncp),
            "lstm" => Ok(Head::Lstm),
            _ => Err(Error::config(format!("unknown head '{s}' (expected ncp or lstm)"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Cnn => "cnn",
            EncoderKind::Vae => "vae",
        })
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Early => "early",
            FusionKind::Hybrid => "hybrid",
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Flow => "flow",
            Modality::Depth => "depth",
            Modality::None => "none",
        })
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Ncp => "ncp",
            Head::Lstm => "lstm",
        })
    }
}

/// One architecture choice. `seed` drives every weight draw; `wiring_seed`
/// fixes the NCP connectivity independently so wirings can be compared
/// across weight seeds.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub head: Head,
    pub fusion: FusionKind,
    pub modality: Modality,
    /// Turn-weight exponent in w(y) = exp(|y|^alpha).
    pub alpha: f64,
    pub seed: u64,
    pub wiring_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Cnn,
            head: Head::Ncp,
            fusion: FusionKind::Early,
            modality: Modality::Flow,
            alpha: 1.0,
            seed: 1,
            wiring_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive and finite, got {}", self.alpha)));
        }
        if self.fusion == FusionKind::Hybrid && self.modality == Modality::None {
            return Err(Error::config("hybrid fusion needs a second modality (flow or depth)"));
        }
        if self.fusion == FusionKind::Hybrid && self.encoder == EncoderKind::Vae {
            return Err(Error::config(
                "vae + hybrid is unsupported: hybrid fusion has no single fused input to reconstruct",
            ));
        }
        Ok(())
    }

    /// Channel count of the (early-fused) encoder input.
    pub fn input_channels(&self) -> usize {
        3 + self.modality.channels()
    }

    /// Loss mixing factor of the composite objective: 0 for the plain CNN,
    /// 1 when the VAE terms are active.
    pub fn beta(&self) -> f64 {
        match self.encoder {
            EncoderKind::Cnn => 0.0,
            EncoderKind::Vae => 1.0,
        }
    }
}

/// Fresh parameters for `cfg`, a pure function of `cfg.seed` and
/// `cfg.wiring_seed`. Sub-generators isolate the encoder and head draws
/// so switching one component leaves the other's weights untouched.
pub fn init_model<T: Scalar>(cfg: &ModelConfig) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut enc_rng = root.derive(1);
    let mut head_rng = root.derive(2);
    let mut ps = ParamSet::new();
    match cfg.fusion {
        FusionKind::Early => match cfg.encoder {
            EncoderKind::Cnn => {
                encoders::init_cnn_encoder(&mut ps, "enc", cfg.input_channels(), &mut enc_rng)
            }
            EncoderKind::Vae => encoders::init_vae(&mut ps, cfg.input_channels(), &mut enc_rng),
        },
        FusionKind::Hybrid => fusion::init_hybrid(&mut ps, cfg.modality.channels(), &mut enc_rng),
    }
    match cfg.head {
        Head::Ncp => {
            let wiring = temporal::build_ncp_wiring(cfg.wiring_seed, &Fanouts::default())?;
            temporal::init_ncp(&mut ps, &wiring, &mut head_rng);
        }
        Head::Lstm => temporal::init_lstm(&mut ps, &mut head_rng),
    }
    Ok(ps)
}

/// Extra nodes the VAE objective consumes: the posterior, the
/// reconstruction, and the fused input it targets.
#[derive(Debug, Clone, Copy)]
pub struct VaeAux {
    pub stats: LatentStats,
    pub recon: Var,
    pub input: Var,
}

fn check_frame<T: Scalar>(t: &Tensor<T>, ch: usize, what: &str) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[1] != ch || s[2] != INPUT_H || s[3] != INPUT_W {
        return Err(Error::dim(format!("{what} wants [N,{ch},{INPUT_H},{INPUT_W}], got {s:?}")));
    }
    Ok(())
}

/// Encodes one timestep's batch of frames to [N,32] features. `modality`
/// must match the configured stream; `eps` supplies the reparameterization
/// draw for VAE training, and omitting it yields the deterministic z = mu.
pub fn encode_step<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    cfg: &ModelConfig,
    rgb: &Tensor<T>,
    modality: Option<&Tensor<T>>,
    eps: Option<&Tensor<T>>,
) -> Result<(Var, Option<VaeAux>)> {
    check_frame(rgb, 3, "rgb stream")?;
    let k = cfg.modality.channels();
    match (k, modality) {
        (0, Some(_)) => {
            return Err(Error::config("modality tensor supplied but config modality is none"))
        }
        (0, None) => {}
        (_, None) => {
            return Err(Error::data(format!("config modality {} needs a second stream", cfg.modality)))
        }
        (_, Some(m)) => check_frame(m, k, "modality stream")?,
    }
    match cfg.fusion {
        FusionKind::Early => {
            let fused = match modality {
                Some(m) => fusion::early_fuse(rgb, m)?,
                None => rgb.clone(),
            };
            let x = tape.leaf(fused);
            match cfg.encoder {
                EncoderKind::Cnn => Ok((encoders::cnn_encode(tape, bp, "enc", x)?, None)),
                EncoderKind::Vae => {
                    let n = rgb.shape()[0];
                    let zero_eps;
                    let eps = match eps {
                        Some(e) => e,
                        None => {
                            zero_eps = Tensor::zeros(&[n, LATENT]);
                            &zero_eps
                        }
                    };
                    let stats = encoders::vae_encode(tape, bp, x, eps)?;
                    let recon = encoders::vae_decode(tape, bp, stats.z)?;
                    Ok((stats.z, Some(VaeAux { stats, recon, input: x })))
                }
            }
        }
        FusionKind::Hybrid => {
            let m = modality.expect("validated above: hybrid implies a modality");
            let m1 = tape.leaf(rgb.clone());
            let m2 = tape.leaf(m.clone());
            Ok((fusion::hybrid_fuse_forward(tape, bp, m1, m2)?, None))
        }
    }
}

/// Recurrent state for a batch of `n` sequences; layout matches the head.
pub fn init_state<T: Scalar>(tape: &mut Tape<T>, cfg: &ModelConfig, n: usize) -> Vec<Var> {
    temporal::init_state(tape, cfg.head, n)
}

/// Steering output for one timestep, plus the VAE nodes when present.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// [N,1] steering prediction.
    pub y: Var,
    pub vae: Option<VaeAux>,
}

/// Full forward pass for one timestep: encode, advance the head, read the
/// steering output. `state` is threaded across calls.
pub fn model_step<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    cfg: &ModelConfig,
    state: &mut Vec<Var>,
    rgb: &Tensor<T>,
    modality: Option<&Tensor<T>>,
    eps: Option<&Tensor<T>>,
) -> Result<StepOutput> {
    let (feat, vae) = encode_step(tape, bp, cfg, rgb, modality, eps)?;
    let y = temporal::head_step(tape, bp, cfg.head, state, feat);
    Ok(StepOutput { y, vae })
}
