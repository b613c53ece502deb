//! Convolutional feature extractors: a deterministic CNN encoder and a VAE
//! encoder/decoder pair, both meeting at a 32-wide bottleneck.

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One convolutional stage of the five-stage encoder plan.
#[derive(Debug, Clone, Copy)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Width of the bottleneck feature vector; every encoder ends here.
pub const LATENT: usize = 32;
/// Preprocessed frame extents consumed by all encoders.
pub const INPUT_H: usize = 78;
pub const INPUT_W: usize = 200;

/// Five stages: three strided stages shrink the map, two stride-1 stages
/// refine it. No padding anywhere; extents follow floor semantics.
pub const STAGES: [ConvStage; 5] = [
    ConvStage { filters: 16, kernel: 5, stride: 2 },
    ConvStage { filters: 24, kernel: 5, stride: 2 },
    ConvStage { filters: 32, kernel: 3, stride: 2 },
    ConvStage { filters: 48, kernel: 3, stride: 1 },
    ConvStage { filters: 48, kernel: 3, stride: 1 },
];

/// Feature-map extents after each stage for the 78x200 input.
pub fn stage_extents() -> [(usize, usize); 5] {
    let mut e = [(0, 0); 5];
    let (mut h, mut w) = (INPUT_H, INPUT_W);
    for (i, s) in STAGES.iter().enumerate() {
        h = (h - s.kernel) / s.stride + 1;
        w = (w - s.kernel) / s.stride + 1;
        e[i] = (h, w);
    }
    e
}

/// Flattened width of the final feature map.
pub fn flat_len() -> usize {
    let (h, w) = stage_extents()[4];
    STAGES[4].filters * h * w
}

fn conv_init<T: Scalar>(f: usize, c: usize, k: usize, rng: &mut Rng) -> Tensor<T> {
    // He bound sqrt(6/fan_in): keeps activation variance flat through the
    // relu stages. A plain 1/sqrt(fan_in) bound shrinks variance ~6x per
    // stage, which flatlines the gradient signal five stages deep.
    let bound = (6.0 / (c * k * k) as f64).sqrt();
    Tensor::rand_uniform(&[f, c, k, k], -bound, bound, rng)
}

/// Registers `{name}.k` / `{name}.b` for stage `stage` of the plan.
pub fn init_conv_stage<T: Scalar>(
    ps: &mut ParamSet<T>,
    name: &str,
    in_ch: usize,
    stage: usize,
    rng: &mut Rng,
) {
    let s = STAGES[stage];
    ps.insert(format!("{name}.k"), conv_init(s.filters, in_ch, s.kernel, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[s.filters]));
}

/// Registers all five stages as `{prefix}.g1` .. `{prefix}.g5`.
pub fn init_conv_stages<T: Scalar>(ps: &mut ParamSet<T>, prefix: &str, in_ch: usize, rng: &mut Rng) {
    let mut c = in_ch;
    for (i, s) in STAGES.iter().enumerate() {
        init_conv_stage(ps, &format!("{prefix}.g{}", i + 1), c, i, rng);
        c = s.filters;
    }
}

/// Registers `{name}.w` / `{name}.b` for a dense layer, fan-in-scaled
/// uniform weights and zero bias.
pub fn init_dense<T: Scalar>(ps: &mut ParamSet<T>, name: &str, din: usize, dout: usize, rng: &mut Rng) {
    let bound = 1.0 / (din as f64).sqrt();
    ps.insert(format!("{name}.w"), Tensor::rand_uniform(&[din, dout], -bound, bound, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

/// CNN encoder: five stages plus `{prefix}.fc` projecting to the latent.
pub fn init_cnn_encoder<T: Scalar>(ps: &mut ParamSet<T>, prefix: &str, in_ch: usize, rng: &mut Rng) {
    init_conv_stages(ps, prefix, in_ch, rng);
    init_dense(ps, &format!("{prefix}.fc"), flat_len(), LATENT, rng);
}

/// VAE: shared trunk under `enc`, two latent heads, and a transposed
/// mirror under `dec` that reconstructs all `in_ch` input channels.
pub fn init_vae<T: Scalar>(ps: &mut ParamSet<T>, in_ch: usize, rng: &mut Rng) {
    init_conv_stages(ps, "enc", in_ch, rng);
    init_dense(ps, "enc.mu", flat_len(), LATENT, rng);
    init_dense(ps, "enc.logv", flat_len(), LATENT, rng);
    init_dense(ps, "dec.fc", LATENT, flat_len(), rng);
    for i in (0..STAGES.len()).rev() {
        let s = STAGES[i];
        let out_ch = if i == 0 { in_ch } else { STAGES[i - 1].filters };
        let bound = (6.0 / (s.filters * s.kernel * s.kernel) as f64).sqrt();
        ps.insert(
            format!("dec.t{}.k", i + 1),
            Tensor::rand_uniform(&[s.filters, out_ch, s.kernel, s.kernel], -bound, bound, rng),
        );
        ps.insert(format!("dec.t{}.b", i + 1), Tensor::zeros(&[out_ch]));
    }
}

/// Output padding each transposed stage needs so the mirror reproduces the
/// encoder's input extents exactly (floor-division strides lose remainders).
fn decode_outpads() -> [(usize, usize); 5] {
    let ext = stage_extents();
    let mut pads = [(0, 0); 5];
    for i in 0..STAGES.len() {
        let s = STAGES[i];
        let (ih, iw) = ext[i];
        let (th, tw) = if i == 0 { (INPUT_H, INPUT_W) } else { ext[i - 1] };
        pads[i] = (th - ((ih - 1) * s.stride + s.kernel), tw - ((iw - 1) * s.stride + s.kernel));
    }
    pads
}

/// Conv + channel bias + ReLU for stage `idx`, parameters `{name}.k/.b`.
pub fn stage_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    name: &str,
    idx: usize,
    x: Var,
) -> Var {
    let s = STAGES[idx];
    let c = tape.conv2d(x, bp.var(&format!("{name}.k")), (s.stride, s.stride), (0, 0));
    let c = tape.bias_channel(c, bp.var(&format!("{name}.b")));
    tape.relu(c)
}

/// All five stages under `{prefix}.g1..g5`.
pub fn trunk_forward<T: Scalar>(tape: &mut Tape<T>, bp: &BoundParams, prefix: &str, x: Var) -> Var {
    let mut h = x;
    for i in 0..STAGES.len() {
        h = stage_forward(tape, bp, &format!("{prefix}.g{}", i + 1), i, h);
    }
    h
}

/// [N,C,H,W] -> [N, C*H*W].
pub fn flatten_map<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let cols: usize = shape[1..].iter().product();
    tape.reshape(x, &[shape[0], cols])
}

/// Dense layer with parameters `{name}.w/.b`.
pub fn dense_layer<T: Scalar>(tape: &mut Tape<T>, bp: &BoundParams, name: &str, x: Var) -> Var {
    tape.dense(x, bp.var(&format!("{name}.w")), Some(bp.var(&format!("{name}.b"))))
}

fn check_input<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<()> {
    let shape = tape.value(x).shape();
    if shape.len() != 4 || !(3..=5).contains(&shape[1]) {
        return Err(Error::config(format!(
            "encoder input must be [N,c,H,W] with c in 3..=5, got {shape:?}"
        )));
    }
    Ok(())
}

/// Deterministic encoder: trunk, flatten, dense projection to the latent.
pub fn cnn_encode<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    check_input(tape, x)?;
    let f = trunk_forward(tape, bp, prefix, x);
    let f = flatten_map(tape, f);
    Ok(dense_layer(tape, bp, &format!("{prefix}.fc"), f))
}

/// Latent posterior nodes produced by `vae_encode`.
#[derive(Debug, Clone, Copy)]
pub struct LatentStats {
    pub mu: Var,
    pub logv: Var,
    pub z: Var,
}

/// z = mu + sigma * eps. Gradients reach `mu` and `sigma`; `eps` enters as
/// a constant draw.
pub fn reparameterize<T: Scalar>(tape: &mut Tape<T>, mu: Var, sigma: Var, eps: &Tensor<T>) -> Var {
    let e = tape.leaf(eps.clone());
    let se = tape.mul(sigma, e);
    tape.add(mu, se)
}

/// Shared trunk, two dense heads, reparameterized sample.
pub fn vae_encode<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    x: Var,
    eps: &Tensor<T>,
) -> Result<LatentStats> {
    check_input(tape, x)?;
    let f = trunk_forward(tape, bp, "enc", x);
    let f = flatten_map(tape, f);
    let mu = dense_layer(tape, bp, "enc.mu", f);
    let logv = dense_layer(tape, bp, "enc.logv", f);
    let half = tape.scale(logv, 0.5);
    let sigma = tape.exp(half);
    let z = reparameterize(tape, mu, sigma, eps);
    Ok(LatentStats { mu, logv, z })
}

/// Transposed mirror of the encoder: dense up-projection, five transposed
/// stages, sigmoid into [0,1]. Output channel count is fixed by `dec.t1.k`.
pub fn vae_decode<T: Scalar>(tape: &mut Tape<T>, bp: &BoundParams, z: Var) -> Result<Var> {
    let shape = tape.value(z).shape();
    if shape.len() != 2 || shape[1] != LATENT {
        return Err(Error::config(format!("decoder wants [N,{LATENT}] latents, got {shape:?}")));
    }
    let n = shape[0];
    let h = dense_layer(tape, bp, "dec.fc", z);
    let h = tape.relu(h);
    let (eh, ew) = stage_extents()[4];
    let mut h = tape.reshape(h, &[n, STAGES[4].filters, eh, ew]);
    let pads = decode_outpads();
    for i in (0..STAGES.len()).rev() {
        let s = STAGES[i];
        let k = bp.var(&format!("dec.t{}.k", i + 1));
        let b = bp.var(&format!("dec.t{}.b", i + 1));
        h = tape.conv2d_transpose(h, k, (s.stride, s.stride), (0, 0), pads[i]);
        h = tape.bias_channel(h, b);
        h = if i == 0 { tape.sigmoid(h) } else { tape.relu(h) };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_geometry_matches_plan() {
        assert_eq!(stage_extents(), [(37, 98), (17, 47), (8, 23), (6, 21), (4, 19)]);
        assert_eq!(flat_len(), 3648);
        assert_eq!(decode_outpads(), [(1, 1), (0, 1), (0, 0), (0, 0), (0, 0)]);
    }

    #[test]
    fn cnn_encode_outputs_latent_width_for_each_channel_count() {
        for c in [3usize, 4, 5] {
            let mut rng = Rng::new(10 + c as u64);
            let mut ps: ParamSet<f32> = ParamSet::new();
            init_cnn_encoder(&mut ps, "enc", c, &mut rng);
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, &ps);
            let x = tape.leaf(Tensor::randn(&[2, c, INPUT_H, INPUT_W], 1.0, &mut rng));
            let z = cnn_encode(&mut tape, &bp, "enc", x).unwrap();
            assert_eq!(tape.value(z).shape(), &[2, LATENT]);
            assert!(tape.value(z).all_finite());
        }
    }

    #[test]
    fn zero_input_with_zero_biases_encodes_to_zero() {
        let mut rng = Rng::new(3);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_cnn_encoder(&mut ps, "enc", 3, &mut rng);
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let x = tape.leaf(Tensor::zeros(&[1, 3, INPUT_H, INPUT_W]));
        let z = cnn_encode(&mut tape, &bp, "enc", x).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unsupported_channel_count_is_rejected() {
        let mut rng = Rng::new(4);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_cnn_encoder(&mut ps, "enc", 3, &mut rng);
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let x = tape.leaf(Tensor::zeros(&[1, 6, INPUT_H, INPUT_W]));
        assert!(cnn_encode(&mut tape, &bp, "enc", x).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        // Mean latent as loss; probe first-stage kernel entries in f64.
        let mut rng = Rng::new(7);
        let mut ps: ParamSet<f64> = ParamSet::new();
        init_cnn_encoder(&mut ps, "enc", 3, &mut rng);
        let x_val: Tensor<f64> = Tensor::randn(&[1, 3, INPUT_H, INPUT_W], 0.5, &mut rng);

        let eval = |ps: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, ps);
            let x = tape.leaf(x_val.clone());
            let z = cnn_encode(&mut tape, &bp, "enc", x).unwrap();
            let m = tape.mean_all(z);
            tape.value(m).item()
        };

        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let x = tape.leaf(x_val.clone());
        let z = cnn_encode(&mut tape, &bp, "enc", x).unwrap();
        let m = tape.mean_all(z);
        let grads = tape.backward(m);
        let gk = grads.dense(bp.var("enc.g1.k"), ps.get("enc.g1.k").unwrap().shape());

        let h = 1e-5;
        for &idx in &[0usize, 17, 101, 250] {
            let base = ps.get("enc.g1.k").unwrap().data()[idx];
            let mut plus = ps.cast::<f64>();
            plus.get_mut("enc.g1.k").unwrap().data_mut()[idx] = base + h;
            let mut minus = ps.cast::<f64>();
            minus.get_mut("enc.g1.k").unwrap().data_mut()[idx] = base - h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = gk.data()[idx];
            let rel = (fd - an).abs() / an.abs().max(1e-8);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs analytic {an} (rel {rel})");
        }
    }

    #[test]
    fn reparameterize_identities() {
        let mut tape: Tape<f32> = Tape::new();
        let mu = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let sig1 = tape.leaf(Tensor::full(&[1, 3], 1.0));
        let sig0 = tape.leaf(Tensor::zeros(&[1, 3]));

        let z = reparameterize(&mut tape, mu, sig1, &Tensor::zeros(&[1, 3]));
        assert_eq!(tape.value(z).data(), &[0.5, -1.0, 2.0]);

        let eps = Tensor::from_vec(&[1, 3], vec![5.0, -5.0, 9.0]).unwrap();
        let z = reparameterize(&mut tape, mu, sig0, &eps);
        assert_eq!(tape.value(z).data(), &[0.5, -1.0, 2.0]);

        let zero = tape.leaf(Tensor::zeros(&[1, 1]));
        let one = tape.leaf(Tensor::full(&[1, 1], 1.0));
        let z = reparameterize(&mut tape, zero, one, &Tensor::full(&[1, 1], 1.5));
        assert!((tape.value(z).item() - 1.5).abs() < 1e-7);
    }

    #[test]
    fn reparameterize_variance_matches_sigma_squared() {
        let mut rng = Rng::new(99);
        let n = 100_000;
        let mut tape: Tape<f32> = Tape::new();
        let mu = tape.leaf(Tensor::zeros(&[1, n]));
        let sigma = tape.leaf(Tensor::full(&[1, n], 2.0));
        let eps: Tensor<f32> = Tensor::randn(&[1, n], 1.0, &mut rng);
        let z = reparameterize(&mut tape, mu, sigma, &eps);
        let vals = tape.value(z).data();
        let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 =
            vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 4.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn vae_heads_follow_their_weights() {
        let mut rng = Rng::new(21);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_vae(&mut ps, 3, &mut rng);
        // Zero both head weight matrices; give mu a recognizable bias.
        for name in ["enc.mu.w", "enc.logv.w"] {
            let t = ps.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let bias: Vec<f32> = (0..LATENT).map(|i| i as f32 * 0.1).collect();
        *ps.get_mut("enc.mu.b").unwrap() = Tensor::from_vec(&[LATENT], bias.clone()).unwrap();

        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let x = tape.leaf(Tensor::randn(&[2, 3, INPUT_H, INPUT_W], 1.0, &mut rng));
        let eps = Tensor::zeros(&[2, LATENT]);
        let stats = vae_encode(&mut tape, &bp, x, &eps).unwrap();

        // mu = bias rows; logv = 0 so sigma = 1; eps = 0 so z = mu.
        let mu = tape.value(stats.mu);
        for row in mu.data().chunks_exact(LATENT) {
            for (v, b) in row.iter().zip(&bias) {
                assert!((v - b).abs() < 1e-6);
            }
        }
        assert!(tape.value(stats.logv).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(stats.z).data(), tape.value(stats.mu).data());
    }

    #[test]
    fn decoder_mirrors_input_shape_and_zero_params_give_half() {
        for c in [3usize, 5] {
            let mut rng = Rng::new(31 + c as u64);
            let mut ps: ParamSet<f32> = ParamSet::new();
            init_vae(&mut ps, c, &mut rng);
            for name in ps.trainable_names() {
                if name.starts_with("dec.") {
                    let t = ps.get_mut(&name).unwrap();
                    *t = Tensor::zeros(t.shape());
                }
            }
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, &ps);
            let z = tape.leaf(Tensor::randn(&[2, LATENT], 1.0, &mut rng));
            let x = vae_decode(&mut tape, &bp, z).unwrap();
            assert_eq!(tape.value(x).shape(), &[2, c, INPUT_H, INPUT_W]);
            assert!(tape.value(x).data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn decoder_rejects_wrong_latent_width() {
        let mut rng = Rng::new(5);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_vae(&mut ps, 3, &mut rng);
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let z = tape.leaf(Tensor::zeros(&[1, 16]));
        assert!(vae_decode(&mut tape, &bp, z).is_err());
    }

    #[test]
    fn reconstruction_gradient_wrt_latent_matches_finite_differences() {
        // The loss sums a 64-pixel slice against a target near the decoder
        // output: a whole-image mean through six layers has a ~1e-9 scale
        // gradient, which central differences cannot resolve in f64.
        let mut rng = Rng::new(77);
        let mut ps: ParamSet<f64> = ParamSet::new();
        init_vae(&mut ps, 3, &mut rng);
        let z0: Tensor<f64> = Tensor::randn(&[1, LATENT], 1.0, &mut rng);

        let decode_flat = |tape: &mut Tape<f64>, zv: &Tensor<f64>, leaf: bool| -> (Var, Var) {
            let bp = BoundParams::bind(tape, &ps);
            let z = if leaf { tape.leaf(zv.clone()) } else { tape.param(zv.clone()) };
            let x = vae_decode(tape, &bp, z).unwrap();
            let n = tape.value(x).numel();
            let flat = tape.reshape(x, &[1, n]);
            (tape.slice_cols(flat, 1000, 64), z)
        };

        let mut probe = Tape::new();
        let (x0, _) = decode_flat(&mut probe, &z0, true);
        let mut target = probe.value(x0).clone();
        for v in target.data_mut() {
            *v += 0.05 * rng.normal();
        }

        let eval = |zv: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let (x, _) = decode_flat(&mut tape, zv, true);
            let t = tape.leaf(target.clone());
            let d = tape.sub(x, t);
            let sq = tape.square(d);
            let s = tape.sum_all(sq);
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let (x, z) = decode_flat(&mut tape, &z0, false);
        let t = tape.leaf(target.clone());
        let d = tape.sub(x, t);
        let sq = tape.square(d);
        let s = tape.sum_all(sq);
        let grads = tape.backward(s);
        let gz = grads.dense(z, &[1, LATENT]);

        let h = 1e-4;
        for &idx in &[0usize, 9, 31] {
            let mut plus = z0.clone();
            plus.data_mut()[idx] += h;
            let mut minus = z0.clone();
            minus.data_mut()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = gz.data()[idx];
            let rel = (fd - an).abs() / an.abs().max(1e-10);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs analytic {an} (rel {rel})");
        }
    }
}
