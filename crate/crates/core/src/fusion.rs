//! Modality fusion: early channel concatenation, and a two-stream hybrid
//! encoder whose stage outputs merge into a shared trunk through
//! attention-gated addition.

use crate::encoders::{flat_len, init_conv_stage, init_conv_stages, init_dense, stage_forward, LATENT, STAGES};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Channel concatenation [rgb, modality] -> [N, 3+k, H, W], RGB first.
pub fn early_fuse<T: Scalar>(rgb: &Tensor<T>, modality: &Tensor<T>) -> Result<Tensor<T>> {
    let rs = rgb.shape();
    let ms = modality.shape();
    if rs.len() != 4 || rs[1] != 3 {
        return Err(Error::dim(format!("early fusion wants [N,3,H,W] RGB, got {rs:?}")));
    }
    if ms.len() != 4 || !(1..=2).contains(&ms[1]) {
        return Err(Error::dim(format!("early fusion wants [N,k,H,W] with k in 1..=2, got {ms:?}")));
    }
    if rs[0] != ms[0] || rs[2] != ms[2] || rs[3] != ms[3] {
        return Err(Error::dim(format!("early fusion shape mismatch: {rs:?} vs {ms:?}")));
    }
    let (n, k, h, w) = (rs[0], ms[1], rs[2], rs[3]);
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (3 + k) * plane);
    for ni in 0..n {
        data.extend_from_slice(&rgb.data()[ni * 3 * plane..(ni + 1) * 3 * plane]);
        data.extend_from_slice(&modality.data()[ni * k * plane..(ni + 1) * k * plane]);
    }
    Tensor::from_vec(&[n, 3 + k, h, w], data)
}

/// Registers the 1x1 gate projection `{name}.w/.b` for a C-channel map.
pub fn init_acm<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize, rng: &mut Rng) {
    init_dense(ps, name, channels, channels, rng);
}

/// Attention gate: global average pool, per-channel projection, sigmoid,
/// channelwise rescale. Output magnitude never exceeds the input's.
pub fn acm<T: Scalar>(tape: &mut Tape<T>, bp: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let c = {
        let shape = tape.value(x).shape();
        if shape.len() != 4 {
            return Err(Error::dim(format!("acm wants [N,C,h,w], got {shape:?}")));
        }
        shape[1]
    };
    let w = bp.var(&format!("{name}.w"));
    if tape.value(w).shape() != [c, c] {
        return Err(Error::dim(format!(
            "acm {name} sized for {:?}, feature map has {c} channels",
            tape.value(w).shape()
        )));
    }
    let pooled = tape.spatial_mean(x);
    let proj = tape.dense(pooled, w, Some(bp.var(&format!("{name}.b"))));
    let gate = tape.sigmoid(proj);
    Ok(tape.channel_mul(x, gate))
}

/// Registers both streams (`s1` for RGB, `s2` for the modality), their
/// per-stage ACM gates, and the trunk (stages 2..5 plus the projection).
pub fn init_hybrid<T: Scalar>(ps: &mut ParamSet<T>, modality_ch: usize, rng: &mut Rng) {
    init_conv_stages(ps, "s1", 3, rng);
    init_conv_stages(ps, "s2", modality_ch, rng);
    for (i, s) in STAGES.iter().enumerate() {
        init_acm(ps, &format!("s1.acm{}", i + 1), s.filters, rng);
        init_acm(ps, &format!("s2.acm{}", i + 1), s.filters, rng);
    }
    for i in 1..STAGES.len() {
        init_conv_stage(ps, &format!("trunk.g{}", i + 1), STAGES[i - 1].filters, i, rng);
    }
    init_dense(ps, "trunk.fc", flat_len(), LATENT, rng);
}

/// Two-stream hybrid encoder. Each stream runs the five-stage plan on its
/// own modality; the trunk advances through the same geometry and absorbs
/// both streams' ACM-gated stage outputs by addition at every stage. The
/// final trunk map flattens to the 32-wide feature vector.
pub fn hybrid_fuse_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    m1: Var,
    m2: Var,
) -> Result<Var> {
    let s1 = tape.value(m1).shape().to_vec();
    let s2 = tape.value(m2).shape().to_vec();
    if s1.len() != 4 || s1[1] != 3 {
        return Err(Error::dim(format!("hybrid stream 1 wants [N,3,H,W], got {s1:?}")));
    }
    if s2.len() != 4 || !(1..=3).contains(&s2[1]) {
        return Err(Error::dim(format!("hybrid stream 2 wants [N,k,H,W], k in 1..=3, got {s2:?}")));
    }
    if s1[0] != s2[0] || s1[2] != s2[2] || s1[3] != s2[3] {
        return Err(Error::dim(format!("hybrid stream shape mismatch: {s1:?} vs {s2:?}")));
    }
    let mut a1 = m1;
    let mut a2 = m2;
    let mut trunk: Option<Var> = None;
    for i in 1..=STAGES.len() {
        a1 = stage_forward(tape, bp, &format!("s1.g{i}"), i - 1, a1);
        a2 = stage_forward(tape, bp, &format!("s2.g{i}"), i - 1, a2);
        let g1 = acm(tape, bp, &format!("s1.acm{i}"), a1)?;
        let g2 = acm(tape, bp, &format!("s2.acm{i}"), a2)?;
        trunk = Some(match trunk {
            None => {
                let t = tape.add(g1, g2);
                t
            }
            Some(t) => {
                let t = stage_forward(tape, bp, &format!("trunk.g{i}"), i - 1, t);
                let t = tape.add(t, g1);
                tape.add(t, g2)
            }
        });
    }
    let t = trunk.expect("five stages");
    let flat = {
        let shape = tape.value(t).shape().to_vec();
        let cols: usize = shape[1..].iter().product();
        tape.reshape(t, &[shape[0], cols])
    };
    Ok(tape.dense(flat, bp.var("trunk.fc.w"), Some(bp.var("trunk.fc.b"))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{INPUT_H, INPUT_W};

    #[test]
    fn early_fuse_concatenates_rgb_first() {
        let mut rng = Rng::new(1);
        let rgb: Tensor<f32> = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let flow: Tensor<f32> = Tensor::randn(&[2, 2, 4, 5], 1.0, &mut rng);
        let fused = early_fuse(&rgb, &flow).unwrap();
        assert_eq!(fused.shape(), &[2, 5, 4, 5]);
        let plane = 20;
        for n in 0..2 {
            let f = &fused.data()[n * 5 * plane..(n + 1) * 5 * plane];
            assert_eq!(&f[..3 * plane], &rgb.data()[n * 3 * plane..(n + 1) * 3 * plane]);
            assert_eq!(&f[3 * plane..], &flow.data()[n * 2 * plane..(n + 1) * 2 * plane]);
        }

        let depth: Tensor<f32> = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng);
        assert_eq!(early_fuse(&rgb, &depth).unwrap().shape(), &[2, 4, 4, 5]);
    }

    #[test]
    fn early_fuse_rejects_mismatches() {
        let rgb: Tensor<f32> = Tensor::zeros(&[1, 3, 4, 5]);
        assert!(early_fuse(&rgb, &Tensor::zeros(&[1, 2, 4, 6])).is_err());
        assert!(early_fuse(&rgb, &Tensor::zeros(&[2, 2, 4, 5])).is_err());
        assert!(early_fuse(&rgb, &Tensor::zeros(&[1, 3, 4, 5])).is_err());
        assert!(early_fuse(&Tensor::<f32>::zeros(&[1, 4, 4, 5]), &Tensor::zeros(&[1, 2, 4, 5])).is_err());
    }

    #[test]
    fn acm_gate_limits() {
        let mut rng = Rng::new(2);
        let x_val: Tensor<f32> = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng);

        for (bias, expect_input) in [(40.0f32, true), (-40.0, false)] {
            let mut ps: ParamSet<f32> = ParamSet::new();
            ps.insert("acm.w", Tensor::zeros(&[4, 4]));
            ps.insert("acm.b", Tensor::full(&[4], bias));
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, &ps);
            let x = tape.leaf(x_val.clone());
            let y = acm(&mut tape, &bp, "acm", x).unwrap();
            for (o, i) in tape.value(y).data().iter().zip(x_val.data()) {
                let want = if expect_input { *i } else { 0.0 };
                assert!((o - want).abs() < 1e-6, "bias {bias}: {o} vs {want}");
            }
        }
    }

    #[test]
    fn acm_half_gate_hand_case() {
        // C=1, zero-mean map, zero projection: gate sigmoid(0) = 0.5.
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.insert("acm.w", Tensor::zeros(&[1, 1]));
        ps.insert("acm.b", Tensor::zeros(&[1]));
        let x_val = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -1.0, 0.5, -0.5]).unwrap();
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let x = tape.leaf(x_val.clone());
        let y = acm(&mut tape, &bp, "acm", x).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(x_val.data()) {
            assert!((o - 0.5 * i).abs() < 1e-7);
        }
    }

    #[test]
    fn acm_never_amplifies() {
        let mut rng = Rng::new(3);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_acm(&mut ps, "acm", 6, &mut rng);
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let x_val: Tensor<f32> = Tensor::randn(&[3, 6, 5, 7], 2.0, &mut rng);
        let x = tape.leaf(x_val.clone());
        let y = acm(&mut tape, &bp, "acm", x).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(x_val.data()) {
            assert!(o.abs() <= i.abs() + 1e-7);
        }
    }

    #[test]
    fn acm_rejects_channel_mismatch() {
        let mut rng = Rng::new(4);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_acm(&mut ps, "acm", 4, &mut rng);
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let x = tape.leaf(Tensor::<f32>::zeros(&[1, 5, 3, 3]));
        assert!(acm(&mut tape, &bp, "acm", x).is_err());
    }

    #[test]
    fn hybrid_output_is_latent_wide_for_flow_and_depth() {
        for k in [1usize, 2] {
            let mut rng = Rng::new(30 + k as u64);
            let mut ps: ParamSet<f32> = ParamSet::new();
            init_hybrid(&mut ps, k, &mut rng);
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, &ps);
            let m1 = tape.leaf(Tensor::randn(&[2, 3, INPUT_H, INPUT_W], 0.5, &mut rng));
            let m2 = tape.leaf(Tensor::randn(&[2, k, INPUT_H, INPUT_W], 0.5, &mut rng));
            let z = hybrid_fuse_forward(&mut tape, &bp, m1, m2).unwrap();
            assert_eq!(tape.value(z).shape(), &[2, LATENT]);
            assert!(tape.value(z).all_finite());
        }
    }

    #[test]
    fn zeroed_second_stream_reduces_to_single_stream_path() {
        let mut rng = Rng::new(5);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_hybrid(&mut ps, 2, &mut rng);
        for name in ps.trainable_names() {
            if name.starts_with("s2.g") {
                let t = ps.get_mut(&name).unwrap();
                *t = Tensor::zeros(t.shape());
            }
        }
        let m1_val: Tensor<f32> = Tensor::randn(&[1, 3, INPUT_H, INPUT_W], 0.5, &mut rng);
        let m2_val: Tensor<f32> = Tensor::randn(&[1, 2, INPUT_H, INPUT_W], 0.5, &mut rng);

        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let m1 = tape.leaf(m1_val.clone());
        let m2 = tape.leaf(m2_val);
        let z = hybrid_fuse_forward(&mut tape, &bp, m1, m2).unwrap();
        let got = tape.value(z).clone();

        // Rebuild the stream-1-only recursion by hand on a fresh tape.
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let mut a1 = tape.leaf(m1_val);
        let mut trunk: Option<Var> = None;
        for i in 1..=STAGES.len() {
            a1 = stage_forward(&mut tape, &bp, &format!("s1.g{i}"), i - 1, a1);
            let g1 = acm(&mut tape, &bp, &format!("s1.acm{i}"), a1).unwrap();
            trunk = Some(match trunk {
                None => g1,
                Some(t) => {
                    let t = stage_forward(&mut tape, &bp, &format!("trunk.g{i}"), i - 1, t);
                    tape.add(t, g1)
                }
            });
        }
        let t = trunk.unwrap();
        let shape = tape.value(t).shape().to_vec();
        let cols: usize = shape[1..].iter().product();
        let flat = tape.reshape(t, &[shape[0], cols]);
        let want_var = tape.dense(flat, bp.var("trunk.fc.w"), Some(bp.var("trunk.fc.b")));
        let want = tape.value(want_var);

        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn swapping_streams_and_parameters_is_symmetric() {
        let mut rng = Rng::new(6);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_hybrid(&mut ps, 3, &mut rng);
        let m1_val: Tensor<f32> = Tensor::randn(&[1, 3, INPUT_H, INPUT_W], 0.5, &mut rng);
        let m2_val: Tensor<f32> = Tensor::randn(&[1, 3, INPUT_H, INPUT_W], 0.5, &mut rng);

        let mut swapped: ParamSet<f32> = ParamSet::new();
        for (name, value) in ps.iter() {
            let new_name = if let Some(rest) = name.strip_prefix("s1.") {
                format!("s2.{rest}")
            } else if let Some(rest) = name.strip_prefix("s2.") {
                format!("s1.{rest}")
            } else {
                name.to_string()
            };
            swapped.insert(new_name, value.clone());
        }

        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let m1 = tape.leaf(m1_val.clone());
        let m2 = tape.leaf(m2_val.clone());
        let za = hybrid_fuse_forward(&mut tape, &bp, m1, m2).unwrap();
        let za = tape.value(za).clone();

        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &swapped);
        let m2 = tape.leaf(m2_val);
        let m1 = tape.leaf(m1_val);
        let zb = hybrid_fuse_forward(&mut tape, &bp, m2, m1).unwrap();
        let zb = tape.value(zb).clone();

        for (a, b) in za.data().iter().zip(zb.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn both_streams_receive_gradients() {
        let mut rng = Rng::new(7);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_hybrid(&mut ps, 2, &mut rng);
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let m1 = tape.leaf(Tensor::randn(&[1, 3, INPUT_H, INPUT_W], 0.5, &mut rng));
        let m2 = tape.leaf(Tensor::randn(&[1, 2, INPUT_H, INPUT_W], 0.5, &mut rng));
        let z = hybrid_fuse_forward(&mut tape, &bp, m1, m2).unwrap();
        let loss = tape.mean_all(z);
        let grads = tape.backward(loss);
        for name in ["s1.g1.k", "s2.g1.k"] {
            let g = grads.dense(bp.var(name), ps.get(name).unwrap().shape());
            let norm: f32 = g.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(norm > 1e-8, "{name} gradient norm {norm}");
        }
    }

    #[test]
    fn hybrid_rejects_shape_mismatch() {
        let mut rng = Rng::new(8);
        let mut ps: ParamSet<f32> = ParamSet::new();
        init_hybrid(&mut ps, 2, &mut rng);
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        let m1 = tape.leaf(Tensor::<f32>::zeros(&[1, 3, INPUT_H, INPUT_W]));
        let m2 = tape.leaf(Tensor::<f32>::zeros(&[1, 2, INPUT_H, INPUT_W - 2]));
        assert!(hybrid_fuse_forward(&mut tape, &bp, m1, m2).is_err());
        let m3 = tape.leaf(Tensor::<f32>::zeros(&[2, 2, INPUT_H, INPUT_W]));
        assert!(hybrid_fuse_forward(&mut tape, &bp, m1, m3).is_err());
    }
}
