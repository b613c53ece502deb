//! Scratch diagnostics, not part of the suite.

use flowsteer::data::{channel_stats, load_dataset, prepare_dataset, CropSpec, SplitView};
use flowsteer::flow::FlowParams;
use flowsteer::model::{encode_step, init_model, EncoderKind, Head, Modality, ModelConfig};
use flowsteer::params::{BoundParams, ParamSet};
use flowsteer::temporal::rollout;
use flowsteer::training::{fold_split, make_folds, BatchSource};
use flowsteer::{Tape, Tensor};

#[test]
#[ignore]
fn probe_signal_chain() {
    let seqs = load_dataset(std::path::Path::new("/tmp/ab")).unwrap();
    let ds = prepare_dataset::<f32>(
        &seqs,
        Modality::Flow,
        &CropSpec::default(),
        &FlowParams::default(),
    )
    .unwrap();
    let plan = make_folds(ds.seqs.len(), 10).unwrap();
    let split = fold_split(&plan, 0).unwrap();
    let stats = channel_stats(&ds, &split.train).unwrap();
    let view = SplitView::new(&ds, &split.train, 16, 1, stats).unwrap();

    let cfg = ModelConfig {
        encoder: EncoderKind::Cnn,
        head: Head::Ncp,
        modality: Modality::Flow,
        seed: 1,
        ..ModelConfig::default()
    };
    let params: ParamSet<f32> = init_model(&cfg).unwrap();

    let idx: Vec<usize> = (0..10).map(|i| (i * 97) % view.num_windows()).collect();
    let batch = view.batch(&idx).unwrap();

    let mut tape = Tape::new();
    let bp = BoundParams::bind(&mut tape, &params);

    // Latent stats + label correlation on the middle frame.
    let t = 8usize;
    let (z, _) = encode_step(
        &mut tape,
        &bp,
        &cfg,
        &batch.rgb[t],
        batch.modality.as_ref().map(|m| &m[t]),
        None,
    )
    .unwrap();
    let zt = tape.value(z).clone();
    let labels: Vec<f64> = batch.labels[t].data().iter().map(|v| *v as f64).collect();
    let n = zt.shape()[0];
    let d = zt.shape()[1];
    let mut best_corr = 0.0f64;
    let mut max_std = 0.0f64;
    let mut mean_std = 0.0f64;
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| zt.data()[i * d + j] as f64).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let lm = labels.iter().sum::<f64>() / n as f64;
        let lv = labels.iter().map(|v| (v - lm) * (v - lm)).sum::<f64>() / n as f64;
        let cov = col
            .iter()
            .zip(&labels)
            .map(|(a, b)| (a - mean) * (b - lm))
            .sum::<f64>()
            / n as f64;
        let corr = cov / (var * lv).sqrt().max(1e-12);
        if corr.abs() > best_corr {
            best_corr = corr.abs();
        }
        max_std = max_std.max(var.sqrt());
        mean_std += var.sqrt() / d as f64;
    }
    println!(
        "latent: dims {d}, per-dim std mean {mean_std:.4} max {max_std:.4}, best |corr| with label {best_corr:.4}"
    );

    // Motor sensitivity: rollout on one window's features vs zeroed-flow.
    let one = view.batch(&[0]).unwrap();
    let mut feats = Vec::new();
    let mut feats_zeroed = Vec::new();
    for t in 0..16 {
        let (z, _) = encode_step(
            &mut tape,
            &bp,
            &cfg,
            &one.rgb[t],
            one.modality.as_ref().map(|m| &m[t]),
            None,
        )
        .unwrap();
        feats.push(tape.value(z).clone());
        let zeros = Tensor::<f32>::zeros(one.modality.as_ref().unwrap()[t].shape());
        let (z2, _) =
            encode_step(&mut tape, &bp, &cfg, &one.rgb[t], Some(&zeros), None).unwrap();
        feats_zeroed.push(tape.value(z2).clone());
    }
    let stack = |fs: &[Tensor<f32>]| -> Tensor<f32> {
        let mut data = Vec::new();
        for f in fs {
            data.extend_from_slice(f.data());
        }
        Tensor::from_vec(&[fs.len(), 32], data).unwrap()
    };
    let fa = stack(&feats);
    let fb = stack(&feats_zeroed);
    let ya = rollout(&mut tape, &bp, Head::Ncp, &fa).unwrap();
    let yb = rollout(&mut tape, &bp, Head::Ncp, &fb).unwrap();
    let mut ys = Vec::new();
    let mut dy = 0.0f64;
    for (a, b) in ya.iter().zip(&yb) {
        let av = tape.value(*a).data()[0] as f64;
        let bv = tape.value(*b).data()[0] as f64;
        ys.push(av);
        dy = dy.max((av - bv).abs());
    }
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let ystd =
        (ys.iter().map(|v| (v - ym) * (v - ym)).sum::<f64>() / ys.len() as f64).sqrt();
    println!(
        "motor: mean {ym:.4}, std over 16 steps {ystd:.4}, max shift from zeroing flow {dy:.4}"
    );

    let mut zshift = 0.0f64;
    for (a, b) in feats[8].data().iter().zip(feats_zeroed[8].data()) {
        zshift = zshift.max((*a - *b).abs() as f64);
    }
    println!("latent max shift from zeroing flow {zshift:.4}");
}
