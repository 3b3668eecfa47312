use super::*;
use crate::rng::Rng;

fn tiny(levels: usize, merging: Merging) -> ModelConfig {
    ModelConfig { levels, base_channels: 2, merging, seed: 7, ..ModelConfig::default() }
}

fn random_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn upsampled(t: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return t.clone();
    }
    let mut tape = Tape::new();
    let v = tape.leaf(t.clone(), false);
    let u = tape.bilinear_upsample(v, factor).unwrap();
    tape.value(u).clone()
}

fn set(model: &mut Model, name: &str, value: f32) {
    model.param_mut(name).unwrap_or_else(|| panic!("no parameter {name}")).data_mut().fill(value);
}

#[test]
fn config_validation() {
    assert!(Model::build(tiny(7, Merging::Attention)).is_err());
    assert!(Model::build(tiny(1, Merging::Attention)).is_err());
    assert!(Model::build(ModelConfig { use_dem: true, ..tiny(4, Merging::Attention) }).is_err());
    assert!(Model::build(ModelConfig { base_channels: 0, ..tiny(3, Merging::Attention) }).is_err());
    assert!(Model::build(ModelConfig { use_dem: true, ..tiny(5, Merging::Attention) }).is_ok());
}

#[test]
fn channel_widths_cap_at_sixteen_times_base() {
    let c = ModelConfig::default();
    let widths: Vec<usize> = (0..6).map(|k| c.channels(k)).collect();
    assert_eq!(widths, [16, 32, 64, 128, 256, 256]);
}

#[test]
fn output_shapes() {
    let model = Model::build(tiny(3, Merging::Attention)).unwrap();
    let out = model.predict(&random_input(2, 2, 16, 12, 1), None).unwrap();
    assert_eq!(out.seg_logits.shape(), [2, 1, 16, 12]);
    assert_eq!(out.edge_logits.shape(), [2, 1, 16, 12]);
    let side: Vec<&[usize]> = out.side_seg.iter().map(Tensor::shape).collect();
    assert_eq!(side, [&[2, 1, 16, 12][..], &[2, 1, 8, 6], &[2, 1, 4, 3]]);
    assert_eq!(out.attn_seg.len(), 3);
    assert_eq!(out.attn_edge[2].shape(), [2, 1, 16, 12]);
}

#[test]
fn rejects_bad_inputs() {
    let model = Model::build(tiny(3, Merging::Attention)).unwrap();
    assert!(model.predict(&random_input(1, 2, 14, 16, 1), None).is_err());
    assert!(model.predict(&random_input(1, 3, 16, 16, 1), None).is_err());
    let dem = Tensor::zeros(&[1, 1, 1, 1]);
    assert!(model.predict(&random_input(1, 2, 16, 16, 1), Some(&dem)).is_err());

    let dem_model = Model::build(ModelConfig { use_dem: true, ..tiny(5, Merging::Attention) }).unwrap();
    let x = random_input(1, 2, 32, 32, 2);
    assert!(dem_model.predict(&x, None).is_err());
    assert!(dem_model.predict(&x, Some(&Tensor::zeros(&[1, 1, 4, 4]))).is_err());
    let out = dem_model.predict(&x, Some(&random_input(1, 1, 2, 2, 3))).unwrap();
    assert_eq!(out.seg_logits.shape(), [1, 1, 32, 32]);
}

#[test]
fn dem_changes_the_output() {
    let model = Model::build(ModelConfig { use_dem: true, ..tiny(5, Merging::Attention) }).unwrap();
    let x = random_input(1, 2, 32, 32, 2);
    let a = model.predict(&x, Some(&Tensor::zeros(&[1, 1, 2, 2]))).unwrap();
    let b = model.predict(&x, Some(&Tensor::full(&[1, 1, 2, 2], 3.0))).unwrap();
    assert_ne!(a.seg_logits, b.seg_logits);
}

#[test]
fn forward_is_deterministic() {
    for merging in [Merging::None, Merging::Learned, Merging::Attention] {
        let x = random_input(2, 2, 16, 16, 3);
        let a = Model::build(tiny(3, merging)).unwrap().predict(&x, None).unwrap();
        let b = Model::build(tiny(3, merging)).unwrap().predict(&x, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn seed_changes_weights() {
    let a = Model::build(tiny(3, Merging::Attention)).unwrap();
    let b = Model::build(ModelConfig { seed: 8, ..tiny(3, Merging::Attention) }).unwrap();
    assert_ne!(a.params()[0], b.params()[0]);
}

#[test]
fn kaiming_scale() {
    let model = Model::build(ModelConfig { base_channels: 16, ..tiny(3, Merging::Attention) }).unwrap();
    let w = &model.params()[model.param_index("enc1.conv2.weight").unwrap()];
    let n = w.len() as f64;
    let var = w.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
    let expected = 2.0 / (32.0 * 9.0);
    assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
    let b = &model.params()[model.param_index("side_seg0.bias").unwrap()];
    assert!(b.data().iter().all(|&v| v == 0.0));
}

#[test]
fn no_merging_is_level_zero_side_output() {
    let model = Model::build(tiny(3, Merging::None)).unwrap();
    let out = model.predict(&random_input(1, 2, 16, 16, 4), None).unwrap();
    assert_eq!(out.seg_logits, out.side_seg[0]);
    assert_eq!(out.edge_logits, out.side_edge[0]);
    assert!(out.attn_seg.is_empty());
}

#[test]
fn uniform_attention_averages_side_outputs() {
    let mut model = Model::build(tiny(3, Merging::Attention)).unwrap();
    model.zero_attention();
    let out = model.predict(&random_input(1, 2, 16, 16, 5), None).unwrap();
    for (merged, sides) in [(&out.seg_logits, &out.side_seg), (&out.edge_logits, &out.side_edge)] {
        let ups: Vec<Tensor> = sides.iter().enumerate().map(|(k, s)| upsampled(s, 1 << k)).collect();
        for i in 0..merged.len() {
            let mean = ups.iter().map(|u| u.data()[i]).sum::<f32>() / 3.0;
            assert!((merged.data()[i] - mean).abs() < 1e-5);
        }
    }
    for a in &out.attn_seg {
        assert!(a.data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-6));
    }
}

#[test]
fn hand_evaluated_attention_merge() {
    // Side logits 2 and 0, attention logits ln 3 and 0: weights 3/4 and 1/4.
    let mut model = Model::build(tiny(2, Merging::Attention)).unwrap();
    for name in ["side_seg0", "side_seg1", "attn_seg0", "attn_seg1"] {
        set(&mut model, &format!("{name}.weight"), 0.0);
    }
    set(&mut model, "side_seg0.bias", 2.0);
    set(&mut model, "side_seg1.bias", 0.0);
    set(&mut model, "attn_seg0.bias", 3f32.ln());
    set(&mut model, "attn_seg1.bias", 0.0);
    let out = model.predict(&random_input(1, 2, 8, 8, 6), None).unwrap();
    assert!(out.seg_logits.data().iter().all(|&v| (v - 1.5).abs() < 1e-6));
}

#[test]
fn attention_merge_is_convex() {
    for seed in 0..4 {
        let model = Model::build(ModelConfig { seed, ..tiny(3, Merging::Attention) }).unwrap();
        let out = model.predict(&random_input(2, 2, 16, 16, 100 + seed), None).unwrap();
        let ups: Vec<Tensor> = out.side_seg.iter().enumerate().map(|(k, s)| upsampled(s, 1 << k)).collect();
        for i in 0..out.seg_logits.len() {
            let vals = ups.iter().map(|u| u.data()[i]);
            let lo = vals.clone().fold(f32::INFINITY, f32::min);
            let hi = vals.fold(f32::NEG_INFINITY, f32::max);
            let m = out.seg_logits.data()[i];
            assert!(lo - 1e-5 <= m && m <= hi + 1e-5, "{lo} <= {m} <= {hi}");
        }
    }
}

#[test]
fn learned_merge_with_softmax_weights_equals_constant_attention() {
    let logits = [0.3f32, -1.2, 0.8];
    let z: f32 = logits.iter().map(|v| v.exp()).sum();
    let weights: Vec<f32> = logits.iter().map(|v| v.exp() / z).collect();

    let mut learned = Model::build(tiny(3, Merging::Learned)).unwrap();
    let mut attention = Model::build(tiny(3, Merging::Attention)).unwrap();
    for task in ["seg", "edge"] {
        learned.param_mut(&format!("merge_{task}.weight")).unwrap().data_mut().copy_from_slice(&weights);
        for (k, &c) in logits.iter().enumerate() {
            set(&mut attention, &format!("attn_{task}{k}.weight"), 0.0);
            set(&mut attention, &format!("attn_{task}{k}.bias"), c);
        }
    }
    let x = random_input(1, 2, 16, 16, 9);
    let a = learned.predict(&x, None).unwrap();
    let b = attention.predict(&x, None).unwrap();
    assert_eq!(a.side_seg, b.side_seg);
    for (l, r) in [(&a.seg_logits, &b.seg_logits), (&a.edge_logits, &b.edge_logits)] {
        for (u, v) in l.data().iter().zip(r.data()) {
            assert!((u - v).abs() < 1e-5, "{u} vs {v}");
        }
    }
}

#[test]
fn probability_space_merge_stays_within_side_probabilities() {
    let config = ModelConfig { merge_space: MergeSpace::Probabilities, ..tiny(3, Merging::Attention) };
    let model = Model::build(config).unwrap();
    let out = model.predict(&random_input(1, 2, 16, 16, 10), None).unwrap();
    let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
    let ups: Vec<Tensor> = out.side_seg.iter().enumerate().map(|(k, s)| upsampled(s, 1 << k)).collect();
    for i in 0..out.seg_logits.len() {
        let p = sig(out.seg_logits.data()[i]);
        let lo = ups.iter().map(|u| sig(u.data()[i])).fold(1.0, f32::min);
        let hi = ups.iter().map(|u| sig(u.data()[i])).fold(0.0, f32::max);
        assert!(lo - 1e-5 <= p && p <= hi + 1e-5);
    }
}

fn grad_norm(tape: &Tape, v: Var) -> f32 {
    tape.grad(v).map(|g| g.data().iter().map(|x| x.abs()).sum()).unwrap_or(0.0)
}

#[test]
fn final_outputs_only_reach_level_zero_side_layers_without_merging() {
    let model = Model::build(tiny(3, Merging::None)).unwrap();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &random_input(2, 2, 16, 16, 11), None, Mode::Train, false).unwrap();
    let a = tape.sum_all(out.seg_logits).unwrap();
    let b = tape.sum_all(out.edge_logits).unwrap();
    let root = tape.add(a, b).unwrap();
    tape.backward(root).unwrap();
    for (name, &v) in model.param_names().iter().zip(&out.params) {
        let g = grad_norm(&tape, v);
        if name.starts_with("side_seg1") || name.starts_with("side_seg2") || name.starts_with("side_edge1") || name.starts_with("side_edge2") {
            assert_eq!(g, 0.0, "{name}");
        }
    }
    assert!(grad_norm(&tape, out.params[model.param_index("side_seg0.weight").unwrap()]) > 0.0);
}

#[test]
fn side_supervision_reaches_every_side_layer() {
    let model = Model::build(tiny(3, Merging::Attention)).unwrap();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &random_input(2, 2, 16, 16, 12), None, Mode::Train, false).unwrap();
    let mut rng = Rng::new(5);
    let mut terms = Vec::new();
    for &s in out.side_seg.iter().chain(&out.side_edge).chain([&out.seg_logits, &out.edge_logits]) {
        let target: Vec<bool> = (0..tape.value(s).len()).map(|_| rng.uniform() < 0.5).collect();
        terms.push(tape.balanced_bce_logits(s, &target, 1e-6).unwrap());
    }
    let mut root = terms[0];
    for &t in &terms[1..] {
        root = tape.add(root, t).unwrap();
    }
    tape.backward(root).unwrap();
    for (name, &v) in model.param_names().iter().zip(&out.params) {
        if (name.starts_with("side_") || name.starts_with("attn_"))
            && name.ends_with("weight") {
                assert!(grad_norm(&tape, v) > 0.0, "{name}");
            }
    }
}

#[test]
fn train_mode_reports_batch_stats() {
    let mut model = Model::build(tiny(3, Merging::Attention)).unwrap();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &random_input(2, 2, 16, 16, 13), None, Mode::Train, false).unwrap();
    assert_eq!(out.bn_stats.len(), model.running_stats().len());
    let before = model.running_stats().to_vec();
    model.update_running_stats(&out.bn_stats);
    assert_ne!(before, model.running_stats());
    let (i, s) = &out.bn_stats[0];
    let expected = 0.9 * before[*i].mean[0] + 0.1 * s.mean[0];
    assert!((model.running_stats()[*i].mean[0] - expected).abs() < 1e-7);
}

#[test]
fn input_normalization_is_applied() {
    let mut model = Model::build(tiny(3, Merging::Attention)).unwrap();
    let x = random_input(1, 2, 16, 16, 14);
    let reference = model.predict(&x, None).unwrap();
    model.input_norm = ChannelNorm { mean: vec![1.0, -2.0], std: vec![2.0, 0.5] };
    let mut shifted = x.clone();
    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
        *v = if i < 256 { *v * 2.0 + 1.0 } else { *v * 0.5 - 2.0 };
    }
    let out = model.predict(&shifted, None).unwrap();
    for (a, b) in out.seg_logits.data().iter().zip(reference.seg_logits.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn channel_norm_fit() {
    let a = [1.0f32, 3.0, 10.0, 10.0];
    let b = [5.0f32, 7.0, 10.0, 10.0];
    let norm = ChannelNorm::fit(2, [&a[..], &b[..]]);
    assert_eq!(norm.mean, [4.0, 10.0]);
    assert!((norm.std[0] - 5f32.sqrt()).abs() < 1e-6);
    assert_eq!(norm.std[1], 1.0);
}

fn perturbed(config: ModelConfig) -> Model {
    let mut model = Model::build(config).unwrap();
    let mut rng = Rng::new(99);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.normal() as f32 * 0.01;
        }
    }
    for s in model.running_stats_mut() {
        for (m, v) in s.mean.iter_mut().zip(s.var.iter_mut()) {
            *m = rng.normal() as f32;
            *v = rng.uniform() as f32 + 0.5;
        }
    }
    model.input_norm = ChannelNorm { mean: vec![0.25, -0.5], std: vec![1.5, 3.0] };
    model.dem_norm = ChannelNorm { mean: vec![12.0], std: vec![4.0] };
    model
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for config in [tiny(3, Merging::Attention), tiny(2, Merging::Learned), ModelConfig { use_dem: true, ..tiny(5, Merging::None) }] {
        let model = perturbed(config);
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());
        assert_eq!(back.running_stats(), model.running_stats());
        assert_eq!(back.input_norm, model.input_norm);
        assert_eq!(back.dem_norm, model.dem_norm);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let model = perturbed(tiny(3, Merging::Attention));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hedu");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let x = random_input(1, 2, 16, 16, 15);
    assert_eq!(model.predict(&x, None).unwrap(), back.predict(&x, None).unwrap());
}

#[test]
fn checkpoint_rejects_corruption() {
    let model = perturbed(tiny(2, Merging::Attention));
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    assert!(buf.starts_with(b"HEDU1"));
    assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&bad[..]).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(read_checkpoint(&extra[..]).is_err());
}
