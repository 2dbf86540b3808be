use super::*;
use crate::autodiff::{numerical_gradient, relative_error};
use proptest::prelude::*;

fn config(d: usize, classes: usize) -> MagtConfig {
    let mut c = MagtConfig::new(d, classes);
    c.block.heads = 2;
    c.block.dropout = 0.0;
    c.max_speakers = 4;
    c
}

fn sequence(u: usize, d: usize, seed: u64) -> SequenceBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = [0, 1, 2].map(|_| Mat::gaussian(u, d, 1.0, &mut rng));
    let speakers = (0..u).map(|i| (i % 2) as u32).collect();
    let labels = (0..u).map(|i| i % 3).collect();
    SequenceBatch::new(format!("c{seed}"), features, speakers, labels).unwrap()
}

#[test]
fn output_shapes_and_probabilities() {
    let model = MagtModel::<f64>::new(config(8, 3), 1).unwrap();
    let seq = sequence(5, 8, 2);
    let out = magt_forward(&seq, &model).unwrap();
    assert_eq!(out.fused.shape(), (5, 8));
    assert_eq!(out.logits.shape(), (5, 3));
    assert_eq!(out.aux_logits.len(), 3);
    assert_eq!(out.gate_alphas.len(), 6);
    for i in 0..5 {
        let p: f64 = out.logits.softmax_rows().row(i).iter().sum();
        assert!((p - 1.0).abs() < 1e-6);
    }
    assert_eq!(out.predictions().len(), 5);
}

#[test]
fn gate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = Mat::<f64>::gaussian(4, 6, 1.0, &mut rng);
    let half = gate(&h, &Mat::zeros(6, 6), &Mat::zeros(1, 6)).unwrap();
    assert_eq!(half, h.map(|x| 0.5 * x));
    let w = Mat::<f64>::uniform(6, 6, 1.0 / 6f64.sqrt(), &mut rng);
    let open = gate(&h, &w, &Mat::full(1, 6, 30.0)).unwrap();
    assert!(open.zip_map(&h, |a, b| a - b).unwrap().max_abs() < 1e-9);
    let zero = gate(&Mat::<f64>::zeros(3, 6), &w, &Mat::full(1, 6, 2.0)).unwrap();
    assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    assert!(gate(&h, &Mat::zeros(5, 6), &Mat::zeros(1, 6)).is_err());
}

#[test]
fn closed_gates_reduce_to_text_self_path() {
    let mut model = MagtModel::<f64>::new(config(8, 3), 4).unwrap();
    for gt in model.net.gates().map(|g| g.linear.bias.unwrap()) {
        model.params.set(gt, Mat::full(1, 8, -30.0)).unwrap();
    }
    let seq = sequence(4, 8, 5);
    let full = magt_forward(&seq, &model).unwrap();
    let mut ablated = model.clone();
    ablated.config.text_self_only = true;
    let text_only = magt_forward(&seq, &ablated).unwrap();
    let diff = full
        .logits
        .zip_map(&text_only.logits, |a, b| a - b)
        .unwrap();
    assert!(diff.max_abs() < 1e-6, "{}", diff.max_abs());
}

#[test]
fn single_utterance_attends_to_itself() {
    let model = MagtModel::<f64>::new(config(8, 3), 6).unwrap();
    let seq = sequence(1, 8, 7);
    let mut g = Graph::with_params(&model.params);
    let pe = g.constant(positional_embedding(1, 8).unwrap());
    let src = g.constant(seq.features[1].clone());
    let h = g.add(src, pe).unwrap();
    let q = g.constant(seq.features[0].clone());
    let att = anchor_attend(
        &mut g,
        &model.net.ta.blocks[0],
        q,
        h,
        &[true],
        &mut RunMode::Eval,
    )
    .unwrap();
    assert_eq!(g.shape(att.out), (1, 8));
    for w in att.weights {
        assert_eq!(g.value(w).as_slice(), &[1.0]);
    }
}

#[test]
fn speaker_relabeling_is_invariant() {
    let model = MagtModel::<f64>::new(config(8, 3), 8).unwrap();
    let seq = sequence(5, 8, 9);
    let base = magt_forward(&seq, &model).unwrap();

    // speaker s becomes perm[s]; table row perm[s] takes the old row s
    let perm = [2u32, 0, 3, 1];
    let mut relabeled = seq.clone();
    relabeled.speaker_ids = seq.speaker_ids.iter().map(|&s| perm[s as usize]).collect();
    let mut moved = model.clone();
    let table = model.params.get(model.net.speaker_table).clone();
    let mut new_table = table.clone();
    for (s, &p) in perm.iter().enumerate() {
        new_table.row_mut(p as usize).copy_from_slice(table.row(s));
    }
    moved
        .params
        .set(model.net.speaker_table, new_table)
        .unwrap();
    let out = magt_forward(&relabeled, &moved).unwrap();
    assert_eq!(out.logits, base.logits);
    assert_eq!(out.fused, base.fused);
}

#[test]
fn padding_leaves_real_positions_unchanged() {
    let model = MagtModel::<f64>::new(config(8, 3), 10).unwrap();
    let seq = sequence(4, 8, 11);
    let base = magt_forward(&seq, &model).unwrap();
    let padded = magt_forward(&seq.padded_to(7), &model).unwrap();
    assert_eq!(padded.logits.rows(), 7);
    for i in 0..4 {
        for c in 0..3 {
            assert!((base.logits.get(i, c) - padded.logits.get(i, c)).abs() < 1e-6);
        }
    }
    let batch = pad_batch(&[sequence(2, 8, 1), sequence(5, 8, 2)]);
    assert!(batch.iter().all(|b| b.len() == 5));
    assert_eq!(batch[0].real_positions(), vec![0, 1]);
}

#[test]
fn speaker_overflow_is_input_error() {
    let model = MagtModel::<f64>::new(config(8, 3), 0).unwrap();
    let mut seq = sequence(2, 8, 0);
    seq.speaker_ids[1] = 4;
    assert!(matches!(magt_forward(&seq, &model), Err(Error::Input(_))));
}

fn loss_at(model: &MagtModel<f64>, batch: &[SequenceBatch<f64>], w: &Stage2Weights) -> f64 {
    let mut g = Graph::with_params(&model.params);
    let t = stage2_objective(&mut g, &model.net, batch, w, &mut RunMode::Eval).unwrap();
    g.scalar(t.total)
}

#[test]
fn stage2_loss_gradient_matches_finite_differences() {
    let model = MagtModel::<f64>::new(config(8, 3), 12).unwrap();
    let batch = [sequence(3, 8, 13), sequence(3, 8, 14)];
    let w = Stage2Weights {
        alpha: 0.7,
        beta: 0.8,
        tau: 2.0,
    };
    let mut g = Graph::with_params(&model.params);
    let t = stage2_objective(&mut g, &model.net, &batch, &w, &mut RunMode::Eval).unwrap();
    let grads = g.backward(t.total).unwrap();
    let mut ids = vec![
        model.net.classifier.linear.weight,
        model.net.classifier.linear.bias.unwrap(),
    ];
    for gt in model.net.gates() {
        ids.push(gt.linear.weight);
        ids.push(gt.linear.bias.unwrap());
    }
    for id in ids {
        let analytic = grads.param(id).unwrap().clone();
        let numeric = numerical_gradient(model.params.get(id), 1e-5, |p| {
            let mut m = model.clone();
            m.params.set(id, p.clone()).unwrap();
            loss_at(&m, &batch, &w)
        });
        let err = relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-3, "{}: {err}", model.params.name(id));
    }
}

#[test]
fn zero_coefficients_give_cross_entropy() {
    let model = MagtModel::<f64>::new(config(8, 3), 15).unwrap();
    let batch = [sequence(3, 8, 16), sequence(2, 8, 17)];
    let w = Stage2Weights {
        alpha: 0.0,
        beta: 0.0,
        tau: 2.0,
    };
    let mut g = Graph::with_params(&model.params);
    let t = stage2_objective(&mut g, &model.net, &batch, &w, &mut RunMode::Eval).unwrap();
    assert_eq!(t.total, t.ce);
    assert!(t.kd_audio.is_some() && t.kd_video.is_some());
    assert_eq!(t.labels.len(), 5);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.magc");
    let model = MagtModel::<f64>::new(config(8, 3), 18).unwrap();
    model.save(&path, "abc").unwrap();
    let (back, hash) = MagtModel::<f64>::load(config(8, 3), &path).unwrap();
    assert_eq!(hash, "abc");
    assert_eq!(back.params.digest(), model.params.digest());
    let seq = sequence(3, 8, 19);
    assert_eq!(
        magt_forward(&seq, &back).unwrap(),
        magt_forward(&seq, &model).unwrap()
    );
    let mut other = config(8, 3);
    other.blocks_per_pair = 2;
    assert!(MagtModel::<f64>::load(other, &path).is_err());
}

fn concat_config() -> ConcatConfig {
    ConcatConfig {
        d_model: 8,
        hidden: 6,
        classes: 3,
        dropout: 0.1,
    }
}

#[test]
fn concat_shapes_and_eval_determinism() {
    let model = ConcatModel::<f64>::new(concat_config(), 20).unwrap();
    let seq = sequence(4, 8, 21);
    let a = concat_forward(&seq, &model).unwrap();
    assert_eq!(a.shape(), (4, 3));
    assert_eq!(a, concat_forward(&seq, &model).unwrap());
}

/// Recomposes the concat forward pass by hand from the module's parameters.
fn concat_oracle(model: &ConcatModel<f64>, feats: &[Mat<f64>; 3]) -> Mat<f64> {
    let p = &model.params;
    let net = &model.net;
    let lin =
        |l: &Linear, x: &Mat<f64>| head_logits(p.get(l.weight), p.get(l.bias.unwrap()), x).unwrap();
    let slot = |m: usize| {
        let h = lin(&net.input[m], &feats[m]);
        let (ga, be) = (p.get(net.norm[m].gamma), p.get(net.norm[m].beta));
        let mut n = h.clone();
        for r in 0..h.rows() {
            let row = h.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
            for c in 0..row.len() {
                n.set(
                    r,
                    c,
                    (row[c] - mean) / (var + 1e-5).sqrt() * ga.get(0, c) + be.get(0, c),
                );
            }
        }
        lin(&net.shared, &n).map(|x| x.max(0.0))
    };
    let s = [slot(0), slot(1), slot(2)];
    let w = p.get(net.out.weight);
    let hidden = s[0].cols();
    let mut out = Mat::zeros(feats[0].rows(), w.rows());
    for i in 0..out.rows() {
        for c in 0..w.rows() {
            let mut acc = p.get(net.out.bias.unwrap()).get(0, c);
            for (k, sk) in s.iter().enumerate() {
                for j in 0..hidden {
                    acc += w.get(c, k * hidden + j) * sk.get(i, j);
                }
            }
            out.set(i, c, acc);
        }
    }
    out
}

#[test]
fn concat_matches_manual_recomposition_under_swap() {
    let model = ConcatModel::<f64>::new(concat_config(), 22).unwrap();
    let seq = sequence(3, 8, 23);
    let got = concat_forward(&seq, &model).unwrap();
    let want = concat_oracle(&model, &seq.features);
    assert!(got.zip_map(&want, |a, b| a - b).unwrap().max_abs() < 1e-12);

    let mut swapped = seq.clone();
    swapped.features.swap(1, 2);
    let got = concat_forward(&swapped, &model).unwrap();
    let want = concat_oracle(&model, &swapped.features);
    assert!(got.zip_map(&want, |a, b| a - b).unwrap().max_abs() < 1e-12);
    assert_ne!(got, concat_forward(&seq, &model).unwrap());
}

proptest! {
    #[test]
    fn gate_shrinks_every_entry(seed in 0u64..500, bias in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Mat::<f64>::gaussian(3, 4, 2.0, &mut rng);
        let w = Mat::<f64>::gaussian(4, 4, 0.5, &mut rng);
        let b = Mat::full(1, 4, bias);
        let out = gate(&h, &w, &b).unwrap();
        let alpha = head_logits(&w, &b, &h).unwrap().map(sigmoid);
        prop_assert!(alpha.as_slice().iter().all(|&a| a > 0.0 && a < 1.0));
        for (o, x) in out.as_slice().iter().zip(h.as_slice()) {
            prop_assert!(o.abs() <= x.abs());
        }
    }
}
