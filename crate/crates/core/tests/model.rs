use amss_core::data::LabeledBatch;
use amss_core::gradcheck::{finite_diff_gradient, max_relative_error};
use amss_core::model::{build_model, Fusion, Head, ModelSpec, MultiModalModel};
use amss_core::params::Owner;
use amss_core::tensor::Tensor;
use amss_core::verify::{perturb_biases, random_batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn param(model: &MultiModalModel, name: &str) -> Vec<f64> {
    let id = model.params().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params().get(id).data().to_vec()
}

/// `W x + b` for a row-major `out×in` weight.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Encoder features of one sample, recomputed from raw parameters: every
/// encoder layer is linear followed by ReLU.
fn encode(model: &MultiModalModel, k: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for depth in 0..model.spec().encoder_widths[k].len() {
        let w = param(model, &format!("m{k}.enc{depth}.weight"));
        let b = param(model, &format!("m{k}.enc{depth}.bias"));
        h = affine(&w, &b, &h).into_iter().map(|v| v.max(0.0)).collect();
    }
    h
}

/// Joint prediction recomputed independently of the library's forward pass.
fn oracle_joint(model: &MultiModalModel, batch: &LabeledBatch, i: usize) -> Vec<f64> {
    let kk = model.modalities();
    let feats: Vec<Vec<f64>> = (0..kk).map(|k| encode(model, k, batch.features[k].row(i))).collect();
    match model.spec().fusion {
        Fusion::Concat => {
            let cat: Vec<f64> = feats.concat();
            softmax(&affine(&param(model, "joint.cls.weight"), &param(model, "joint.cls.bias"), &cat))
        }
        Fusion::Sum | Fusion::Weight => {
            let weights = if model.spec().fusion == Fusion::Sum {
                vec![1.0 / kk as f64; kk]
            } else {
                softmax(&param(model, "fusion.logits"))
            };
            let mut out = vec![0.0; model.classes()];
            for k in 0..kk {
                let q = softmax(&affine(
                    &param(model, &format!("m{k}.cls.weight")),
                    &param(model, &format!("m{k}.cls.bias")),
                    &feats[k],
                ));
                for c in 0..out.len() {
                    out[c] += weights[k] * q[c];
                }
            }
            out
        }
    }
}

fn fixture(fusion: Fusion, seed: u64) -> (MultiModalModel, LabeledBatch) {
    let mut r = rng(seed);
    let spec = ModelSpec::uniform(vec![3, 5], vec![6, 4], fusion, 3);
    let mut model = build_model(&spec, &mut r).unwrap();
    perturb_biases(&mut model, &mut r);
    let batch = random_batch(&spec.input_dims, 3, 7, &mut r).unwrap();
    (model, batch)
}

#[test]
fn forward_matches_independent_recomputation() {
    for fusion in [Fusion::Concat, Fusion::Sum, Fusion::Weight] {
        let (model, batch) = fixture(fusion, 3);
        let probs = model.predict_joint(&batch).unwrap();
        let labels = batch.label_indices();
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let q = oracle_joint(&model, &batch, i);
            for (a, b) in probs.row(i).iter().zip(&q) {
                assert!((a - b).abs() < 1e-12, "{fusion:?} row {i}: {a} vs {b}");
            }
            loss -= q[labels[i]].ln();
        }
        let (got, _) = model.forward(&batch).unwrap();
        assert!((got - loss / batch.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn concat_unimodal_head_uses_its_own_block_of_the_classifier() {
    let (model, batch) = fixture(Fusion::Concat, 5);
    let w = param(&model, "joint.cls.weight");
    let b = param(&model, "joint.cls.bias");
    let widths = [model.spec().feature_width(0), model.spec().feature_width(1)];
    let total = widths[0] + widths[1];
    for k in 0..2 {
        let offset = if k == 0 { 0 } else { widths[0] };
        // Only the columns of modality k contribute: block-diagonal view.
        let block: Vec<f64> = (0..model.classes())
            .flat_map(|c| w[c * total + offset..c * total + offset + widths[k]].to_vec())
            .collect();
        let probs = model.predict_unimodal(&batch, k).unwrap();
        for i in 0..batch.len() {
            let q = softmax(&affine(&block, &b, &encode(&model, k, batch.features[k].row(i))));
            for (x, y) in probs.row(i).iter().zip(&q) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..3 {
        for fusion in [Fusion::Concat, Fusion::Sum, Fusion::Weight] {
            let (model, batch) = fixture(fusion, seed);
            for head in [Head::Joint, Head::Unimodal(0), Head::Unimodal(1)] {
                let (_, cache) = model.forward_head(&batch, head).unwrap();
                let analytic = model.backward(cache).unwrap();
                let numeric =
                    finite_diff_gradient(|p| model.loss_with_params(p, &batch, head), model.params(), 1e-5).unwrap();
                let err = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-5, "{fusion:?} {head:?}: {err:.3e}");
            }
        }
    }
}

#[test]
fn classifier_bias_gradient_is_mean_of_q_minus_y() {
    let (model, batch) = fixture(Fusion::Concat, 11);
    let (_, cache) = model.forward(&batch).unwrap();
    let probs = cache.probs().clone();
    let grads = model.backward(cache).unwrap();
    let g = grads.get(model.params().find("joint.cls.bias").unwrap()).data().to_vec();
    let b = batch.len() as f64;
    for c in 0..model.classes() {
        let expect: f64 = (0..batch.len())
            .map(|i| probs.get(i, c) - batch.labels.get(i, c))
            .sum::<f64>()
            / b;
        assert!((g[c] - expect).abs() < 1e-14);
    }
    // Weight gradient is (q − y)ᵀ h / B with h the concatenated features.
    let gw = grads.get(model.params().find("joint.cls.weight").unwrap()).data().to_vec();
    let feats: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| [encode(&model, 0, batch.features[0].row(i)), encode(&model, 1, batch.features[1].row(i))].concat())
        .collect();
    let width = feats[0].len();
    for c in 0..model.classes() {
        for j in 0..width {
            let expect: f64 = (0..batch.len())
                .map(|i| (probs.get(i, c) - batch.labels.get(i, c)) * feats[i][j])
                .sum::<f64>()
                / b;
            assert!((gw[c * width + j] - expect).abs() < 1e-13);
        }
    }
}

#[test]
fn two_sample_hand_computed_gradient() {
    // One input per modality, one hidden unit each, two classes, concat.
    let spec = ModelSpec::uniform(vec![1, 1], vec![1], Fusion::Concat, 2);
    let mut model = build_model(&spec, &mut rng(0)).unwrap();
    let set = |model: &mut MultiModalModel, name: &str, v: &[f64]| {
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).data_mut().copy_from_slice(v);
    };
    set(&mut model, "m0.enc0.weight", &[2.0]);
    set(&mut model, "m0.enc0.bias", &[0.0]);
    set(&mut model, "m1.enc0.weight", &[1.0]);
    set(&mut model, "m1.enc0.bias", &[0.0]);
    set(&mut model, "joint.cls.weight", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut model, "joint.cls.bias", &[0.0, 0.0]);
    let x0 = Tensor::matrix(2, 1, vec![1.0, 0.5]).unwrap();
    let x1 = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
    let batch = LabeledBatch::from_indices(vec![x0, x1], &[0, 1], 2).unwrap();
    // Sample 1: h = (2, 0), logits (2, 0), q0 = σ(2). Sample 2: h = (1, 2),
    // logits (1, 2), q1 = σ(1).
    let s = |z: f64| 1.0 / (1.0 + (-z).exp());
    let (q_a, q_b) = (s(2.0), s(1.0));
    let expect_loss = -(q_a.ln() + q_b.ln()) / 2.0;
    let (loss, cache) = model.forward(&batch).unwrap();
    assert!((loss - expect_loss).abs() < 1e-14);
    let g = model.backward(cache).unwrap();
    let get = |name: &str| g.get(model.params().find(name).unwrap()).data().to_vec();
    // δ rows: sample 1 (q0 − 1, 1 − q0); sample 2 (1 − q1, q1 − 1) with q1 = σ(1).
    let d1 = [q_a - 1.0, 1.0 - q_a];
    let d2 = [1.0 - q_b, q_b - 1.0];
    let bias = get("joint.cls.bias");
    assert!((bias[0] - (d1[0] + d2[0]) / 2.0).abs() < 1e-14);
    assert!((bias[1] - (d1[1] + d2[1]) / 2.0).abs() < 1e-14);
    // Encoder 0: ∂ℓ/∂h0 = δ·W[:,0] = δ_0; h0 = relu(2x) with x = 1, 0.5.
    let w0 = get("m0.enc0.weight");
    assert!((w0[0] - (d1[0] * 1.0 + d2[0] * 0.5) / 2.0).abs() < 1e-14);
    // Encoder 1: sample 1 has h1 = relu(0) = 0 (inactive), sample 2 x = 2.
    let w1 = get("m1.enc0.weight");
    assert!((w1[0] - (d2[1] * 2.0) / 2.0).abs() < 1e-14);
}

#[test]
fn saturated_logits_give_finite_loss_and_gradients() {
    let (mut model, batch) = fixture(Fusion::Concat, 2);
    let id = model.params().find("joint.cls.bias").unwrap();
    model.params_mut().get_mut(id).data_mut().copy_from_slice(&[800.0, -800.0, 0.0]);
    let (loss, cache) = model.forward(&batch).unwrap();
    assert!(loss.is_finite());
    // Sample i pays about 800 − b_{y_i} nats; encoder features only shift
    // logits by a few units.
    let bias = [800.0, -800.0, 0.0];
    let expect: f64 =
        batch.label_indices().iter().map(|&c| 800.0 - bias[c]).sum::<f64>() / batch.len() as f64;
    assert!((loss - expect).abs() < 20.0, "{loss} vs {expect}");
    let g = model.backward(cache).unwrap();
    assert!(g.iter().all(|(_, t)| t.is_finite()));
}

#[test]
fn zero_input_with_zero_bias_leaves_first_layer_weights_untouched() {
    let spec = ModelSpec::uniform(vec![4, 4], vec![5], Fusion::Concat, 3);
    let model = build_model(&spec, &mut rng(1)).unwrap();
    let zeros = Tensor::zeros(&[6, 4]);
    let batch = LabeledBatch::from_indices(vec![zeros.clone(), zeros], &[0, 1, 2, 0, 1, 2], 3).unwrap();
    let (_, cache) = model.forward(&batch).unwrap();
    let g = model.backward(cache).unwrap();
    for name in ["m0.enc0.weight", "m1.enc0.weight"] {
        assert!(g.get(model.params().find(name).unwrap()).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn identical_branches_make_late_fusion_a_no_op() {
    for fusion in [Fusion::Sum, Fusion::Weight] {
        let spec = ModelSpec::uniform(vec![3, 3], vec![4], fusion, 3);
        let mut r = rng(9);
        let mut model = build_model(&spec, &mut r).unwrap();
        perturb_biases(&mut model, &mut r);
        for name in ["enc0.weight", "enc0.bias", "cls.weight", "cls.bias"] {
            let src = param(&model, &format!("m0.{name}"));
            let id = model.params().find(&format!("m1.{name}")).unwrap();
            model.params_mut().get_mut(id).data_mut().copy_from_slice(&src);
        }
        let x = random_batch(&[3], 3, 5, &mut r).unwrap();
        let batch = LabeledBatch::new(vec![x.features[0].clone(), x.features[0].clone()], x.labels).unwrap();
        let joint = model.predict_joint(&batch).unwrap();
        let branch = model.predict_unimodal(&batch, 0).unwrap();
        for (a, b) in joint.data().iter().zip(branch.data()) {
            assert!((a - b).abs() < 1e-14, "{fusion:?}");
        }
    }
}

#[test]
fn unimodal_heads_do_not_touch_other_modalities() {
    for fusion in [Fusion::Concat, Fusion::Sum, Fusion::Weight] {
        let (model, batch) = fixture(fusion, 4);
        for k in 0..2 {
            let (_, cache) = model.forward_head(&batch, Head::Unimodal(k)).unwrap();
            let g = model.backward(cache).unwrap();
            for id in model.partition(1 - k) {
                assert!(g.get(id).data().iter().all(|&v| v == 0.0), "{fusion:?} head {k}");
            }
            assert!(model.partition(k).iter().any(|&id| g.get(id).max_abs() > 0.0));
        }
    }
}

#[test]
fn three_modalities_partition_the_parameters() {
    for fusion in [Fusion::Concat, Fusion::Sum, Fusion::Weight] {
        let spec = ModelSpec::uniform(vec![2, 3, 4], vec![5, 3], fusion, 4);
        let model = build_model(&spec, &mut rng(0)).unwrap();
        let mut seen = vec![0usize; model.params().len()];
        for k in 0..3 {
            let part = model.partition(k);
            assert!(!part.is_empty());
            for id in part {
                assert_eq!(model.params().owner(id), Owner::Modality(k));
                seen[id.0] += 1;
            }
        }
        for id in model.shared_params() {
            seen[id.0] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1), "{fusion:?}: {seen:?}");
        let shared = model.shared_params().len();
        match fusion {
            Fusion::Concat => assert_eq!(shared, 2),
            Fusion::Sum => assert_eq!(shared, 0),
            Fusion::Weight => assert_eq!(shared, 1),
        }
    }
}

#[test]
fn building_is_deterministic_per_seed() {
    let spec = ModelSpec::uniform(vec![5, 7], vec![8, 4], Fusion::Weight, 3);
    let a = build_model(&spec, &mut rng(42)).unwrap();
    let b = build_model(&spec, &mut rng(42)).unwrap();
    let c = build_model(&spec, &mut rng(43)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn malformed_inputs_are_rejected() {
    let (model, batch) = fixture(Fusion::Concat, 0);
    let wrong = LabeledBatch::new(vec![batch.features[1].clone(), batch.features[0].clone()], batch.labels.clone())
        .unwrap();
    assert!(model.forward(&wrong).is_err());
    let bad_spec = ModelSpec::uniform(vec![3], vec![4], Fusion::Concat, 3);
    assert!(build_model(&bad_spec, &mut rng(0)).is_err());
    let zero_width = ModelSpec::uniform(vec![3, 3], vec![0], Fusion::Sum, 3);
    assert!(build_model(&zero_width, &mut rng(0)).is_err());
}

#[test]
fn caches_go_stale_after_an_update() {
    let (mut model, batch) = fixture(Fusion::Sum, 0);
    let (_, cache) = model.forward(&batch).unwrap();
    let id = model.params().find("m0.cls.bias").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] += 0.1;
    assert!(model.backward(cache).is_err());
}
