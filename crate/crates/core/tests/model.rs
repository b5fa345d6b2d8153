use mixedq::kernels::{MethodId, OpKind};
use mixedq::model::{AssignmentMap, LayerId, Model, ModelConfig};
use mixedq::quant::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cfg(depth: usize) -> ModelConfig {
    ModelConfig {
        depth,
        seed: 7,
        ..ModelConfig::default()
    }
}

fn input(c: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let data = (0..batch * c.seq_len * c.input_dim)
        .map(|_| n.sample(&mut rng))
        .collect();
    Tensor::new(data, vec![batch, c.seq_len, c.input_dim]).unwrap()
}

fn rel_err(q: &Tensor, f: &Tensor, classes: usize) -> f64 {
    let rows: Vec<f64> = q
        .data()
        .chunks(classes)
        .zip(f.data().chunks(classes))
        .map(|(a, b)| {
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            let den: f64 = b.iter().map(|y| y * y).sum();
            (num / den).sqrt()
        })
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[test]
fn layer_counts_match_formula() {
    for depth in [1, 2, 12] {
        let m = Model::build(cfg(depth)).unwrap();
        let ids = m.enumerate_nonlinear_layers();
        let count = |k| ids.iter().filter(|l: &&LayerId| l.kind == k).count();
        assert_eq!(count(OpKind::Softmax), depth);
        assert_eq!(count(OpKind::Gelu), depth);
        assert_eq!(count(OpKind::LayerNorm), 2 * depth + 1);
    }
}

#[test]
fn same_seed_same_weights() {
    let a = Model::build(cfg(2)).unwrap();
    let b = Model::build(cfg(2)).unwrap();
    assert_eq!(a.weights(), b.weights());
    let c = Model::build(ModelConfig { seed: 8, ..cfg(2) }).unwrap();
    assert_ne!(a.weights(), c.weights());
}

#[test]
fn fp_trace_shapes_and_softmax_rows() {
    let c = cfg(2);
    let m = Model::build(c.clone()).unwrap();
    let (logits, trace) = m.forward_fp(&input(&c, 3, 1)).unwrap();
    assert_eq!(logits.shape(), &[3, c.num_classes]);
    assert_eq!(trace.layers.len(), m.enumerate_nonlinear_layers().len());
    for lt in &trace.layers {
        assert_eq!(lt.inputs.len(), 3);
        if lt.layer.kind == OpKind::Softmax {
            assert_eq!(lt.outputs[0].shape(), &[c.heads, c.seq_len, c.seq_len]);
            for row in lt.outputs[0].data().chunks(c.seq_len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn zero_input_zero_head_gives_zero_logits() {
    let c = cfg(1);
    let mut w = Model::build(c.clone()).unwrap().into_weights();
    w.head.w = Tensor::zeros(w.head.w.shape().to_vec()).unwrap();
    let m = Model::from_weights(c.clone(), w).unwrap();
    let x = Tensor::zeros(vec![2, c.seq_len, c.input_dim]).unwrap();
    let (logits, _) = m.forward_fp(&x).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn quantized_paths_run_and_track_float() {
    let c = cfg(2);
    let m = Model::build(c.clone()).unwrap();
    let x = input(&c, 8, 2);
    m.calibrate(&x).unwrap();
    let (fp, _) = m.forward_fp(&x).unwrap();
    for method in MethodId::ALL {
        let a = AssignmentMap::uniform(m.enumerate_nonlinear_layers(), method);
        let (q, trace) = m.forward_quant(&x, &a).unwrap();
        let err = rel_err(&q, &fp, c.num_classes);
        println!("{method}: mean relative logit error {err:.4}");
        assert!(err <= 0.10, "{method}: {err}");
        let (q2, _) = m.forward_quant(&x, &a).unwrap();
        assert_eq!(q, q2);
        for lt in trace
            .layers
            .iter()
            .filter(|l| l.layer.kind == OpKind::Softmax)
        {
            if method == MethodId::FqVit {
                continue;
            }
            for row in lt.outputs[0].data().chunks(c.seq_len) {
                let s: f64 = row.iter().sum();
                assert!((0.95..=1.05).contains(&s), "{s}");
            }
        }
    }
}

#[test]
fn fqvit_layernorm_needs_calibration() {
    let c = cfg(1);
    let m = Model::build(c.clone()).unwrap();
    let a = AssignmentMap::uniform(m.enumerate_nonlinear_layers(), MethodId::FqVit);
    let x = input(&c, 2, 3);
    assert!(matches!(
        m.forward_quant(&x, &a),
        Err(mixedq::Error::InvalidState(_))
    ));
    assert!(m.calibrate(&x).unwrap());
    assert!(!m.calibrate(&input(&c, 2, 4)).unwrap());
    m.forward_quant(&x, &a).unwrap();
}

#[test]
fn missing_entry_and_bad_shape_rejected() {
    let c = cfg(1);
    let m = Model::build(c.clone()).unwrap();
    let x = input(&c, 1, 3);
    let partial = AssignmentMap::uniform(&m.enumerate_nonlinear_layers()[..2], MethodId::IBert);
    assert!(m.forward_quant(&x, &partial).is_err());
    let bad = Tensor::zeros(vec![1, c.seq_len + 1, c.input_dim]).unwrap();
    assert!(m.forward_fp(&bad).is_err());
}

#[test]
fn one_layer_change_keeps_prefix() {
    let c = cfg(2);
    let m = Model::build(c.clone()).unwrap();
    let x = input(&c, 4, 5);
    m.calibrate(&x).unwrap();
    let ids = m.enumerate_nonlinear_layers().to_vec();
    let base = AssignmentMap::uniform(&ids, MethodId::IBert);
    let (_, t0) = m.forward_quant(&x, &base).unwrap();
    for (pos, &layer) in ids.iter().enumerate() {
        let mut alt = base.clone();
        alt.insert(layer, MethodId::IVit).unwrap();
        let (_, t1) = m.forward_quant(&x, &alt).unwrap();
        for (k, id) in ids[..pos].iter().enumerate() {
            assert_eq!(t0.layers[k], t1.layers[k], "layer {id} changed");
        }
        assert_eq!(t0.layers[pos].inputs, t1.layers[pos].inputs);
    }
}

#[test]
fn weights_round_trip() {
    let c = cfg(2);
    let m = Model::build(c.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.toml");
    let p2 = dir.path().join("b.toml");
    m.save_weights(&p1).unwrap();
    let back = Model::load_weights(&p1).unwrap();
    assert_eq!(back.weights(), m.weights());
    back.save_weights(&p2).unwrap();
    assert_eq!(
        std::fs::read(p1.with_extension("bin")).unwrap(),
        std::fs::read(p2.with_extension("bin")).unwrap()
    );
    let x = input(&c, 2, 9);
    assert_eq!(m.forward_fp(&x).unwrap().0, back.forward_fp(&x).unwrap().0);

    let text = std::fs::read_to_string(&p1).unwrap();
    std::fs::write(&p1, text.replace("embed_dim = 32", "embed_dim = 64")).unwrap();
    assert!(Model::load_weights(&p1).is_err());
    std::fs::write(&p1, "not toml [").unwrap();
    assert!(matches!(
        Model::load_weights(&p1),
        Err(mixedq::Error::Parse(_))
    ));
}
