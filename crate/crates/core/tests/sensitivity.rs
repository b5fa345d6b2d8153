use mixedq::kernels::MethodId;
use mixedq::model::{layer_ids, Model, ModelConfig};
use mixedq::quant::{fake_quantize, Tensor};
use mixedq::sensitivity::{
    analyze, asqnr, select_assignment, DecisionRule, SensitivityRecord, SensitivityTable,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn uniform(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #[test]
    fn scale_invariance(seed in 0u64..1000, k in prop_oneof![-1e3..-1e-3f64, 1e-3..1e3f64]) {
        let x = uniform(128, seed);
        let q = fake_quantize(&x, 5).unwrap();
        let a = asqnr(std::slice::from_ref(&x), std::slice::from_ref(&q)).unwrap();
        let b = asqnr(&[x.map(|v| v * k).unwrap()], &[q.map(|v| v * k).unwrap()]).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn more_bits_more_sqnr() {
    let x: Vec<Tensor> = (0..4).map(|s| uniform(4096, s)).collect();
    let mut prev = f64::NEG_INFINITY;
    for bits in 2..=12 {
        let q: Vec<Tensor> = x.iter().map(|t| fake_quantize(t, bits).unwrap()).collect();
        let db = asqnr(&x, &q).unwrap();
        assert!(db > prev, "{bits} bits: {db} <= {prev}");
        prev = db;
    }
}

fn small_model() -> (Model, Vec<Tensor>) {
    let cfg = ModelConfig {
        depth: 2,
        embed_dim: 16,
        heads: 2,
        seq_len: 8,
        input_dim: 8,
        seed: 21,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = (0..2)
        .map(|_| {
            let v = (0..3 * 8 * 8).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(v, vec![3, 8, 8]).unwrap()
        })
        .collect();
    (Model::build(cfg).unwrap(), data)
}

#[test]
fn analysis_is_complete_and_deterministic() {
    let (m, data) = small_model();
    let t = analyze(&m, &data).unwrap();
    assert_eq!(t.records.len(), 3 * 2 + 2 * 2 + 3 * 5);
    t.check_complete().unwrap();
    for r in &t.records {
        assert_eq!(r.sqnr_diff, r.asqnr_out - r.asqnr_in);
        assert!(r.asqnr_in.is_finite() && r.asqnr_out.is_finite());
    }
    let (m2, _) = small_model();
    assert_eq!(analyze(&m2, &data).unwrap(), t);
    // Uniformly quantized inputs of the first layer agree; FQ-ViT quantizes per channel.
    let l0 = t.layers()[0];
    let a_in = |m| t.get(l0, m).unwrap().asqnr_in;
    assert_eq!(a_in(MethodId::IBert), a_in(MethodId::IVit));
}

#[test]
fn selection_is_optimal_per_layer() {
    let (m, data) = small_model();
    let t = analyze(&m, &data).unwrap();
    for rule in [DecisionRule::SqnrDiff, DecisionRule::SqnrOutput] {
        let a = select_assignment(&t, rule).unwrap();
        for (l, chosen) in a.iter() {
            let c = t.get(l, chosen).unwrap();
            for &alt in l.kind.methods() {
                let o = t.get(l, alt).unwrap();
                match rule {
                    DecisionRule::SqnrDiff => assert!(c.sqnr_diff <= o.sqnr_diff),
                    DecisionRule::SqnrOutput => assert!(c.asqnr_out >= o.asqnr_out),
                }
            }
        }
    }
}

#[test]
fn selection_ignores_other_layers() {
    let layers = layer_ids(3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let table = |rng: &mut ChaCha8Rng| SensitivityTable {
        records: layers
            .iter()
            .flat_map(|&l| l.kind.methods().iter().map(move |&m| (l, m)))
            .map(|(l, m)| {
                SensitivityRecord::new(l, m, rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0))
            })
            .collect(),
    };
    let base = table(&mut rng);
    let target = layers[5];
    for _ in 0..50 {
        // Fresh values everywhere except the target layer.
        let mut other = table(&mut rng);
        for r in other.records.iter_mut().filter(|r| r.layer == target) {
            *r = *base.get(target, r.method).unwrap();
        }
        for rule in [DecisionRule::SqnrDiff, DecisionRule::SqnrOutput] {
            assert_eq!(
                select_assignment(&other, rule).unwrap().get(target),
                select_assignment(&base, rule).unwrap().get(target)
            );
        }
    }
}
