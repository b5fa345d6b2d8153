use mixedq::bench::{kernel_sqnr, kernels, run_bench, BenchSpec};
use mixedq::kernels::{MethodId, OpKind};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const RANGE: (f64, f64) = (-4.0, 4.0);

#[test]
fn gelu_ibert_above_80_db_at_full_size() {
    for seed in SEEDS {
        let db = kernel_sqnr(OpKind::Gelu, MethodId::IBert, 1000, 1000, RANGE, seed).unwrap();
        assert!(db >= 80.0, "seed {seed}: {db}");
    }
}

#[test]
fn layernorm_fqvit_ranks_first_at_full_size() {
    for seed in SEEDS {
        let db: Vec<f64> = MethodId::ALL
            .iter()
            .map(|&m| kernel_sqnr(OpKind::LayerNorm, m, 1000, 1000, RANGE, seed).unwrap())
            .collect();
        assert!(db[1] > db[0] && db[1] > db[2], "seed {seed}: {db:?}");
    }
}

#[test]
fn sqnr_is_seed_deterministic_and_latency_sd_nonnegative() {
    let spec = BenchSpec {
        sizes: vec![(10, 10), (32, 64)],
        reps: 4,
        seed: 9,
        ..BenchSpec::default()
    };
    let a = run_bench(&spec).unwrap();
    let b = run_bench(&spec).unwrap();
    assert_eq!(a.len(), 2 * kernels().len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.sqnr_db.to_bits(), y.sqnr_db.to_bits());
        assert!(x.latency_sd_ms >= 0.0 && x.latency_mean_ms >= 0.0);
    }
}
