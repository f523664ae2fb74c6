mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use ssat_core::data::{generate_synthetic, AugmentationPipeline, Split, SyntheticSpec};
use ssat_core::diag::*;
use ssat_core::layers::{linear, AttentionRecord, Ctx, LinearParams, ParamStore};
use ssat_core::ssat::DecoderConfig;
use ssat_core::tensor::{DType, Tensor, Var};
use ssat_core::train::{run_experiment, Mode, ModelConfigs, TrainConfig};
use ssat_core::vit::{cross_entropy, one_hot, EncoderConfig};
use ssat_core::{Error, Result};

use common::rng;

/// `½ θᵀAθ` for an arbitrary square `A`.
struct Quadratic {
    a: DMatrix<f64>,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = nalgebra::DVector::from_column_slice(theta);
        let value = 0.5 * t.dot(&(&self.a * &t));
        let grad = 0.5 * (&self.a + self.a.transpose()) * &t;
        Ok((value, grad.iter().copied().collect()))
    }
}

fn random_matrix(n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0))
}

fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
    let m = random_matrix(n, seed);
    (&m + m.transpose()) * 0.5
}

fn matrix_op(m: &DMatrix<f64>) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
    move |v| Ok((m * nalgebra::DVector::from_column_slice(v)).iter().copied().collect())
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Two-layer GELU classifier with `hidden` units on random data.
fn micro_mlp(inputs: usize, hidden: usize, classes: usize, seed: u64) -> (ParamStore<f64>, impl Fn(&mut Ctx<f64>) -> Result<Var>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let fc1 = LinearParams::init(&mut store, "fc1", inputs, hidden, 0, &mut r);
    let fc2 = LinearParams::init(&mut store, "fc2", hidden, classes, 0, &mut r);
    // larger than the default init so curvature is not negligible
    let flat: Vec<f64> = store.flatten().iter().map(|_| r.gen_range(-0.8..0.8)).collect();
    store.set_flat(&flat).unwrap();
    let batch = 10;
    let x = Tensor::from_fn(&[batch, inputs], |_| r.gen_range(-1.5..1.5));
    let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..classes)).collect();
    let targets = one_hot::<f64>(&labels, classes).unwrap();
    let loss = move |ctx: &mut Ctx<f64>| {
        let input = ctx.tape.constant(x.clone());
        let h = linear(ctx, &fc1, input)?;
        let h = ctx.tape.gelu(h)?;
        let logits = linear(ctx, &fc2, h)?;
        cross_entropy(ctx, logits, &targets, 0.0)
    };
    (store, loss)
}

fn record(batch: usize, heads: usize, n: usize, seed: u64) -> AttentionRecord<f64> {
    let mut r = rng(seed);
    let mut data = Vec::new();
    for _ in 0..batch * heads * n {
        let row: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0f64).exp()).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    AttentionRecord {
        weights: Tensor::new(vec![batch, heads, n, n], data).unwrap(),
    }
}

#[test]
fn uniform_and_identity_attention_give_unit_mass() {
    let uniform = AttentionRecord {
        weights: Tensor::full(&[1, 1, 4, 4], 0.25),
    };
    assert_eq!(attention_column_sums(&uniform), vec![1.0; 4]);
    let eye = Tensor::from_fn(&[2, 3, 5, 5], |i| if i % 5 == (i / 5) % 5 { 1.0 } else { 0.0 });
    assert_eq!(attention_column_sums(&AttentionRecord { weights: eye }), vec![1.0; 5]);
}

#[test]
fn received_attention_totals_token_count() {
    for seed in 0..5 {
        let rec = record(3, 4, 9, seed);
        for b in 0..3 {
            for map in rec.sample(b).chunks(81) {
                let total: f64 = column_sums(map, 9).iter().sum();
                assert!((total - 9.0).abs() < 1e-6);
            }
        }
        let total: f64 = attention_column_sums(&rec).iter().sum();
        assert!((total - 9.0).abs() < 1e-6);
    }
}

fn brute_distance(tokens: &[Vec<f64>]) -> f64 {
    let n = tokens.len();
    let mut sum = 0.0;
    let mut pairs = 0;
    for (i, a) in tokens.iter().enumerate() {
        for (j, b) in tokens.iter().enumerate() {
            if i != j {
                sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                pairs += 1;
            }
        }
    }
    assert_eq!(pairs, n * (n - 1));
    sum / pairs as f64
}

#[test]
fn token_distance_simple_cases() {
    let same = Tensor::full(&[5, 3], 0.7);
    assert_eq!(inter_token_distance(&same, false).unwrap(), 0.0);
    let two = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
    assert_eq!(inter_token_distance(&two, false).unwrap(), 5.0);
    // with a class token in front only the last two count
    let three = Tensor::new(vec![3, 2], vec![9.0, 9.0, 0.0, 0.0, 3.0, 4.0]).unwrap();
    assert_eq!(inter_token_distance(&three, true).unwrap(), 5.0);
    assert!(inter_token_distance(&Tensor::<f64>::zeros(&[1, 4]), false).is_err());
    assert!(inter_token_distance(&two, true).is_err());
}

#[test]
fn token_distance_matches_brute_force() {
    let mut r = rng(4);
    for _ in 0..5 {
        let tokens: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let t = Tensor::new(vec![8, 6], tokens.concat()).unwrap();
        let got = inter_token_distance(&t, false).unwrap();
        assert!((got - brute_distance(&tokens)).abs() < 1e-10);
    }
}

#[test]
fn feature_variance_cases() {
    assert_eq!(feature_variance(&Tensor::full(&[6, 4], 1.5), false).unwrap(), 0.0);
    let mut r = rng(5);
    let t: Tensor<f64> = Tensor::from_fn(&[256, 16], |_| StandardNormal.sample(&mut r));
    let v = feature_variance(&t, false).unwrap();
    assert!((v - 1.0).abs() < 0.2, "{v}");
}

proptest! {
    #[test]
    fn token_statistics_ignore_order(seed in 0u64..1000, n in 2usize..10, d in 1usize..5) {
        let mut r = rng(seed);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let a = Tensor::new(vec![n, d], rows.concat()).unwrap();
        rows.shuffle(&mut r);
        let b = Tensor::new(vec![n, d], rows.concat()).unwrap();
        prop_assert!((inter_token_distance(&a, false).unwrap() - inter_token_distance(&b, false).unwrap()).abs() < 1e-12);
        prop_assert!((feature_variance(&a, false).unwrap() - feature_variance(&b, false).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn hvp_on_quadratic_is_exact() {
    for seed in 0..5 {
        let a = random_matrix(12, seed);
        let q = Quadratic { a: a.clone() };
        let mut r = rng(100 + seed);
        let theta: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let hv = hessian_vector_product(&q, &theta, &v, 1e-4).unwrap();
        let sym = (&a + a.transpose()) * 0.5;
        let want = &sym * nalgebra::DVector::from_column_slice(&v);
        for (g, w) in hv.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-8);
        }
    }
}

#[test]
fn hvp_rejects_bad_input() {
    let q = Quadratic { a: DMatrix::identity(3, 3) };
    assert!(hessian_vector_product(&q, &[0.0; 3], &[1.0; 2], 1e-4).is_err());
    assert!(hessian_vector_product(&q, &[0.0; 3], &[1.0; 3], 0.0).is_err());
    assert_eq!(hessian_vector_product(&q, &[0.0; 3], &[0.0; 3], 1e-4).unwrap(), vec![0.0; 3]);
}

#[test]
fn hvp_on_mlp_is_symmetric_and_linear() {
    let (store, loss) = micro_mlp(4, 6, 3, 1);
    let obj = StoreObjective::new(store, loss);
    let theta = obj.params();
    let mut r = rng(6);
    let n = theta.len();
    let u: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let hu = hessian_vector_product(&obj, &theta, &u, 1e-4).unwrap();
    let hv = hessian_vector_product(&obj, &theta, &v, 1e-4).unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    assert!((dot(&u, &hv) - dot(&v, &hu)).abs() < 1e-6);
    let (a, b) = (0.7, -1.3);
    let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
    let hmix = hessian_vector_product(&obj, &theta, &mix, 1e-4).unwrap();
    for i in 0..n {
        assert!((hmix[i] - (a * hu[i] + b * hv[i])).abs() < 1e-6);
    }
}

#[test]
fn hvp_matches_dense_columns() {
    // 4·6 + 6 + 6·3 + 3 = 51 parameters
    let (store, loss) = micro_mlp(4, 6, 3, 2);
    let obj = StoreObjective::new(store, loss);
    let theta = obj.params();
    assert!(theta.len() <= 200);
    let dense = dense_hessian(&obj, &theta, 1e-4).unwrap();
    assert!(dense.asymmetry < 1e-5, "{}", dense.asymmetry);
    let mut e = vec![0.0; theta.len()];
    for j in [0, 7, 25, 50] {
        e[j] = 1.0;
        let col = hessian_vector_product(&obj, &theta, &e, 1e-4).unwrap();
        e[j] = 0.0;
        for (a, b) in col.iter().zip(dense.column(j)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn dense_hessian_of_quadratic_is_symmetric_part() {
    let a = random_matrix(10, 3);
    let q = Quadratic { a: a.clone() };
    let h = dense_hessian(&q, &[0.3; 10], 1e-4).unwrap();
    for i in 0..10 {
        for j in 0..10 {
            assert!((h.get(i, j) - 0.5 * (a[(i, j)] + a[(j, i)])).abs() < 1e-7);
        }
    }
}

#[test]
fn dense_hessian_guards_size() {
    let q = Quadratic { a: DMatrix::identity(5000, 1) };
    let err = dense_hessian(&q, &vec![0.0; 5000], 1e-4).unwrap_err();
    assert!(matches!(err, Error::HessianGuard { count: 5000, limit: 2000 }));
}

#[test]
fn lanczos_on_known_diagonals() {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(10, |i, _| (i + 1) as f64));
    let s = lanczos_spectrum(&mut matrix_op(&d), 10, 3, 10, 0).unwrap();
    for (got, want) in s.top.iter().zip([10.0, 9.0, 8.0]) {
        assert!((got - want).abs() < 1e-8);
    }
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[-3.0, -1.0, 2.0, 5.0]));
    let s = lanczos_spectrum(&mut matrix_op(&d), 4, 2, 4, 1).unwrap();
    assert!((s.bottom[0] + 3.0).abs() < 1e-10);
    assert_eq!(s.negative_count_estimate, 2);
    assert!((s.negative_mean_magnitude - 2.0).abs() < 1e-10);
}

#[test]
fn lanczos_matches_dense_eigensolver() {
    for seed in 0..3 {
        let m = random_symmetric(64, seed);
        let ev = sorted_eigenvalues(&m);
        let s = lanczos_spectrum(&mut matrix_op(&m), 64, 5, 64, seed).unwrap();
        for i in 0..5 {
            assert!((s.top[i] - ev[63 - i]).abs() < 1e-6);
            assert!((s.bottom[i] - ev[i]).abs() < 1e-6);
        }
        assert!(s.top.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.bottom.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn lanczos_top_value_grows_with_iterations() {
    let m = random_symmetric(40, 9);
    let mut last = f64::NEG_INFINITY;
    for it in 1..=40 {
        let s = lanczos_spectrum(&mut matrix_op(&m), 40, 1, it, 5).unwrap();
        assert!(s.top[0] >= last - 1e-12);
        last = s.top[0];
    }
}

#[test]
fn lanczos_flags_breakdown_and_bad_arguments() {
    let eye = DMatrix::<f64>::identity(6, 6) * 2.0;
    let s = lanczos_spectrum(&mut matrix_op(&eye), 6, 1, 6, 0).unwrap();
    assert!(s.breakdown);
    assert_eq!(s.iterations, 1);
    assert!((s.top[0] - 2.0).abs() < 1e-12);
    assert!(lanczos_spectrum(&mut matrix_op(&eye), 6, 4, 3, 0).is_err());
    assert!(lanczos_spectrum(&mut matrix_op(&eye), 6, 1, 7, 0).is_err());
}

#[test]
fn negative_counts_agree_on_micro_models() {
    for seed in 0..3 {
        let (store, loss) = micro_mlp(3, 5, 3, 10 + seed);
        let obj = StoreObjective::new(store, loss);
        let theta = obj.params();
        let n = theta.len();
        let dense = dense_hessian(&obj, &theta, 1e-4).unwrap();
        let ev = dense.eigenvalues();
        let scale = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let exact = dense.negative_count(1e-9 * scale);
        let mut op = |v: &[f64]| hessian_vector_product(&obj, &theta, v, 1e-4);
        let s = lanczos_spectrum(&mut op, n, 3, n, seed).unwrap();
        assert!(exact > 0);
        assert_eq!(s.negative_count_estimate, exact, "eigenvalues {ev:?}");
    }
}

fn tiny_models() -> ModelConfigs {
    ModelConfigs {
        encoder: EncoderConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            image_size: 8,
            channels: 3,
            num_classes: 3,
            use_class_token: true,
        },
        decoder: DecoderConfig {
            depth: 1,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
        },
    }
}

#[test]
fn report_structure_and_determinism() {
    let models = tiny_models();
    let spec = SyntheticSpec {
        per_class: 6,
        image_size: 8,
        ..Default::default()
    };
    let train = generate_synthetic(&spec, Split::Train).unwrap();
    let cfg = TrainConfig {
        mode: Mode::Ssat,
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 6,
        dtype: DType::F64,
        ..Default::default()
    };
    let trained = run_experiment::<f64>(&cfg, &models, &AugmentationPipeline::identity(), &train, None).unwrap();
    let model = &trained.trainer.model;
    let diag = DiagConfig {
        slice_size: 10,
        batch_size: 4,
        spectrum: Some(SpectrumConfig {
            iterations: 6,
            k: 3,
            samples: 4,
            loss: HessianLoss::Total,
            ..Default::default()
        }),
    };
    let report = build_report(model, &train, &diag).unwrap();
    let depth = models.encoder.depth;
    assert_eq!(report.attention.len(), depth);
    assert_eq!(report.inter_token_distance.len(), depth);
    assert_eq!(report.feature_variance.len(), depth);
    let n = models.encoder.num_tokens() as f64;
    for p in &report.attention {
        assert!((p.received.iter().sum::<f64>() - n).abs() < 1e-6);
    }
    let spectrum = report.spectrum.as_ref().unwrap();
    assert_eq!(spectrum.top.len(), 3);
    assert_eq!(report.provenance.slice_size, 10);

    let again = build_report(&model.clone(), &train, &diag).unwrap();
    assert_eq!(report, again);
    assert_eq!(
        serde_json::to_string(&report).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
    let csvs = report_csvs(&report);
    assert_eq!(csvs.len(), 4);
    assert!(csvs[0].1.starts_with("layer,token,received\n"));
}
