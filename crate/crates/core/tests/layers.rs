mod common;

use common::{project, random, rng, store_gradient_error, value_and_grad};
use rand::Rng;
use ssat_core::layers::{
    layer_norm, linear, multi_head_attention, transformer_block, AttentionParams, BlockParams, Ctx,
    LayerNormParams, LinearParams, ParamId, ParamStore, LAYER_NORM_EPS,
};
use ssat_core::tensor::Tensor;
use ssat_core::Error;

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let flat: Vec<f64> = (0..store.numel()).map(|_| r.gen_range(-scale..scale)).collect();
    store.set_flat(&flat).unwrap();
}

fn set(store: &mut ParamStore<f64>, id: ParamId, value: Tensor<f64>) {
    *store.value_mut(id) = value;
}

#[test]
fn linear_identity_and_bias() {
    let mut store = ParamStore::<f64>::new();
    let p = LinearParams::init(&mut store, "fc", 3, 3, 0, &mut rng(0));
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    set(&mut store, p.weight, eye);
    let x = random(&[2, 4, 3], &mut rng(1));

    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.tape.constant(x.clone());
    let y = linear(&mut ctx, &p, xv).unwrap();
    assert_eq!(ctx.tape.value(y), &x);

    set(&mut store, p.weight, Tensor::zeros(&[3, 3]));
    set(&mut store, p.bias, Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.tape.constant(x);
    let y = linear(&mut ctx, &p, xv).unwrap();
    for token in ctx.tape.value(y).data().chunks(3) {
        assert_eq!(token, &[0.5, -1.0, 2.0]);
    }

    let mut ctx = Ctx::new(&store, false);
    let bad = ctx.tape.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(linear(&mut ctx, &p, bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn linear_gradient_check() {
    for seed in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let p = LinearParams::init(&mut store, "fc", 4, 3, 0, &mut rng(seed));
        let input = store.add("input", random(&[2, 3, 4], &mut rng(seed + 10)), 0, false);
        randomize(&mut store, seed + 20, 1.0);
        let err = store_gradient_error(
            &store,
            |ctx| {
                let y = linear(ctx, &p, ctx.param(input))?;
                project(ctx, y, seed)
            },
            1e-5,
        );
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::<f64>::new();
    let p = LayerNormParams::init(&mut store, "ln", 4, 0);

    let mut ctx = Ctx::new(&store, false);
    let x = ctx.tape.constant(Tensor::full(&[1, 2, 4], 3.7));
    let y = layer_norm(&mut ctx, &p, x, LAYER_NORM_EPS).unwrap();
    assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));

    set(&mut store, p.gamma, Tensor::zeros(&[4]));
    set(&mut store, p.beta, Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut ctx = Ctx::new(&store, false);
    let x = ctx.tape.constant(random(&[3, 4], &mut rng(2)));
    let y = layer_norm(&mut ctx, &p, x, LAYER_NORM_EPS).unwrap();
    for row in ctx.tape.value(y).data().chunks(4) {
        assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
    }

    // sample statistics of the unscaled output
    let mut store = ParamStore::<f64>::new();
    let p = LayerNormParams::init(&mut store, "ln", 16, 0);
    let mut ctx = Ctx::new(&store, false);
    let x = ctx.tape.constant(random(&[5, 16], &mut rng(3)));
    let y = layer_norm(&mut ctx, &p, x, LAYER_NORM_EPS).unwrap();
    for row in ctx.tape.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

#[test]
fn layer_norm_gradient_check() {
    for seed in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let p = LayerNormParams::init(&mut store, "ln", 5, 0);
        let input = store.add("input", Tensor::zeros(&[2, 3, 5]), 0, false);
        randomize(&mut store, seed, 1.0);
        let err = store_gradient_error(
            &store,
            |ctx| {
                let y = layer_norm(ctx, &p, ctx.param(input), LAYER_NORM_EPS)?;
                project(ctx, y, seed)
            },
            1e-5,
        );
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn attention_single_token_and_identical_tokens() {
    let mut store = ParamStore::<f64>::new();
    let p = AttentionParams::init(&mut store, "attn", 8, 2, 0, &mut rng(4)).unwrap();
    randomize(&mut store, 5, 1.0);

    let mut ctx = Ctx::new(&store, false);
    ctx.set_capture(true);
    let x = ctx.tape.constant(random(&[1, 1, 8], &mut rng(6)));
    let (_, rec) = multi_head_attention(&mut ctx, &p, x).unwrap();
    assert_eq!(rec.unwrap().weights.data(), &[1.0, 1.0]);

    let token = random(&[8], &mut rng(7));
    let n = 5;
    let same = Tensor::from_fn(&[1, n, 8], |i| token.data()[i % 8]);
    let mut ctx = Ctx::new(&store, false);
    ctx.set_capture(true);
    let x = ctx.tape.constant(same);
    let (_, rec) = multi_head_attention(&mut ctx, &p, x).unwrap();
    for &w in rec.unwrap().weights.data() {
        assert!((w - 1.0 / n as f64).abs() < 1e-15);
    }

    assert!(matches!(
        AttentionParams::init(&mut ParamStore::<f64>::new(), "bad", 10, 4, 0, &mut rng(0)),
        Err(Error::Divisibility(10, 4))
    ));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut store = ParamStore::<f64>::new();
    let p = AttentionParams::init(&mut store, "attn", 12, 3, 0, &mut rng(8)).unwrap();
    randomize(&mut store, 9, 2.0);
    let mut ctx = Ctx::new(&store, false);
    ctx.set_capture(true);
    let x = ctx.tape.constant(random(&[3, 7, 12], &mut rng(10)));
    let (_, rec) = multi_head_attention(&mut ctx, &p, x).unwrap();
    for row in rec.unwrap().weights.data().chunks(7) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn attention_gradient_check() {
    for seed in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::init(&mut store, "attn", 6, 2, 0, &mut rng(seed)).unwrap();
        let input = store.add("input", Tensor::zeros(&[2, 3, 6]), 0, false);
        randomize(&mut store, seed + 30, 1.0);
        let err = store_gradient_error(
            &store,
            |ctx| {
                let (y, _) = multi_head_attention(ctx, &p, ctx.param(input))?;
                project(ctx, y, seed)
            },
            1e-5,
        );
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn block_with_zeroed_output_weights_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let p = BlockParams::init(&mut store, "blk", 8, 2, 4, 0, &mut rng(11)).unwrap();
    randomize(&mut store, 12, 1.0);
    for id in [p.attn.output.weight, p.attn.output.bias, p.mlp.fc2.weight, p.mlp.fc2.bias] {
        let shape = store.get(id).value.shape().to_vec();
        set(&mut store, id, Tensor::zeros(&shape));
    }
    let x = random(&[2, 5, 8], &mut rng(13));
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.tape.constant(x.clone());
    let (y, _) = transformer_block(&mut ctx, &p, xv).unwrap();
    assert_eq!(ctx.tape.value(y), &x);
}

#[test]
fn block_preserves_shape() {
    for (n, d, heads) in [(1, 4, 1), (3, 8, 2), (9, 12, 4)] {
        let mut store = ParamStore::<f64>::new();
        let p = BlockParams::init(&mut store, "blk", d, heads, 2, 0, &mut rng(14)).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.tape.constant(random(&[2, n, d], &mut rng(15)));
        let (y, _) = transformer_block(&mut ctx, &p, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, n, d]);
    }
}

#[test]
fn block_gradient_check_and_full_coverage() {
    for seed in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let p = BlockParams::init(&mut store, "blk", 4, 2, 2, 0, &mut rng(seed)).unwrap();
        let input = store.add("input", Tensor::zeros(&[2, 3, 4]), 0, false);
        randomize(&mut store, seed + 40, 1.0);
        let f = |ctx: &mut Ctx<f64>| {
            let (y, _) = transformer_block(ctx, &p, ctx.param(input))?;
            project(ctx, y, seed)
        };
        let err = store_gradient_error(&store, f, 1e-5);
        assert!(err < 1e-5, "seed {seed}: {err:e}");

        let mut ctx = Ctx::new(&store, true);
        let loss = f(&mut ctx).unwrap();
        let grads = ctx.tape.backward(loss).unwrap();
        let per_param = ctx.param_grads(&grads);
        assert_eq!(per_param.len(), store.len());
        for (param, g) in store.iter().zip(&per_param) {
            assert_eq!(param.value.shape(), g.shape());
            assert!(g.data().iter().any(|&v| v != 0.0), "{} has no gradient", param.name);
        }
        let (_, flat) = value_and_grad(&store, &f);
        assert_eq!(flat.len(), store.numel());
    }
}

#[test]
fn drop_path_is_seeded_and_scales_survivors() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::full(&[64, 2, 3], 1.0), 0, false);
    let run = |seed| {
        let mut ctx = Ctx::new(&store, false);
        ctx.set_drop_path(0.25, seed);
        let y = ctx.drop_path(ctx.param(x)).unwrap();
        ctx.tape.value(y).clone()
    };
    let a = run(3);
    assert_eq!(a, run(3));
    let mut dropped = 0;
    for sample in a.data().chunks(6) {
        assert!(sample.iter().all(|&v| v == sample[0]));
        if sample[0] == 0.0 {
            dropped += 1;
        } else {
            assert!((sample[0] - 1.0 / 0.75).abs() < 1e-15);
        }
    }
    assert!(dropped > 0 && dropped < 64);
}
