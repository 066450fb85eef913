use super::*;
use crate::engine::{grad_check, Recording};
use crate::padding::pad_tensor;
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

fn eval_forward<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let mut g = Graph::with_params(store, Recording::Off);
    let xv = g.constant(x.clone()).unwrap();
    let y = f(&mut g, xv).unwrap();
    g.value(y).clone()
}

/// Direct six-fold loop over the padded input.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: &Conv2dSpec) -> Tensor<f64> {
    let (_, h, wd) = x.chw().unwrap();
    let p = spec.pad();
    let xp = pad_tensor(x, p, spec.padding_mode).unwrap();
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    Tensor::from_fn(&[spec.out_channels, h, wd], |idx| {
        let co = idx / (h * wd);
        let (r, c) = ((idx / wd) % h, idx % wd);
        let grp = co / cout_g;
        let mut acc = b[co];
        for ci in 0..cin_g {
            for dy in 0..k {
                for dx in 0..k {
                    acc += w.at(&[co, ci, dy, dx]) * xp.at(&[grp * cin_g + ci, r + dy, c + dx]);
                }
            }
        }
        acc
    })
}

#[test]
fn even_kernel_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let spec = Conv2dSpec::new(2, 2, 4, PaddingMode::Zero);
    assert!(Conv2d::new(&mut store, "c", spec, &mut Init::new(0)).is_err());
    let spec = Conv2dSpec { groups: 3, ..Conv2dSpec::new(4, 4, 3, PaddingMode::Zero) };
    assert!(spec.validate().is_err());
}

#[test]
fn unit_kernel_identity() {
    let mut store = ParamStore::<f64>::new();
    let spec = Conv2dSpec::new(3, 3, 1, PaddingMode::Geocyclic);
    let conv = Conv2d::new(&mut store, "c", spec, &mut Init::new(0)).unwrap();
    let w = store.get_mut(conv.weight);
    w.value = Tensor::from_fn(&[3, 3, 1, 1], |k| if k / 3 == k % 3 { 1.0 } else { 0.0 });
    let x = rand_tensor(&[3, 4, 8], 1);
    let y = eval_forward(&store, &x, |g, v| conv.forward(g, v));
    assert_eq!(y, x);
}

#[test]
fn impulse_response_reproduces_kernel() {
    let mut store = ParamStore::<f64>::new();
    let spec = Conv2dSpec::new(1, 1, 3, PaddingMode::Zero);
    let conv = Conv2d::new(&mut store, "c", spec, &mut Init::new(0)).unwrap();
    let kernel = Tensor::from_fn(&[1, 1, 3, 3], |k| (k + 1) as f64);
    store.get_mut(conv.weight).value = kernel.clone();
    let mut x = Tensor::<f64>::zeros(&[1, 5, 6]);
    x.data_mut()[2 * 6 + 3] = 1.0;
    let y = eval_forward(&store, &x, |g, v| conv.forward(g, v));
    // cross-correlation: y[2+a, 3+b] = k[1-a, 1-b]
    for a in -1i32..=1 {
        for b in -1i32..=1 {
            let got = y.at(&[0, (2 + a) as usize, (3 + b) as usize]);
            let want = kernel.at(&[0, 0, (1 - a) as usize, (1 - b) as usize]);
            assert_eq!(got, want);
        }
    }
    assert_eq!(y.data().iter().filter(|v| **v != 0.0).count(), 9);
}

#[test]
fn conv_matches_loop_oracle() {
    let cases = [
        Conv2dSpec::new(3, 4, 3, PaddingMode::Geocyclic),
        Conv2dSpec::new(2, 2, 5, PaddingMode::CircularZeroPole),
        Conv2dSpec::new(4, 6, 3, PaddingMode::Zero),
        Conv2dSpec::depthwise(4, 7, PaddingMode::Geocyclic),
        Conv2dSpec { groups: 2, ..Conv2dSpec::new(4, 6, 3, PaddingMode::Geocyclic) },
    ];
    for (i, spec) in cases.iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", *spec, &mut Init::new(i as u64)).unwrap();
        randomize(&mut store, 10 + i as u64);
        let x = rand_tensor(&[spec.in_channels, 6, 8], 20 + i as u64);
        let y = eval_forward(&store, &x, |g, v| conv.forward(g, v));
        let want = conv_oracle(&x, store.value(conv.weight), store.value(conv.bias).data(), spec);
        assert!(y.max_abs_diff(&want) < 1e-12, "case {i}");
    }
}

#[test]
fn se_with_zero_weights_halves_input() {
    let mut store = ParamStore::<f64>::new();
    let spec = SeSpec { channels: 8, reduction_ratio: 4 };
    let se = SeBlock::new(&mut store, "se", spec, &mut Init::new(0)).unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let x = rand_tensor(&[8, 3, 4], 2);
    let y = eval_forward(&store, &x, |g, v| se.forward(g, v));
    assert!(y.max_abs_diff(&x.map(|v| 0.5 * v)) < 1e-15);

    store.get_mut(se.fc2_bias).value.data_mut().fill(20.0);
    let y = eval_forward(&store, &x, |g, v| se.forward(g, v));
    assert!(y.max_abs_diff(&x) < 1e-8);
}

#[test]
fn se_matches_oracle() {
    let mut store = ParamStore::<f64>::new();
    let spec = SeSpec { channels: 6, reduction_ratio: 2 };
    let se = SeBlock::new(&mut store, "se", spec, &mut Init::new(0)).unwrap();
    randomize(&mut store, 3);
    let x = rand_tensor(&[6, 4, 5], 4);
    let y = eval_forward(&store, &x, |g, v| se.forward(g, v));

    let (w1, b1) = (store.value(se.fc1_weight), store.value(se.fc1_bias));
    let (w2, b2) = (store.value(se.fc2_weight), store.value(se.fc2_bias));
    let z: Vec<f64> = (0..6).map(|c| x.channel(c).iter().sum::<f64>() / 20.0).collect();
    let hid: Vec<f64> = (0..3)
        .map(|j| (b1.data()[j] + (0..6).map(|c| w1.at(&[j, c]) * z[c]).sum::<f64>()).max(0.0))
        .collect();
    for c in 0..6 {
        let logit = b2.data()[c] + (0..3).map(|j| w2.at(&[c, j]) * hid[j]).sum::<f64>();
        let gate = 1.0 / (1.0 + (-logit).exp());
        for (a, b) in y.channel(c).iter().zip(x.channel(c)) {
            assert!((a - gate * b).abs() < 1e-14);
        }
    }
    assert_eq!(spec.param_count(), 6 * 3 + 3 + 3 * 6 + 6);
    assert_eq!(store.numel(), spec.param_count());
}

#[test]
fn drop_path_is_unbiased() {
    let rate = 0.3;
    let n = 100_000;
    let mut ctx = ForwardCtx::train(7);
    let mut total = 0.0;
    for _ in 0..n {
        let mut g = Graph::<f64>::new(Recording::Off);
        let x = g.constant(Tensor::zeros(&[1, 1, 1])).unwrap();
        let r = g.constant(Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        let y = drop_path(&mut g, x, r, rate, &mut ctx).unwrap();
        total += g.value(y).data()[0];
    }
    let mean = total / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn drop_path_eval_and_bounds() {
    let mut g = Graph::<f64>::new(Recording::Off);
    let x = g.constant(Tensor::full(&[1, 2, 2], 1.0)).unwrap();
    let r = g.constant(Tensor::full(&[1, 2, 2], 2.0)).unwrap();
    let y = drop_path(&mut g, x, r, 0.5, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(g.value(y).data(), &[3.0; 4]);
    assert!(drop_path(&mut g, x, r, 1.0, &mut ForwardCtx::eval()).is_err());
    assert!(drop_path(&mut g, x, r, 0.5, &mut ForwardCtx { mode: Mode::Train, rng: None }).is_err());
}

#[test]
fn layer_scale_gradient() {
    let mut store = ParamStore::<f64>::new();
    let gamma = store.add("gamma", Tensor::from_vec(vec![0.5, -2.0])).unwrap();
    let x = rand_tensor(&[2, 3, 3], 5);
    let mut g = Graph::with_params(&store, Recording::On);
    let xv = g.constant(x.clone()).unwrap();
    let gv = g.param(gamma).unwrap();
    let y = layer_scale(&mut g, xv, gv).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    let dg = grads.wrt(gv).unwrap();
    for c in 0..2 {
        let want: f64 = x.channel(c).iter().sum();
        assert!((dg.data()[c] - want).abs() < 1e-14);
    }
    let bad = g.constant(Tensor::from_vec(vec![1.0; 3])).unwrap();
    assert!(layer_scale(&mut g, xv, bad).is_err());
}

fn block(dim: usize, mode: PaddingMode, se: bool, seed: u64) -> (ParamStore<f64>, ConvNextBlock) {
    let mut store = ParamStore::<f64>::new();
    let spec = BlockSpec {
        se_reduction: se.then_some(4),
        ..BlockSpec::new(dim, mode)
    };
    let b = ConvNextBlock::new(&mut store, "blk", spec, &mut Init::new(seed)).unwrap();
    (store, b)
}

#[test]
fn block_with_zero_scale_is_identity() {
    let (mut store, b) = block(8, PaddingMode::Geocyclic, true, 0);
    randomize(&mut store, 1);
    store.get_mut(b.gamma).value.data_mut().fill(0.0);
    let x = rand_tensor(&[8, 6, 12], 2);
    let y = eval_forward(&store, &x, |g, v| b.forward(g, v, &mut ForwardCtx::eval()));
    assert_eq!(y, x);
}

#[test]
fn block_preserves_shape_and_counts_params() {
    for dim in [8, 96] {
        let (store, b) = block(dim, PaddingMode::Geocyclic, true, 0);
        let x = rand_tensor(&[dim, 8, 16], 3);
        let y = eval_forward(&store, &x, |g, v| b.forward(g, v, &mut ForwardCtx::eval()));
        assert_eq!(y.shape(), x.shape());
        assert_eq!(store.numel(), b.spec.param_count());
    }
    let (store, b) = block(8, PaddingMode::Zero, false, 0);
    assert_eq!(store.numel(), b.spec.param_count());
}

#[test]
fn block_matches_composition() {
    let (mut store, b) = block(8, PaddingMode::Geocyclic, true, 0);
    randomize(&mut store, 4);
    let x = rand_tensor(&[8, 4, 8], 5);
    let y = eval_forward(&store, &x, |g, v| b.forward(g, v, &mut ForwardCtx::eval()));
    let manual = eval_forward(&store, &x, |g, v| {
        let mut t = b.dwconv.forward(g, v)?;
        t = b.se.as_ref().unwrap().forward(g, t)?;
        t = b.norm.forward(g, t)?;
        t = b.pwconv1.forward(g, t)?;
        t = g.gelu(t)?;
        t = b.pwconv2.forward(g, t)?;
        let gamma = g.param(b.gamma)?;
        t = g.mul(t, gamma)?;
        g.add(v, t)
    });
    assert_eq!(y, manual);
}

#[test]
fn depth_scale_widens() {
    let mut store = ParamStore::<f64>::new();
    let ds = DepthScale::new(&mut store, "ds", 4, 8, PaddingMode::Geocyclic, &mut Init::new(0)).unwrap();
    let x = rand_tensor(&[4, 6, 8], 6);
    let y = eval_forward(&store, &x, |g, v| ds.forward(g, v));
    assert_eq!(y.shape(), &[8, 6, 8]);
    assert_eq!(store.numel(), DepthScale::param_count(4, 8));
    assert!(DepthScale::new(&mut store, "bad", 8, 8, PaddingMode::Zero, &mut Init::new(0)).is_err());
}

#[test]
fn block_gradients_match_differences() {
    let (mut store, b) = block(4, PaddingMode::Geocyclic, true, 0);
    randomize(&mut store, 8);
    let x = rand_tensor(&[4, 4, 8], 9);
    let err = grad_check(&mut store, 1e-5, |g| {
        let xv = g.constant(x.clone())?;
        let y = b.forward(g, xv, &mut ForwardCtx::eval())?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn trunc_normal_is_bounded() {
    let t: Tensor<f64> = Init::new(3).trunc_normal(&[10_000]);
    assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    let mean = t.data().iter().sum::<f64>() / 1e4;
    assert!(mean.abs() < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn block_commutes_with_longitude_roll(seed in 0u64..1000, shift in 1isize..12) {
        for mode in [PaddingMode::Geocyclic, PaddingMode::CircularZeroPole] {
            let (mut store, b) = block(4, mode, true, seed);
            randomize(&mut store, seed + 1);
            let x = rand_tensor(&[4, 6, 12], seed + 2);
            let run = |x: &Tensor<f64>| eval_forward(&store, x, |g, v| b.forward(g, v, &mut ForwardCtx::eval()));
            let lhs = run(&x.roll_last(shift));
            let rhs = run(&x).roll_last(shift);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }

    #[test]
    fn block_forward_is_deterministic(seed in 0u64..1000) {
        let (mut store, b) = block(4, PaddingMode::Geocyclic, true, seed);
        randomize(&mut store, seed);
        let x = rand_tensor(&[4, 4, 8], seed);
        let y1 = eval_forward(&store, &x, |g, v| b.forward(g, v, &mut ForwardCtx::eval()));
        let y2 = eval_forward(&store, &x, |g, v| b.forward(g, v, &mut ForwardCtx::eval()));
        prop_assert_eq!(y1, y2);
    }
}

#[test]
fn zero_padding_breaks_roll_equivariance() {
    let (mut store, b) = block(4, PaddingMode::Zero, true, 0);
    randomize(&mut store, 1);
    let x = rand_tensor(&[4, 6, 12], 2);
    let run = |x: &Tensor<f64>| eval_forward(&store, x, |g, v| b.forward(g, v, &mut ForwardCtx::eval()));
    let lhs = run(&x.roll_last(3));
    let rhs = run(&x).roll_last(3);
    assert!(lhs.max_abs_diff(&rhs) > 1e-6);
}

#[test]
fn se_gradients_match_differences() {
    let mut store = ParamStore::<f64>::new();
    let spec = SeSpec { channels: 4, reduction_ratio: 2 };
    let se = SeBlock::new(&mut store, "se", spec, &mut Init::new(0)).unwrap();
    randomize(&mut store, 11);
    let x = rand_tensor(&[4, 3, 3], 12);
    let err = grad_check(&mut store, 1e-5, |g| {
        let xv = g.constant(x.clone())?;
        let y = se.forward(g, xv)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn depth_scale_matches_norm_then_conv() {
    let mut store = ParamStore::<f64>::new();
    let ds = DepthScale::new(&mut store, "ds", 4, 8, PaddingMode::Geocyclic, &mut Init::new(0)).unwrap();
    randomize(&mut store, 13);
    let x = rand_tensor(&[4, 4, 8], 14);
    let y = eval_forward(&store, &x, |g, v| ds.forward(g, v));

    let (gamma, beta) = (store.value(ds.norm.gamma).data(), store.value(ds.norm.beta).data());
    let normed = Tensor::from_fn(&[4, 4, 8], |k| {
        let (c, s) = (k / 32, k % 32);
        let col: Vec<f64> = (0..4).map(|ch| x.data()[ch * 32 + s]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        gamma[c] * (col[c] - mean) / (var + DEFAULT_LN_EPS).sqrt() + beta[c]
    });
    let want = conv_oracle(&normed, store.value(ds.conv.weight), store.value(ds.conv.bias).data(), &ds.conv.spec);
    assert!(y.max_abs_diff(&want) < 1e-12);

    for p in store.iter_mut() {
        if p.name.starts_with("ds.conv") {
            p.value.data_mut().fill(0.0);
        }
    }
    let y = eval_forward(&store, &x, |g, v| ds.forward(g, v));
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn depth_scale_on_full_grid() {
    let mut store = ParamStore::<f32>::new();
    let ds = DepthScale::new(&mut store, "ds", 96, 192, PaddingMode::Geocyclic, &mut Init::new(0)).unwrap();
    let mut g = Graph::with_params(&store, Recording::Off);
    let x = g.constant(Tensor::full(&[96, 72, 144], 0.5)).unwrap();
    let y = ds.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[192, 72, 144]);
}

#[test]
fn unit_layer_scale_and_p0_drop_path_are_exact() {
    let x = rand_tensor(&[3, 2, 4], 15);
    let r = rand_tensor(&[3, 2, 4], 16);
    let mut g = Graph::<f64>::new(Recording::Off);
    let xv = g.constant(x.clone()).unwrap();
    let rv = g.constant(r.clone()).unwrap();
    let ones = g.constant(Tensor::full(&[3], 1.0)).unwrap();
    let s = layer_scale(&mut g, xv, ones).unwrap();
    assert_eq!(g.value(s), &x);
    let y = drop_path(&mut g, xv, rv, 0.0, &mut ForwardCtx::train(0)).unwrap();
    let want = Tensor::from_fn(&[3, 2, 4], |k| x.data()[k] + r.data()[k]);
    assert_eq!(g.value(y), &want);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn se_preserves_sign(seed in 0u64..10_000) {
        let mut store = ParamStore::<f64>::new();
        let spec = SeSpec { channels: 4, reduction_ratio: 4 };
        let se = SeBlock::new(&mut store, "se", spec, &mut Init::new(seed)).unwrap();
        randomize(&mut store, seed);
        let x = rand_tensor(&[4, 3, 5], seed + 1);
        let y = eval_forward(&store, &x, |g, v| se.forward(g, v));
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(a * b > 0.0 && a.abs() < b.abs());
        }
    }
}
