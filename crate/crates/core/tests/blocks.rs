mod common;

use common::{naive_conv, random, rng};
use pec_core::nn::{
    Bottleneck, C2f, C2fVariant, Cbs, Cpca, CpcaConfig, Ema, EmaConfig, FasterEmaBottleneck, Forward, Mode, PConv,
    PConvConfig, Partition, Sppf, Weights,
};
use pec_core::tensor::{ConvParams, Shape, Tensor, Var};
use proptest::prelude::*;

fn run(w: &Weights<f64>, mode: Mode, x: &Tensor<f64>, f: impl FnOnce(&mut Forward<f64>, Var) -> Var) -> Tensor<f64> {
    let mut fwd = Forward::new(w, mode);
    let v = fwd.input(x.clone(), false);
    let y = f(&mut fwd, v);
    fwd.tape.value(y).clone()
}

fn zero(w: &mut Weights<f64>, name: &str) {
    w.param_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn cbs_with_zero_weights_outputs_silu_zero() {
    let cbs = Cbs::square("c", 3, 4, 3, 1);
    let mut w = Weights::new();
    cbs.init(&mut w, &mut rng(0)).unwrap();
    zero(&mut w, "c.conv.weight");
    let y = run(&w, Mode::Infer, &random([1, 3, 5, 5], 1), |f, x| {
        cbs.forward(f, x).unwrap()
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn cbs_stride_two_halves_even_extents() {
    let cbs = Cbs::square("c", 3, 4, 3, 2);
    let mut w = Weights::new();
    cbs.init(&mut w, &mut rng(0)).unwrap();
    let y = run(&w, Mode::Train, &random([2, 3, 8, 6], 1), |f, x| {
        cbs.forward(f, x).unwrap()
    });
    assert_eq!(y.dims(), [2, 4, 4, 3]);
}

fn pconv_setup(c: usize, ratio: f64, part: Partition, seed: u64) -> (PConv, Weights<f64>) {
    let p = PConv::new("p", PConvConfig::new(c).with_ratio(ratio).with_partition(part));
    let mut w = Weights::new();
    p.init(&mut w, &mut rng(seed)).unwrap();
    (p, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pconv_leaves_untouched_channels_bit_identical(c in 2usize..=12, last in any::<bool>(), seed in any::<u64>()) {
        let part = if last { Partition::Last } else { Partition::First };
        let (p, w) = pconv_setup(c, 0.25, part, seed);
        let x = random([2, c, 5, 4], seed ^ 9);
        let y = run(&w, Mode::Infer, &x, |f, v| p.forward(f, v).unwrap());
        prop_assert_eq!(y.shape(), x.shape());
        let cp = p.cfg.convolved();
        let start = p.cfg.slice_start();
        let (keep_at, keep_len) = if last { (0, c - cp) } else { (cp, c - cp) };
        if keep_len > 0 {
            prop_assert_eq!(y.channels(keep_at, keep_len).unwrap(), x.channels(keep_at, keep_len).unwrap());
        }
        let params = ConvParams::new(cp, cp, 3);
        let oracle = naive_conv(&x.channels(start, cp).unwrap(), w.param("p.conv.weight").unwrap(), None, &params);
        prop_assert!(y.channels(start, cp).unwrap().max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn pconv_with_full_ratio_is_a_regular_conv(c in 1usize..=6, seed in any::<u64>()) {
        let (p, w) = pconv_setup(c, 1.0, Partition::First, seed);
        let x = random([1, c, 6, 5], seed ^ 5);
        let y = run(&w, Mode::Infer, &x, |f, v| p.forward(f, v).unwrap());
        let oracle = naive_conv(&x, w.param("p.conv.weight").unwrap(), None, &ConvParams::new(c, c, 3));
        prop_assert!(y.max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn ema_and_cpca_preserve_shape_and_gate_range(g in 1usize..=4, cg in 1usize..=4, h in 1usize..=7, w in 1usize..=7, seed in any::<u64>()) {
        let c = g * cg;
        let ema = Ema::new("e", EmaConfig::new(c).with_groups(g));
        let cpca = Cpca::new("a", CpcaConfig::new(c));
        let mut wt = Weights::new();
        ema.init(&mut wt, &mut rng(seed)).unwrap();
        cpca.init(&mut wt, &mut rng(seed)).unwrap();
        let x = random([2, c, h, w], seed ^ 7);
        let mut f = Forward::new(&wt, Mode::Train);
        let v = f.input(x.clone(), false);
        let e = ema.forward(&mut f, v).unwrap();
        let a = cpca.forward(&mut f, v).unwrap();
        let ca = cpca.channel_attention(&mut f, v).unwrap();
        prop_assert_eq!(f.tape.shape(e), x.shape());
        prop_assert_eq!(f.tape.shape(a), x.shape());
        prop_assert!(f.tape.value(ca).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn pconv_rejects_empty_slices() {
    assert!(PConvConfig::new(1).validate().is_err());
    assert!(PConvConfig::new(8).with_ratio(1.5).validate().is_err());
    assert!(PConvConfig::new(8).validate().is_ok());
}

#[test]
fn pconv_with_identity_kernel_is_the_identity() {
    let (p, mut w) = pconv_setup(8, 0.25, Partition::First, 3);
    let k = w.param_mut("p.conv.weight").unwrap();
    *k = Tensor::from_fn(
        k.shape(),
        |[o, i, a, b]| {
            if o == i && a == 1 && b == 1 {
                1.0
            } else {
                0.0
            }
        },
    );
    let x = random([2, 8, 4, 4], 4);
    assert_eq!(run(&w, Mode::Infer, &x, |f, v| p.forward(f, v).unwrap()), x);
}

fn ema_setup(c: usize) -> (Ema, Weights<f64>) {
    let ema = Ema::new("e", EmaConfig::new(c));
    let mut w = Weights::new();
    ema.init(&mut w, &mut rng(1)).unwrap();
    (ema, w)
}

#[test]
fn ema_preserves_shape_and_rejects_indivisible_groups() {
    let (ema, w) = ema_setup(8);
    let y = run(&w, Mode::Train, &random([2, 8, 4, 4], 2), |f, v| {
        ema.forward(f, v).unwrap()
    });
    assert_eq!(y.dims(), [2, 8, 4, 4]);
    assert!(EmaConfig::new(6).validate().is_err());
    let bad = Ema::new("b", EmaConfig::new(6));
    assert!(bad.init(&mut Weights::<f64>::new(), &mut rng(0)).is_err());
}

#[test]
fn ema_directional_pools_of_ones_are_ones() {
    let (ema, w) = ema_setup(8);
    let mut f = Forward::new(&w, Mode::Train);
    let v = f.input(Tensor::ones(Shape([1, 8, 3, 5])), false);
    let t = ema.forward_traced(&mut f, v).unwrap();
    for p in [t.pooled_h, t.pooled_w] {
        assert!(f.tape.value(p).data().iter().all(|&z| z == 1.0));
    }
    assert_eq!(f.tape.shape(t.pooled_h).0, [4, 2, 3, 1]);
    assert_eq!(f.tape.shape(t.pooled_w).0, [4, 2, 1, 5]);
}

#[test]
fn ema_descriptor_softmax_is_normalised() {
    let (ema, w) = ema_setup(16);
    let mut f = Forward::new(&w, Mode::Train);
    let v = f.input(random([2, 16, 5, 3], 8).map(|x| 4.0 * x), false);
    let t = ema.forward_traced(&mut f, v).unwrap();
    for d in t.descriptor_softmax {
        let s = f.tape.value(d);
        assert_eq!(s.dims(), [8, 4, 1, 1]);
        for n in 0..8 {
            let total: f64 = (0..4).map(|c| s.at(n, c, 0, 0)).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

fn cpca_setup(c: usize, seed: u64) -> (Cpca, Weights<f64>) {
    let cpca = Cpca::new("a", CpcaConfig::new(c));
    let mut w = Weights::new();
    cpca.init(&mut w, &mut rng(seed)).unwrap();
    (cpca, w)
}

#[test]
fn cpca_zero_mlp_gives_half_attention() {
    let (cpca, mut w) = cpca_setup(16, 0);
    for n in ["a.ca.fc1.weight", "a.ca.fc1.bias", "a.ca.fc2.weight", "a.ca.fc2.bias"] {
        zero(&mut w, n);
    }
    let y = run(&w, Mode::Infer, &random([2, 16, 4, 4], 1), |f, v| {
        cpca.channel_attention(f, v).unwrap()
    });
    assert!(y.data().iter().all(|&v| v == 0.5));
}

#[test]
fn cpca_channel_attention_is_permutation_symmetric() {
    let (cpca, mut w) = cpca_setup(8, 2);
    // Channels 2 and 5 share their output row of the MLP ...
    let fc2 = w.param_mut("a.ca.fc2.weight").unwrap();
    for h in 0..fc2.shape().c() {
        let v = fc2.at(2, h, 0, 0);
        fc2.set(5, h, 0, 0, v);
    }
    // ... and channel 5 holds channel 2's values in reversed spatial order.
    let mut x = random([1, 8, 4, 4], 3);
    for i in 0..16 {
        let v = x.at(0, 2, i / 4, i % 4);
        x.set(0, 5, (15 - i) / 4, (15 - i) % 4, v);
    }
    let ca = run(&w, Mode::Infer, &x, |f, v| cpca.channel_attention(f, v).unwrap());
    assert_eq!(ca.at(0, 2, 0, 0), ca.at(0, 5, 0, 0));
}

#[test]
fn cpca_channel_attention_matches_explicit_mlp() {
    let (cpca, mut w) = cpca_setup(8, 4);
    for (n, k) in [("a.ca.fc1.bias", 0.3), ("a.ca.fc2.bias", -0.2)] {
        w.param_mut(n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = k * (i as f64 - 1.5));
    }
    let x = random([2, 8, 3, 5], 5);
    let ca = run(&w, Mode::Infer, &x, |f, v| cpca.channel_attention(f, v).unwrap());
    let (w1, b1) = (w.param("a.ca.fc1.weight").unwrap(), w.param("a.ca.fc1.bias").unwrap());
    let (w2, b2) = (w.param("a.ca.fc2.weight").unwrap(), w.param("a.ca.fc2.bias").unwrap());
    let hidden = w1.shape().n();
    let mlp = |p: &[f64]| -> Vec<f64> {
        let h: Vec<f64> = (0..hidden)
            .map(|j| (b1.data()[j] + (0..8).map(|c| w1.at(j, c, 0, 0) * p[c]).sum::<f64>()).max(0.0))
            .collect();
        (0..8)
            .map(|c| b2.data()[c] + (0..hidden).map(|j| w2.at(c, j, 0, 0) * h[j]).sum::<f64>())
            .collect()
    };
    for n in 0..2 {
        let vals = |c: usize| -> Vec<f64> { (0..15).map(|k| x.at(n, c, k / 5, k % 5)).collect() };
        let avg: Vec<f64> = (0..8).map(|c| vals(c).iter().sum::<f64>() / 15.0).collect();
        let max: Vec<f64> = (0..8)
            .map(|c| vals(c).into_iter().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (a, m) = (mlp(&avg), mlp(&max));
        for c in 0..8 {
            let want = 1.0 / (1.0 + (-(a[c] + m[c])).exp());
            assert!((ca.at(n, c, 0, 0) - want).abs() < 1e-10);
        }
    }
}

#[test]
fn cpca_spatial_attention_zero_mix_is_zero_and_shape_preserving() {
    let (cpca, mut w) = cpca_setup(8, 6);
    zero(&mut w, "a.sa.mix.weight");
    let x = random([1, 8, 16, 16], 7);
    let sa = run(&w, Mode::Infer, &x, |f, v| cpca.spatial_attention(f, v).unwrap());
    assert_eq!(sa.dims(), [1, 8, 16, 16]);
    assert!(sa.data().iter().all(|&v| v == 0.0));
}

#[test]
fn cpca_spatial_attention_isolates_the_identity_branch() {
    let (cpca, mut w) = cpca_setup(4, 8);
    for k in [7, 11, 21] {
        for n in [
            format!("a.sa.dw1x{k}.weight"),
            format!("a.sa.dw1x{k}.bias"),
            format!("a.sa.dw{k}x1.weight"),
            format!("a.sa.dw{k}x1.bias"),
        ] {
            zero(&mut w, &n);
        }
    }
    zero(&mut w, "a.sa.mix.bias");
    let mix = w.param_mut("a.sa.mix.weight").unwrap();
    *mix = Tensor::from_fn(mix.shape(), |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
    w.param_mut("a.sa.dw5x5.bias")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
    let x = random([2, 4, 6, 9], 9);
    let sa = run(&w, Mode::Infer, &x, |f, v| cpca.spatial_attention(f, v).unwrap());
    let mut f = Forward::new(&w, Mode::Infer);
    let v = f.input(x, false);
    let (k, b) = (
        f.param("a.sa.dw5x5.weight").unwrap(),
        f.param("a.sa.dw5x5.bias").unwrap(),
    );
    let base = f.tape.depthwise_conv2d(v, k, Some(b), (5, 5)).unwrap();
    assert_eq!(&sa, f.tape.value(base));
}

#[test]
fn cpca_forced_identity_returns_input() {
    let (cpca, mut w) = cpca_setup(16, 10);
    cpca.set_identity(&mut w).unwrap();
    let x = random([2, 16, 8, 8], 11);
    assert_eq!(run(&w, Mode::Infer, &x, |f, v| cpca.forward(f, v).unwrap()), x);
}

#[test]
fn cpca_param_count_matches_allocation() {
    for c in [8, 16, 64, 512] {
        let (cpca, w) = cpca_setup(c, 0);
        assert_eq!(w.num_params(), cpca.cfg.param_count());
    }
}

fn sppf_pair(cin: usize, cout: usize) -> (Sppf, Sppf, Weights<f64>, Weights<f64>) {
    let plain = Sppf::new("s", cin, cout, false);
    let att = Sppf::new("s", cin, cout, true);
    let mut wp = Weights::new();
    plain.init(&mut wp, &mut rng(1)).unwrap();
    let mut wa = Weights::new();
    att.init(&mut wa, &mut rng(2)).unwrap();
    wa.copy_shared_from(&wp);
    (plain, att, wp, wa)
}

#[test]
fn sppf_concat_is_four_hidden_and_constant_input_stays_constant() {
    let (plain, _, wp, _) = sppf_pair(8, 8);
    assert_eq!(plain.concat_channels(), 16);
    let x = Tensor::full(Shape([1, 8, 6, 6]), 0.7);
    let mut f = Forward::new(&wp, Mode::Infer);
    let v = f.input(x, false);
    let p = plain.pyramid(&mut f, v).unwrap();
    let p = f.tape.value(p);
    assert_eq!(p.dims(), [1, 16, 6, 6]);
    for c in 0..16 {
        let first = p.at(0, c, 0, 0);
        assert!((0..36).all(|k| p.at(0, c, k / 6, k % 6) == first));
    }
}

#[test]
fn sppf_cpca_is_a_drop_in_replacement() {
    let (plain, att, wp, mut wa) = sppf_pair(64, 64);
    let x = random([1, 64, 8, 8], 3);
    let yp = run(&wp, Mode::Infer, &x, |f, v| plain.forward(f, v).unwrap());
    let ya = run(&wa, Mode::Infer, &x, |f, v| att.forward(f, v).unwrap());
    assert_eq!(yp.shape(), ya.shape());
    att.attention().unwrap().set_identity(&mut wa).unwrap();
    let yi = run(&wa, Mode::Infer, &x, |f, v| att.forward(f, v).unwrap());
    assert_eq!(yi, yp);
    let extra = att.attention().unwrap().cfg.param_count();
    assert_eq!(wa.num_params(), wp.num_params() + extra);
    assert_eq!(att.param_count(), plain.param_count() + extra);
}

#[test]
fn faster_ema_bottleneck_preserves_shape_and_is_lighter() {
    let b = FasterEmaBottleneck::new("b", 16, true);
    let mut w = Weights::new();
    b.init(&mut w, &mut rng(0)).unwrap();
    assert_eq!(w.num_params(), b.param_count());
    let y = run(&w, Mode::Train, &random([1, 16, 8, 8], 1), |f, v| {
        b.forward(f, v).unwrap()
    });
    assert_eq!(y.dims(), [1, 16, 8, 8]);
    for c in [16, 32, 64] {
        let fe = FasterEmaBottleneck::new("f", c, true).param_count();
        let orig = Bottleneck::new("o", c, c, true);
        let mut wo = Weights::<f64>::new();
        orig.init(&mut wo, &mut rng(0)).unwrap();
        // Oracle: two full 3×3 convs with batch-norm affine terms.
        let oracle = 2 * (9 * c * c + 2 * c);
        assert_eq!(wo.num_params(), oracle);
        assert_eq!(orig.param_count(), oracle);
        assert!(fe < oracle, "c={c}: {fe} !< {oracle}");
    }
}

#[test]
fn faster_ema_bottleneck_has_no_dead_weights() {
    let b = FasterEmaBottleneck::new("b", 8, true);
    let mut w = Weights::new();
    b.init(&mut w, &mut rng(3)).unwrap();
    let mut f = Forward::new(&w, Mode::Train);
    let v = f.input(random([2, 8, 5, 5], 4), false);
    let y = b.forward(&mut f, v).unwrap();
    let r = f.tape.constant(random([2, 8, 5, 5], 5));
    let y = f.tape.mul(y, r).unwrap();
    let s = f.tape.sum(y);
    f.tape.backward(s).unwrap();
    let grads = f.param_grads();
    assert_eq!(grads.len(), w.params().count());
    for (name, g) in grads {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn c2f_concat_width_and_variant_costs() {
    for n in 1..=3 {
        let c = C2f::new("c", 16, 32, n, true, C2fVariant::Original);
        assert_eq!(c.hidden(), 16);
        assert_eq!(c.concat_channels(), (2 + n) * 16);
    }
    for ch in [32, 64, 128] {
        let mut counts = Vec::new();
        for v in [C2fVariant::Original, C2fVariant::FasterEma] {
            let c = C2f::new("c", ch, ch, 1, true, v);
            let mut w = Weights::<f32>::new();
            c.init(&mut w, &mut rng(0)).unwrap();
            assert_eq!(w.num_params(), c.param_count());
            counts.push(c.param_count());
        }
        assert!(counts[1] < counts[0], "C={ch}: {counts:?}");
    }
}

#[test]
fn c2f_with_identity_bottleneck_concatenates_split_and_last_piece() {
    // With the inner bottleneck's second conv zeroed and a residual, the
    // block passes its input through, so the projection sees
    // concat(a, b, b) where (a, b) are the halves of cv1.
    let c2f = C2f::new("c", 4, 6, 1, true, C2fVariant::Original);
    let mut w = Weights::new();
    c2f.init(&mut w, &mut rng(2)).unwrap();
    zero(&mut w, "c.m0.cv2.conv.weight");
    let x = random([1, 4, 5, 5], 3);
    let y = run(&w, Mode::Infer, &x, |f, v| c2f.forward(f, v).unwrap());

    let mut f = Forward::new(&w, Mode::Infer);
    let v = f.input(x, false);
    let cv1 = Cbs::square("c.cv1", 4, 6, 1, 1).forward(&mut f, v).unwrap();
    let parts = f.tape.split_channels(cv1, &[3, 3]).unwrap();
    let cat = f.tape.concat_channels(&[parts[0], parts[1], parts[1]]).unwrap();
    let out = Cbs::square("c.cv2", 9, 6, 1, 1).forward(&mut f, cat).unwrap();
    assert_eq!(&y, f.tape.value(out));
}

#[test]
fn blocks_preserve_batch() {
    for n in [1, 3] {
        let c = C2f::new("c", 8, 16, 2, false, C2fVariant::FasterEma);
        let mut w = Weights::new();
        c.init(&mut w, &mut rng(0)).unwrap();
        let y = run(&w, Mode::Train, &random([n, 8, 4, 4], 1), |f, v| {
            c.forward(f, v).unwrap()
        });
        assert_eq!(y.dims(), [n, 16, 4, 4]);
    }
}
