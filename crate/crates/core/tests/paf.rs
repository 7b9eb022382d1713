use mabsa::nn::{attend, Forward};
use mabsa::numerics::{grad_check, GradCheckConfig, Rng, Tape, Tensor};
use mabsa::paf::{gated_residual, relative_bias_block, PafConfig};
use mabsa::Error;
use proptest::prelude::*;

mod common;

use common::attention::*;

// ---- attention stages ---------------------------------------------------

#[test]
fn attention_stage_matches_loop_oracle() {
    for seed in 0..4 {
        let (store, stage) = build_stage(seed);
        let mut rng = Rng::new(seed);
        let text = random_mat(&mut rng, 2, 4);
        let image = random_mat(&mut rng, 2, 4);
        let anchor = random_mat(&mut rng, 2, 4);
        let (out, _) = run_stage(&store, &stage, &text, &image, &anchor);
        assert_close(&out, &stage_oracle(&store, "s", &text, &image, &anchor), 1e-10);
    }
}

#[test]
fn single_image_row_receives_all_attention() {
    let (store, stage) = build_stage(5);
    let mut rng = Rng::new(5);
    let text = random_mat(&mut rng, 3, 4);
    let image = random_mat(&mut rng, 1, 4);
    let (out, probs) = run_stage(&store, &stage, &text, &image, &text);
    assert_eq!(probs.shape(), &[3, 1]);
    assert!(probs.data().iter().all(|&p| p == 1.0));
    assert_close(&out, &stage_oracle(&store, "s", &text, &image, &text), 1e-10);
}

#[test]
fn zeroed_stage_weights_collapse_to_anchor_plus_bias() {
    let (mut store, stage) = build_stage(6);
    for w in [
        "self_q",
        "self_k",
        "self_v",
        "cross_q",
        "cross_k",
        "cross_v",
        "ffn.up.weight",
        "ffn.down.weight",
    ] {
        set(&mut store, &format!("s.{w}"), 0.0);
    }
    let mut rng = Rng::new(6);
    let text = random_mat(&mut rng, 3, 4);
    let image = random_mat(&mut rng, 2, 4);
    let anchor = random_mat(&mut rng, 3, 4);
    let (out, _) = run_stage(&store, &stage, &text, &image, &anchor);
    let b2 = param_vec(&store, "s.ffn.down.bias");
    let expect = layer_norm(
        &add_bias(&anchor, &b2),
        &param_vec(&store, "s.norm.gamma"),
        &param_vec(&store, "s.norm.beta"),
    );
    assert_close(&out, &expect, 1e-12);
}

// ---- relative bias ------------------------------------------------------

#[test]
fn bias_slice_takes_top_left_block() {
    let table = Tensor::matrix(4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
    let s = relative_bias_block(&table, 2, 3).unwrap();
    assert_eq!(s.shape(), &[2, 3]);
    assert_eq!(s.data(), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]);
    assert_eq!(relative_bias_block(&table, 4, 4).unwrap(), table);
    assert!(matches!(relative_bias_block(&table, 5, 1), Err(Error::Length(_))));
    assert!(matches!(relative_bias_block(&table, 1, 5), Err(Error::Length(_))));
}

#[test]
fn zero_bias_matches_unbiased_attention() {
    let mut rng = Rng::new(7);
    let q = tensor(&random_mat(&mut rng, 3, 4));
    let k = tensor(&random_mat(&mut rng, 2, 4));
    let v = tensor(&random_mat(&mut rng, 2, 4));
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let zero = tape.constant(Tensor::zeros(&[3, 2]));
    let (a, _) = attend(&mut tape, qv, kv, vv, None).unwrap();
    let (b, _) = attend(&mut tape, qv, kv, vv, Some(zero)).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

// ---- stage 3 ------------------------------------------------------------

#[test]
fn enhanced_cross_attention_matches_loop_oracle() {
    for (heads, self_bias) in [(1, true), (1, false), (2, true)] {
        let cfg = PafConfig {
            self_bias,
            ..tiny_cfg(heads)
        };
        let (store, s3) = build_stage3(&cfg, 8 + heads as u64);
        let mut rng = Rng::new(8);
        let text = random_mat(&mut rng, 2, 4);
        let image = random_mat(&mut rng, 2, 4);
        let (out, _, probs) = run_stage3(&store, &s3, &text, &image);
        assert_eq!(probs.len(), heads);
        assert_close(&out, &stage3_oracle(&store, &cfg, &text, &image), 1e-10);
    }
}

#[test]
fn closed_gate_ignores_image() {
    let cfg = tiny_cfg(2);
    let (mut store, s3) = build_stage3(&cfg, 9);
    set(&mut store, "paf.stage3.gate", -40.0);
    let mut rng = Rng::new(9);
    let text = random_mat(&mut rng, 3, 4);
    let (a, _, _) = run_stage3(&store, &s3, &text, &random_mat(&mut rng, 3, 4));
    let (b, _, _) = run_stage3(&store, &s3, &text, &random_mat(&mut rng, 5, 4));
    let expect = layer_norm(
        &text,
        &param_vec(&store, "paf.stage3.norm.gamma"),
        &param_vec(&store, "paf.stage3.norm.beta"),
    );
    assert_close(&a, &expect, 1e-12);
    assert_close(&b, &expect, 1e-12);
}

#[test]
fn half_open_gate_averages_attention_and_residual() {
    let cfg = tiny_cfg(2);
    let (mut store, s3) = build_stage3(&cfg, 10);
    let mut rng = Rng::new(10);
    let text = random_mat(&mut rng, 2, 4);
    let image = random_mat(&mut rng, 3, 4);
    set(&mut store, "paf.stage3.gate", 40.0);
    let (_, h, _) = run_stage3(&store, &s3, &text, &image);
    set(&mut store, "paf.stage3.gate", 0.0);
    let (_, half, _) = run_stage3(&store, &s3, &text, &image);
    let t = tensor(&text);
    for i in 0..half.numel() {
        let expect = 0.5 * h.data()[i] + 0.5 * t.data()[i];
        assert!((half.data()[i] - expect).abs() <= 1e-12);
    }
}

#[test]
fn gate_identity_is_exact_at_the_limits() {
    let mut rng = Rng::new(11);
    let h = tensor(&random_mat(&mut rng, 3, 4));
    let r = tensor(&random_mat(&mut rng, 3, 4));
    let mut tape = Tape::new();
    let (hv, rv) = (tape.constant(h.clone()), tape.constant(r.clone()));
    let closed = tape.constant(Tensor::zeros(&[4]));
    let open = tape.constant(Tensor::full(&[4], 1.0));
    let o0 = gated_residual(&mut tape, closed, hv, rv).unwrap();
    let o1 = gated_residual(&mut tape, open, hv, rv).unwrap();
    assert_eq!(tape.value(o0), &r);
    assert_eq!(tape.value(o1), &h);
}

#[test]
fn stage3_rejects_overlong_sequences() {
    let cfg = tiny_cfg(1);
    let (store, s3) = build_stage3(&cfg, 12);
    let mut rng = Rng::new(12);
    let mut f = Forward::eval(&store);
    let t = f.input(tensor(&random_mat(&mut rng, 6, 4)));
    let v = f.input(tensor(&random_mat(&mut rng, 2, 4)));
    assert!(matches!(s3.forward(&mut f, t, v), Err(Error::Length(_))));
}

// ---- full network -------------------------------------------------------

#[test]
fn projection_identity_and_bias() {
    let cfg = PafConfig {
        d_hidden: 4,
        ..tiny_cfg(2)
    };
    let (mut store, paf) = build_paf(&cfg, 4, 13);
    let eye = Tensor::identity(4);
    for name in ["paf.proj_text.weight", "paf.proj_image.weight"] {
        let id = store.find(name).unwrap();
        store.set(id, eye.data()).unwrap();
    }
    let mut rng = Rng::new(13);
    let text = random_mat(&mut rng, 2, 4);
    let image = random_mat(&mut rng, 3, 4);
    let mut f = Forward::eval(&store);
    let (t, v) = (f.input(tensor(&text)), f.input(tensor(&image)));
    let (pt, pv) = paf.project_modalities(&mut f, t, v).unwrap();
    assert_eq!(f.tape.value(pt), &tensor(&text));
    assert_eq!(f.tape.value(pv), &tensor(&image));

    set(&mut store, "paf.proj_text.bias", 0.3);
    let mut f = Forward::eval(&store);
    let (t, v) = (f.input(Tensor::zeros(&[2, 4])), f.input(Tensor::zeros(&[3, 4])));
    let (pt, _) = paf.project_modalities(&mut f, t, v).unwrap();
    assert!(f.tape.value(pt).data().iter().all(|&x| x == 0.3));
}

#[test]
fn projection_rejects_wrong_width() {
    let (store, paf) = build_paf(&tiny_cfg(2), 6, 14);
    let mut f = Forward::eval(&store);
    let t = f.input(Tensor::zeros(&[2, 5]));
    let v = f.input(Tensor::zeros(&[3, 6]));
    assert!(matches!(paf.project_modalities(&mut f, t, v), Err(Error::Dimension(_))));
}

#[test]
fn paf_forward_shape_determinism_and_stochastic_rows() {
    let cfg = PafConfig {
        d_hidden: 8,
        n_heads: 2,
        l_max: 8,
        ..PafConfig::default()
    };
    let (mut store, paf) = build_paf(&cfg, 6, 15);
    randomize(&mut store, 15, 0.5);
    let mut rng = Rng::new(15);
    let text = random_mat(&mut rng, 4, 6);
    let image = random_mat(&mut rng, 5, 6);
    let (a, probs) = run_paf(&store, &paf, &text, &image, true);
    assert_eq!(a.shape(), &[4, 8]);
    assert_eq!(probs.len(), 6);
    for p in &probs {
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6 && p.row(r).iter().all(|&x| x >= 0.0));
        }
    }
    let (b, _) = run_paf(&store, &paf, &text, &image, true);
    assert_eq!(a, b);
}

#[test]
fn unfused_output_is_projected_text() {
    let cfg = tiny_cfg(2);
    let (store, paf) = build_paf(&cfg, 3, 16);
    let mut rng = Rng::new(16);
    let text = random_mat(&mut rng, 2, 3);
    let image = random_mat(&mut rng, 3, 3);
    let (fused, probs) = run_paf(&store, &paf, &text, &image, false);
    assert!(probs.is_empty());
    let proj = add_bias(
        &mm(&text, &param_mat(&store, "paf.proj_text.weight")),
        &param_vec(&store, "paf.proj_text.bias"),
    );
    assert_close(&fused, &proj, 1e-12);
}

#[test]
fn isolated_network_is_image_invariant() {
    let cfg = tiny_cfg(2);
    let (mut store, paf) = build_paf(&cfg, 4, 17);
    randomize(&mut store, 17, 0.5);
    for s in ["paf.stage1", "paf.stage2"] {
        for w in [
            "self_q",
            "self_k",
            "self_v",
            "cross_q",
            "cross_k",
            "cross_v",
            "ffn.up.weight",
            "ffn.down.weight",
        ] {
            set(&mut store, &format!("{s}.{w}"), 0.0);
        }
    }
    set(&mut store, "paf.stage3.gate", -40.0);
    let mut rng = Rng::new(17);
    let text = random_mat(&mut rng, 3, 4);
    let (a, _) = run_paf(&store, &paf, &text, &random_mat(&mut rng, 3, 4), true);
    let (b, _) = run_paf(&store, &paf, &text, &random_mat(&mut rng, 4, 4), true);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn paf_gradients_pass_for_every_group() {
    let cfg = PafConfig {
        d_hidden: 4,
        n_heads: 2,
        l_max: 4,
        ..PafConfig::default()
    };
    let (mut store, paf) = build_paf(&cfg, 3, 18);
    randomize(&mut store, 18, 0.5);
    let mut rng = Rng::new(18);
    let text = tensor(&random_mat(&mut rng, 3, 3));
    let image = tensor(&random_mat(&mut rng, 4, 3));
    let readout = tensor(&random_mat(&mut rng, 3, 4));
    let report = grad_check(
        |tape, p| {
            Forward::on_tape(tape, p, |f| {
                let t = f.input(text.clone());
                let v = f.input(image.clone());
                let out = paf.forward(f, t, v, true)?;
                let w = f.input(readout.clone());
                let y = f.tape.mul(out.fused, w)?;
                Ok(f.tape.sum(y))
            })
        },
        &mut store,
        &GradCheckConfig::with_tol(1e-4),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert_eq!(report.groups.len(), store.len());
    assert!(report.max_error() < 1e-4);
}

proptest! {
    #[test]
    fn bias_row_shift_leaves_attention_unchanged(seed in 0u64..1000, c in -5.0f64..5.0, row in 0usize..3) {
        let mut rng = Rng::new(seed);
        let q = tensor(&random_mat(&mut rng, 3, 4));
        let k = tensor(&random_mat(&mut rng, 4, 4));
        let v = tensor(&random_mat(&mut rng, 4, 4));
        let bias = random_mat(&mut rng, 3, 4);
        let mut shifted = bias.clone();
        for x in shifted[row].iter_mut() {
            *x += c;
        }
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let b0 = tape.constant(tensor(&bias));
        let b1 = tape.constant(tensor(&shifted));
        let (_, p0) = attend(&mut tape, qv, kv, vv, Some(b0)).unwrap();
        let (_, p1) = attend(&mut tape, qv, kv, vv, Some(b1)).unwrap();
        for (a, b) in tape.value(p0).data().iter().zip(tape.value(p1).data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tiny_attention_matches_loop_oracle(seed in 0u64..1000, n in 1usize..4, k in 1usize..4) {
        let mut rng = Rng::new(seed);
        let q = random_mat(&mut rng, n, 4);
        let kk = random_mat(&mut rng, k, 4);
        let v = random_mat(&mut rng, k, 4);
        let bias = random_mat(&mut rng, n, k);
        let (expect, _) = attention(&q, &kk, &v, Some(&bias));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(tensor(&q)), tape.constant(tensor(&kk)), tape.constant(tensor(&v)));
        let b = tape.constant(tensor(&bias));
        let (out, _) = attend(&mut tape, qv, kv, vv, Some(b)).unwrap();
        for (x, y) in tape.value(out).data().iter().zip(tensor(&expect).data()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }
}
