mod common;

use std::time::Instant;

use cacenet::autodiff::Tape;
use cacenet::model::{CaceNet, Ctx, Mode, ModelConfig};
use cacenet::{Shape, Tensor};
use common::*;

fn ctx_run<R>(net: &CaceNet<f64>, f: impl FnOnce(&mut Ctx<'_, f64>) -> R) -> R {
    let mut tape = Tape::new();
    let vars = net.store().bind(&mut tape);
    let mut ctx = Ctx {
        tape: &mut tape,
        vars: &vars,
        store: net.store(),
        mode: Mode::Eval,
        bn_eps: 1e-5,
        updates: Vec::new(),
    };
    f(&mut ctx)
}

#[test]
fn desk_feature_maps_halve_and_widen() {
    let net = CaceNet::<f64>::new(ModelConfig::desk(), 0).unwrap();
    let mut tape = Tape::new();
    let vars = net.store().bind(&mut tape);
    let x = tape.constant(random_tensor(&mut rng(1), Shape::new(2, 1, 64, 64), 0.0, 1.0));
    let out = net.forward_on(&mut tape, &vars, x, Mode::Train).unwrap();
    let dims: Vec<[usize; 4]> = out.encoder.iter().map(|&v| tape.value(v).shape().dims()).collect();
    assert_eq!(
        dims,
        vec![[2, 16, 32, 32], [2, 32, 16, 16], [2, 64, 8, 8], [2, 128, 4, 4]]
    );
    assert_eq!(tape.value(out.context).shape().dims(), [2, 132, 4, 4]);
    assert_eq!(tape.value(out.probabilities).shape().dims(), [2, 1, 64, 64]);
    // One update per normalisation layer.
    assert_eq!(out.updates.len() * 2, net.store().buffers().len());
}

#[test]
fn attention_matches_straight_line_oracle() {
    let mut r = rng(2);
    for i in 0..10 {
        let cfg = ModelConfig {
            attention_enabled: true,
            ..random_config(&mut r, 32)
        };
        let c = cfg.bottleneck_channels();
        let mut net = CaceNet::<f64>::new(cfg, i).unwrap();
        randomise(&mut net, &mut r);
        let f = random_tensor(&mut r, Shape::new(2, c, 3, 5), -2.0, 2.0);
        for branch in &net.context_module().branches {
            let a = branch.attention.as_ref().unwrap();
            let s = net.store();
            let want = attention_oracle(
                &f,
                s.get(a.squeeze_weight),
                s.get(a.squeeze_bias),
                s.get(a.excite_weight),
                s.get(a.excite_bias),
            );
            let got = attention_forward(&net, a, &f);
            assert!(max_rel_error(&got, &want) <= 1e-12);
        }
    }
}

#[test]
fn zero_attention_weights_halve_the_features() {
    let mut net = CaceNet::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    for p in net.store_mut().params_mut() {
        if p.name.contains(".attention.") {
            p.value.data_mut().fill(0.0);
        }
    }
    let f = random_tensor(&mut rng(3), Shape::new(1, 32, 2, 2), -1.0, 1.0);
    let a = net.context_module().branches[0].attention.clone().unwrap();
    let got = attention_forward(&net, &a, &f);
    assert_eq!(got, f.map(|v| 0.5 * v));
}

#[test]
fn pooling_maps_of_a_constant_input_sum_the_channels() {
    let mut net = CaceNet::<f64>::new(ModelConfig::desk(), 0).unwrap();
    for p in net.store_mut().params_mut() {
        if p.name.starts_with("context.rmp.") {
            let one = p.name.ends_with(".weight");
            p.value.data_mut().fill(if one { 1.0 } else { 0.0 });
        }
    }
    let v = 0.375;
    let rmp = net.context_module().rmp.clone();
    let wide = Tensor::full(Shape::new(1, 128, 4, 4), v);
    let out = ctx_run(&net, |ctx| {
        let xv = ctx.tape.constant(wide.clone());
        let y = rmp.forward(ctx, xv).unwrap();
        ctx.tape.value(y).clone()
    });
    assert_eq!(out.shape().dims(), [1, 132, 4, 4]);
    assert_eq!(out.slice_channels(0, 128).unwrap(), wide);
    assert!(out
        .slice_channels(128, 4)
        .unwrap()
        .data()
        .iter()
        .all(|&o| o == 128.0 * v));
}

#[test]
fn decoder_doubles_resolution_and_adds_the_skip() {
    let net = CaceNet::<f64>::new(ModelConfig::desk(), 0).unwrap();
    let d = net.decoder_blocks()[0].clone();
    let mut r = rng(4);
    let x = random_tensor(&mut r, Shape::new(1, 132, 4, 4), -1.0, 1.0);
    let skip = random_tensor(&mut r, Shape::new(1, 64, 8, 8), -1.0, 1.0);
    let (with, without) = ctx_run(&net, |ctx| {
        let xv = ctx.tape.constant(x.clone());
        let sv = ctx.tape.constant(skip.clone());
        let a = d.forward(ctx, xv, Some(sv)).unwrap();
        let b = d.forward(ctx, xv, None).unwrap();
        (ctx.tape.value(a).clone(), ctx.tape.value(b).clone())
    });
    assert_eq!(with.shape().dims(), [1, 64, 8, 8]);
    assert_eq!(with, without.zip_map(&skip, |a, b| a + b).unwrap());
}

#[test]
fn predictions_are_probabilities_and_deterministic() {
    let x = random_tensor(&mut rng(5), Shape::new(2, 1, 64, 64), 0.0, 1.0);
    let a = CaceNet::<f64>::new(ModelConfig::desk(), 11).unwrap();
    let b = CaceNet::<f64>::new(ModelConfig::desk(), 11).unwrap();
    let pa = a.predict(&x).unwrap();
    assert!(pa.data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(pa, b.predict(&x).unwrap());
    assert_eq!(pa, a.predict(&x).unwrap());
    let c = CaceNet::<f64>::new(ModelConfig::desk(), 12).unwrap();
    assert_ne!(pa, c.predict(&x).unwrap());
}

#[test]
fn batch_items_are_independent_in_eval_mode() {
    let net = CaceNet::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    let mut r = rng(6);
    let x = random_tensor(&mut r, Shape::new(3, 1, 16, 16), 0.0, 1.0);
    let all = net.predict(&x).unwrap();
    let item = |t: &Tensor<f64>, h| Tensor::from_fn(Shape::new(1, 1, h, h), |_, _, y, x| t.get(1, 0, y, x));
    let one = net.predict(&item(&x, 16)).unwrap();
    assert!(max_rel_error(&item(&all, 16), &one) < 1e-12);
}

#[test]
fn paper_scale_forward_keeps_the_input_size() {
    let net = CaceNet::<f32>::new(ModelConfig::paper(), 0).unwrap();
    let x = Tensor::from_fn(Shape::new(1, 1, 448, 448), |_, _, h, w| {
        ((h * 7 + w * 3) % 17) as f32 / 17.0
    });
    let start = Instant::now();
    let p = net.predict(&x).unwrap();
    eprintln!("paper-scale forward: {:.1?}", start.elapsed());
    assert_eq!(p.shape().dims(), [1, 1, 448, 448]);
    assert!(p.is_finite());
}

#[test]
fn every_parameter_receives_gradient() {
    for attention in [true, false] {
        let net = CaceNet::<f64>::new(
            ModelConfig {
                attention_enabled: attention,
                ..ModelConfig::tiny()
            },
            0,
        )
        .unwrap();
        let mut r = rng(7);
        let mut tape = Tape::new();
        let vars = net.store().bind(&mut tape);
        let x = tape.constant(random_tensor(&mut r, Shape::new(2, 1, 16, 16), 0.0, 1.0));
        let target = Tensor::from_fn(Shape::new(2, 1, 16, 16), |_, _, h, _| if h >= 8 { 1.0 } else { 0.0 });
        let out = net.forward_on(&mut tape, &vars, x, Mode::Train).unwrap();
        let loss = tape.bce_loss(out.probabilities, &target, 1e-7).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (p, &v) in net.store().params().iter().zip(&vars) {
            let g = grads.get(v).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            // The pooling-map biases reach train-mode batch norm through
            // linear maps only, which cancels them.
            if p.name.starts_with("context.rmp.") && p.name.ends_with(".bias") {
                assert!(g.max_abs() < 1e-12, "{}", p.name);
            } else {
                assert!(g.max_abs() > 0.0, "{} has an all-zero gradient", p.name);
            }
        }
    }
}

#[test]
fn rejects_wrong_input_channels_and_sizes() {
    let net = CaceNet::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    assert!(net.predict(&Tensor::zeros(Shape::new(1, 2, 16, 16))).is_err());
    assert!(net.predict(&Tensor::zeros(Shape::new(1, 1, 24, 16))).is_err());
    assert!(net.predict(&Tensor::zeros(Shape::new(1, 1, 32, 48))).is_ok());
}
