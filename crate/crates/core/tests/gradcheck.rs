//! Back-propagation through the whole classifier, checked against central
//! differences of the loss with respect to every touched parameter.

use rand::Rng as _;

use rnt::featurize::VectorizerConfig;
use rnt::losses::{nt_loss_mean, pt_loss, LossOutput};
use rnt::model::{Classifier, Gradients, ModelConfig};
use rnt::seed;

const EPS: f64 = 1e-5;

/// Moves one parameter by `delta` via an SGD step on a one-hot gradient.
fn nudge(model: &Classifier, param: &Param, delta: f64) -> Classifier {
    let mut g = Gradients::zeros(model.config());
    match *param {
        Param::Bias(i) => g.bias[i] = 1.0,
        Param::Head(i) => g.class_weights[i] = 1.0,
        Param::Embed(bucket, j) => {
            let mut row = vec![0.0; model.embed_dim()];
            row[j] = 1.0;
            g.embed.insert(bucket, row);
        }
    }
    let mut m = model.clone();
    m.sgd_step(&g, -delta).unwrap();
    m
}

enum Param {
    Bias(usize),
    Head(usize),
    Embed(u32, usize),
}

fn check(loss: impl Fn(&[f64]) -> LossOutput, seed_stage: &str) {
    let mut rng = seed::stage_rng(17, seed_stage);
    let vec = VectorizerConfig {
        n_max: 2,
        buckets_log2: 10,
    };
    for draw in 0..20 {
        let k = rng.random_range(2..=5);
        let model = Classifier::new(ModelConfig {
            embed_dim: 6,
            num_classes: k,
            buckets_log2: vec.buckets_log2,
            init_std: 0.5,
            seed: draw,
        })
        .unwrap();
        let x = vec.encode(&format!("tok{} tok{} tok{}", draw, draw + 1, draw * 3));
        let pred = model.forward(&x);
        let out = loss(&pred.probs);
        let mut grads = Gradients::zeros(model.config());
        grads.accumulate(&model, &x, &pred, &out.grad, 1.0);

        let mut params: Vec<(Param, f64)> = (0..k).map(|i| (Param::Bias(i), grads.bias[i])).collect();
        params.extend((0..grads.class_weights.len()).map(|i| (Param::Head(i), grads.class_weights[i])));
        for (&b, row) in &grads.embed {
            params.extend(row.iter().enumerate().map(|(j, &g)| (Param::Embed(b, j), g)));
        }
        let (mut diff, mut scale_a, mut scale_n) = (0.0, 0.0, 0.0);
        for (p, analytic) in &params {
            let f = |m: &Classifier| loss(&m.forward(&x).probs).loss;
            let numeric = (f(&nudge(&model, p, EPS)) - f(&nudge(&model, p, -EPS))) / (2.0 * EPS);
            diff += (analytic - numeric) * (analytic - numeric);
            scale_a += analytic * analytic;
            scale_n += numeric * numeric;
        }
        let rel = diff.sqrt() / f64::max(scale_a, scale_n).sqrt();
        assert!(rel < 1e-6, "draw {draw}: relative error {rel:e}");
    }
}

#[test]
fn positive_loss_backprop() {
    check(|p| pt_loss(p, 0), "gradcheck/pt");
}

#[test]
fn negative_loss_backprop() {
    check(
        |p| {
            let comps: Vec<usize> = (1..p.len()).collect();
            nt_loss_mean(p, &comps)
        },
        "gradcheck/nt",
    );
}
