use zia_core::attention::AttentionKind;
use zia_core::autodiff::Tape;
use zia_core::fusion::{contrastive_loss, contrastive_loss_grad, EmbeddingSequence, Modality};
use zia_core::matrix::Matrix;
use zia_core::params::ParamKind;
use zia_core::predictor::{
    init_weights, tape_head_weight, tape_trunk, transformer_forward, TransformerConfig,
};
use zia_core::rng;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-9
}

fn fixture(kind: AttentionKind) -> TransformerConfig {
    TransformerConfig {
        attention_kind: kind,
        layers: 2,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        sequence_len: 4,
        intent_count: 5,
        ..TransformerConfig::reduced()
    }
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[test]
fn softmax_transformer_gradients_match_central_differences() {
    check_transformer(AttentionKind::Softmax);
}

#[test]
fn linear_transformer_gradients_match_central_differences() {
    check_transformer(AttentionKind::Linear);
}

fn check_transformer(kind: AttentionKind) {
    let cfg = fixture(kind);
    let label = 3;
    let mut weights = init_weights::<f64>(&cfg, 21).unwrap();
    // non-trivial norms and biases so every tensor carries gradient
    for p in weights.iter_mut() {
        if matches!(p.kind, ParamKind::Bias | ParamKind::Norm) {
            let base = if p.kind == ParamKind::Norm { 1.0 } else { 0.0 };
            let noise = Matrix::randn(
                p.value.rows(),
                p.value.cols(),
                0.1,
                &mut rng::stream(3, &p.name),
            );
            p.value = noise.map(|x| x + base);
        }
    }
    let z = Matrix::randn(4, 16, 1.0, &mut rng::stream(8, "z"));
    let seq = EmbeddingSequence::new(z.clone(), Modality::Fused, (0..4).collect()).unwrap();

    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape);
    let zv = tape.constant(z);
    let pooled = tape_trunk(&mut tape, &bound, &cfg, zv);
    let w = tape_head_weight(&mut tape, &bound, None);
    let logits = tape.matmul(pooled, w);
    let logits = tape.add_row(logits, bound.var("head.b"));
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.pick(ls, &[(0, label)]);
    let loss = tape.scale(picked, -1.0);
    let loss = tape.sum_all(loss);
    let direct = cross_entropy(&transformer_forward(&seq, &cfg, &weights).unwrap(), label);
    assert!((tape.scalar(loss) - direct).abs() < 1e-12);
    let grads = tape.backward(loss);

    let h = 1e-5;
    let mut checked = 0;
    let names: Vec<String> = weights
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n != "head.logsigma")
        .collect();
    for (pi, name) in names.iter().enumerate() {
        let var = bound.var(name);
        let g = grads
            .get(var)
            .expect("every parameter receives a gradient")
            .clone();
        let len = weights.get(name).unwrap().len();
        // a spread of entries per tensor keeps the check fast
        for k in (pi % 3..len).step_by((len / 6).max(1)) {
            let at = |delta: f64| {
                let mut wp = weights.clone();
                wp.get_mut(name).unwrap().as_mut_slice()[k] += delta;
                cross_entropy(&transformer_forward(&seq, &cfg, &wp).unwrap(), label)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let a = g.as_slice()[k];
            assert!(close(a, fd), "{name}[{k}]: analytic {a}, numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn contrastive_gradients_match_central_differences() {
    let mut r = rng::stream(4, "contrastive");
    let a = Matrix::randn(5, 8, 1.0, &mut r);
    let c = Matrix::randn(6, 8, 1.0, &mut r);
    let pairs = vec![(0, 0), (1, 3), (2, 2), (4, 5)];
    let out = contrastive_loss_grad(&a, &c, &pairs, 0.1).unwrap();
    let loss = |a: &Matrix<f64>, c: &Matrix<f64>| {
        let sa = EmbeddingSequence::new(a.clone(), Modality::Gaze, (0..5).collect()).unwrap();
        let sc = EmbeddingSequence::new(c.clone(), Modality::Bio, (0..6).collect()).unwrap();
        contrastive_loss(&sa, &sc, &pairs, 0.1).unwrap()
    };
    let h = 1e-6;
    for k in 0..a.len() {
        let mut up = a.clone();
        up.as_mut_slice()[k] += h;
        let mut dn = a.clone();
        dn.as_mut_slice()[k] -= h;
        let fd = (loss(&up, &c) - loss(&dn, &c)) / (2.0 * h);
        assert!(close(out.grad_anchors.as_slice()[k], fd), "anchor {k}");
    }
    for k in 0..c.len() {
        let mut up = c.clone();
        up.as_mut_slice()[k] += h;
        let mut dn = c.clone();
        dn.as_mut_slice()[k] -= h;
        let fd = (loss(&a, &up) - loss(&a, &dn)) / (2.0 * h);
        assert!(
            close(out.grad_candidates.as_slice()[k], fd),
            "candidate {k}"
        );
    }
}
