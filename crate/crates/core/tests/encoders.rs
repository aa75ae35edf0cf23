use zia_core::autodiff::Tape;
use zia_core::fusion::{
    contrastive_loss, encode_modality, tape_encode, tape_multimodal_contrastive, EncoderParams,
    EncoderShape, Modality,
};
use zia_core::matrix::Matrix;
use zia_core::params::Adam;
use zia_core::rng;

const N: usize = 24;

// Three views of a shared latent through different random projections.
fn views(seed: u64) -> [Matrix<f64>; 3] {
    let latent = Matrix::randn(N, 4, 1.0, &mut rng::stream(seed, "latent"));
    let view = |name: &str, width: usize| {
        let proj = Matrix::randn(4, width, 1.0, &mut rng::stream(seed, name));
        let noise = Matrix::randn(
            N,
            width,
            0.05,
            &mut rng::stream(seed, &format!("{name}.noise")),
        );
        latent.matmul(&proj).unwrap().add(&noise).unwrap()
    };
    [view("gaze", 12), view("bio", 9), view("context", 6)]
}

fn shape() -> EncoderShape {
    EncoderShape {
        gaze_in: 12,
        bio_in: 9,
        context_in: 6,
        hidden: 32,
        dim: 16,
    }
}

#[test]
fn tape_encoder_matches_plain_encoder() {
    let enc = EncoderParams::<f64>::init(shape(), 3).unwrap();
    let [g, _, _] = views(1);
    let plain = encode_modality(&g, (0..N).collect(), &enc, Modality::Gaze).unwrap();
    let mut tape = Tape::new();
    let bound = enc.params.bind(&mut tape);
    let x = tape.constant(g);
    let z = tape_encode(&mut tape, &bound, x, Modality::Gaze);
    let diff = tape.value(z).sub(plain.vectors()).unwrap().max_abs();
    assert!(diff < 1e-12);
}

#[test]
fn contrastive_training_separates_matching_ticks() {
    let [g, b, c] = views(5);
    let mut enc = EncoderParams::<f64>::init(shape(), 9).unwrap();
    let mut adam = Adam::new(&enc.params, 1e-2);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut tape = Tape::new();
        let bound = enc.params.bind(&mut tape);
        let (xg, xb, xc) = (
            tape.constant(g.clone()),
            tape.constant(b.clone()),
            tape.constant(c.clone()),
        );
        let zg = tape_encode(&mut tape, &bound, xg, Modality::Gaze);
        let zb = tape_encode(&mut tape, &bound, xb, Modality::Bio);
        let zc = tape_encode(&mut tape, &bound, xc, Modality::Context);
        let loss = tape_multimodal_contrastive(&mut tape, zg, zb, zc, 0.1);
        losses.push(tape.scalar(loss));
        let grads = tape.backward(loss);
        adam.step(&mut enc.params, &bound, &grads);
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.25 * first, "loss {first} -> {last}");

    // trained embeddings put each gaze row closest to its own bio row
    let eg = encode_modality(&g, (0..N).collect(), &enc, Modality::Gaze).unwrap();
    let eb = encode_modality(&b, (0..N).collect(), &enc, Modality::Bio).unwrap();
    let pairs: Vec<(usize, usize)> = (0..N).map(|i| (i, i)).collect();
    let l = contrastive_loss(&eg, &eb, &pairs, 0.1).unwrap();
    assert!(l < (N as f64).ln() / 2.0, "gaze-bio loss {l}");
}
