//! Finite-difference checks for every layer's backward pass.

use hscrf::crf::CrfParams;
use hscrf::encoder::{Encoder, EncoderConfig, Mode};
use hscrf::gradcheck::{check, BlockReport, Input, DEFAULT_STEP, DEFAULT_TOLERANCE};
use hscrf::hscrf::{BaselineScrf, Hscrf, SegmentScorer, SemiCrf};
use hscrf::joint::JointModel;
use hscrf::labels::{labels_from_segmentation, EntityLabelSet, SegLabel, Segment, Segmentation};
use hscrf::math::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_all_pass(reports: &[BlockReport], ctx: &str) {
    for r in reports {
        assert!(r.passed, "{ctx}: {r}");
    }
}

fn random_segmentation<R: Rng>(n: usize, max_len: usize, types: usize, rng: &mut R) -> Segmentation {
    let mut segs = Vec::new();
    let mut b = 1;
    while b <= n {
        if rng.gen_bool(0.4) {
            segs.push(Segment::new(b, b, SegLabel::Outside));
            b += 1;
        } else {
            let len = rng.gen_range(1..=max_len.min(n - b + 1));
            segs.push(Segment::new(b, b + len - 1, SegLabel::Entity(rng.gen_range(0..types))));
            b += len;
        }
    }
    Segmentation::new(segs, n).unwrap()
}

#[test]
fn crf_gradients() {
    let labels = EntityLabelSet::new(["A", "B"]).unwrap();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let mut p = CrfParams::random(&labels, d, 1.0, &mut rng);
        let w = Matrix::random(n, d, 1.0, &mut rng);
        let s = random_segmentation(n, n, 2, &mut rng);
        let y = labels_from_segmentation(&s, n).unwrap();
        let mut g = p.zeros_like();
        let (_, gw) = p.nll_backward(&w, &y, &mut g).unwrap();
        let r = check(&mut p, &g, |p| p.nll(&w, &y).unwrap(), DEFAULT_STEP, DEFAULT_TOLERANCE);
        assert_all_pass(&r, "crf params");
        let mut input = Input(w.clone());
        let r = check(&mut input, &Input(gw), |x| p.nll(&x.0, &y).unwrap(), DEFAULT_STEP, DEFAULT_TOLERANCE);
        assert_all_pass(&r, "crf input");
    }
}

fn check_semi<S: SegmentScorer>(layer: &mut SemiCrf<S>, w: &Matrix, s: &Segmentation, ctx: &str) {
    let mut g = layer.zeros_like();
    let (_, gw) = layer.nll_backward(w, s, &mut g).unwrap();
    let r = check(layer, &g, |l| l.nll(w, s).unwrap(), DEFAULT_STEP, DEFAULT_TOLERANCE);
    assert_all_pass(&r, ctx);
    let mut input = Input(w.clone());
    let r = check(&mut input, &Input(gw), |x| layer.nll(&x.0, s).unwrap(), DEFAULT_STEP, DEFAULT_TOLERANCE);
    assert_all_pass(&r, ctx);
}

#[test]
fn hscrf_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let types = rng.gen_range(1..=3);
        let max_len = rng.gen_range(1..=3);
        let mut h = Hscrf::hybrid_random(types, d, max_len, 3, 1.0, &mut rng);
        let w = Matrix::random(n, d, 1.0, &mut rng);
        let s = random_segmentation(n, max_len, types, &mut rng);
        check_semi(&mut h, &w, &s, &format!("hscrf seed {seed}"));
    }
}

#[test]
fn baseline_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let types = rng.gen_range(1..=3);
        let max_len = rng.gen_range(1..=3);
        let mut b = BaselineScrf::baseline_random(types, d, max_len, 2, 1.0, &mut rng);
        let w = Matrix::random(n, d, 1.0, &mut rng);
        let s = random_segmentation(n, max_len, types, &mut rng);
        check_semi(&mut b, &w, &s, &format!("baseline seed {seed}"));
    }
}

#[test]
fn encoder_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let config = EncoderConfig {
            vocab_size: rng.gen_range(2..=20),
            embedding_dim: rng.gen_range(1..=8),
            hidden_dim: rng.gen_range(1..=4),
            use_recurrent_layer: seed % 3 != 0,
            dropout_rate: 0.0,
            seed,
        };
        let n = rng.gen_range(1..=6);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        let mut enc = Encoder::new(config.clone()).unwrap();
        let proj = Matrix::random(n, config.output_dim(), 1.0, &mut rng);
        let loss = |e: &Encoder| {
            let w = e.encode(&ids, Mode::Eval).w;
            w.as_slice().iter().zip(proj.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let out = enc.encode(&ids, Mode::Eval);
        let g = enc.backward(&out, &proj).unwrap();
        let cfg = enc.config.clone();
        let mut params = enc.params.clone();
        let r = check(
            &mut params,
            &g,
            |p| {
                let e = Encoder {
                    config: cfg.clone(),
                    params: p.clone(),
                };
                loss(&e)
            },
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
        );
        assert_all_pass(&r, &format!("encoder seed {seed}"));
        enc.params = params;
    }
}

#[test]
fn joint_gradient_is_sum_of_layers() {
    let labels = EntityLabelSet::new(["A", "B"]).unwrap();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let mut m = JointModel {
            crf: CrfParams::random(&labels, d, 1.0, &mut rng),
            hscrf: Hscrf::hybrid_random(2, d, 3, 2, 1.0, &mut rng),
        };
        let w = Matrix::random(n, d, 1.0, &mut rng);
        let s = random_segmentation(n, 3, 2, &mut rng);
        let y = labels_from_segmentation(&s, n).unwrap();
        let mut g = m.zeros_like();
        let (_, gw) = m.loss_backward(&w, &y, &s, &mut g).unwrap();

        let mut gc = m.crf.zeros_like();
        let (_, gwc) = m.crf.nll_backward(&w, &y, &mut gc).unwrap();
        let mut gh = m.hscrf.zeros_like();
        let (_, gwh) = m.hscrf.nll_backward(&w, &s, &mut gh).unwrap();
        let mut sum = gwc.clone();
        sum.axpy(1.0, &gwh);
        for (a, b) in gw.as_slice().iter().zip(sum.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        let r = check(&mut m, &g, |m| m.loss(&w, &y, &s).unwrap(), DEFAULT_STEP, DEFAULT_TOLERANCE);
        assert_all_pass(&r, "joint params");
        let mut input = Input(w.clone());
        let r = check(&mut input, &Input(gw), |x| m.loss(&x.0, &y, &s).unwrap(), DEFAULT_STEP, DEFAULT_TOLERANCE);
        assert_all_pass(&r, "joint input");
    }
}

#[test]
fn zero_parameters_give_exactly_zero_emission_errors() {
    let labels = EntityLabelSet::new(["A"]).unwrap();
    let mut p = CrfParams::zeros(&labels, 3);
    let w = Matrix::zeros(3, 3);
    let s = Segmentation::from_triples(&[(1, 2, SegLabel::Entity(0)), (3, 3, SegLabel::Outside)], 3).unwrap();
    let y = labels_from_segmentation(&s, 3).unwrap();
    let mut g = p.zeros_like();
    p.nll_backward(&w, &y, &mut g).unwrap();
    assert_eq!(g.emission.sq_norm(), 0.0);
    let r = check(&mut p, &g, |p| p.nll(&w, &y).unwrap(), DEFAULT_STEP, DEFAULT_TOLERANCE);
    assert_eq!(r[0].name, "crf.emission");
    assert_eq!(r[0].relative_error, 0.0);
    assert_eq!(r[0].max_abs_error, 0.0);
}
