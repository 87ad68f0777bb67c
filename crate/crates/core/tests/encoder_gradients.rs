use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtrack::encoder::{Batch, EncoderConfig, EncoderState, Objective};

mod support;
use support::gradcheck::{check, GradCheck};

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn blob_batch(rng: &mut ChaCha8Rng, n: usize, res: usize) -> Batch {
    // soft elliptical blobs at random depth, like fused object maps
    let mut data = Vec::with_capacity(n * res * res);
    for _ in 0..n {
        let (cx, cy) = (rng.random_range(5.0..11.0), rng.random_range(5.0..11.0));
        let (rx, ry) = (rng.random_range(3.0..7.0), rng.random_range(3.0..7.0));
        let depth: f64 = rng.random_range(0.2..1.0);
        for y in 0..res {
            for x in 0..res {
                let d = ((x as f64 + 0.5 - cx) / rx).powi(2) + ((y as f64 + 0.5 - cy) / ry).powi(2);
                let v = if d <= 1.0 { depth * (1.0 - 0.3 * d) + rng.random_range(-0.05..0.05) } else { 0.0 };
                data.push(v);
            }
        }
    }
    Batch::new(n, res, data).unwrap()
}

fn uniform_batch(rng: &mut ChaCha8Rng, n: usize, res: usize) -> Batch {
    Batch::new(n, res, (0..n * res * res).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn assert_matches(r: &GradCheck) {
    let w = r.worst_frozen();
    assert!(w.frozen <= TOL, "relative error {:e} on {}", w.frozen, w.name);
}

#[test]
fn tiny_total_loss_gradients_match_central_differences() {
    let mut state = EncoderState::new(EncoderConfig::tiny(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let prev = uniform_batch(&mut rng, 4, 16);
    let curr = uniform_batch(&mut rng, 4, 16);
    assert_matches(&check(&mut state, &prev, &curr, Objective::Total, EPS));
}

#[test]
fn tiny_blob_gradients_match_central_differences() {
    let mut state = EncoderState::new(EncoderConfig::tiny(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let prev = blob_batch(&mut rng, 4, 16);
    let curr = blob_batch(&mut rng, 4, 16);
    assert_matches(&check(&mut state, &prev, &curr, Objective::Total, EPS));
}

#[test]
fn tiny_bottleneck_only_gradients_match_and_skip_decoder() {
    let mut state = EncoderState::new(EncoderConfig::tiny(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prev = blob_batch(&mut rng, 4, 16);
    let curr = blob_batch(&mut rng, 4, 16);
    let (_, grads, _) = state.loss_and_gradients(&prev, &curr, Objective::BottleneckOnly).unwrap();
    for (p, g) in state.params.iter().zip(&grads.grads) {
        assert_eq!(p.name.starts_with("dec."), g.is_none(), "{}", p.name);
    }
    assert_matches(&check(&mut state, &prev, &curr, Objective::BottleneckOnly, EPS));
}

#[test]
fn zero_input_output_bias_gradient_has_closed_form() {
    let cfg = EncoderConfig::tiny();
    let mut state = EncoderState::new(cfg.clone(), 1).unwrap();
    for p in state.params.iter_mut() {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let b = 0.25;
    state.param_mut("dec.deconv0.bias").unwrap().value = vec![b];
    let zeros = Batch::new(3, 16, vec![0.0; 3 * 256]).unwrap();
    let (losses, grads, _) = state.loss_and_gradients(&zeros, &zeros, Objective::Total).unwrap();
    // every activation vanishes, so the reconstruction is the constant bias
    assert!((losses.recon - 256.0 * b * b).abs() < 1e-12);
    assert_eq!(losses.bottleneck, 0.0);
    let idx = state.params.iter().position(|p| p.name == "dec.deconv0.bias").unwrap();
    let g = grads.grads[idx].as_ref().unwrap()[0];
    assert!((g - 2.0 * 256.0 * b).abs() < 1e-9, "{g}");
    for (p, g) in state.params.iter().zip(&grads.grads) {
        if p.name.starts_with("enc.") {
            assert!(g.as_ref().unwrap().iter().all(|v| *v == 0.0), "{}", p.name);
        }
    }
}

#[test]
fn doubling_the_loss_doubles_gradients() {
    let state = EncoderState::new(EncoderConfig::tiny(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prev = blob_batch(&mut rng, 3, 16);
    let curr = blob_batch(&mut rng, 3, 16);
    let (_, g, _) = state.loss_and_gradients(&prev, &curr, Objective::Total).unwrap();
    let mut doubled = g.clone();
    doubled.scale(2.0);
    for (a, b) in g.grads.iter().flatten().zip(doubled.grads.iter().flatten()) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(2.0 * x, *y);
        }
    }
}
