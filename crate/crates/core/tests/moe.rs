use proptest::prelude::*;

use msgfm::model::moe::{dispatch, expert_capacity, moe_forward, ExpertVars};
use msgfm::numeric::{Tape, Tensor};

fn aux_of(probs: &[f64], experts: usize) -> f64 {
    let d = dispatch(probs, experts, 1.25).unwrap();
    let tokens = probs.len() / experts;
    (0..experts)
        .map(|e| {
            let f = d.assignment.iter().filter(|&&a| a == e).count() as f64 / tokens as f64;
            let p = (0..tokens).map(|t| probs[t * experts + e]).sum::<f64>() / tokens as f64;
            f * p
        })
        .sum::<f64>()
        * experts as f64
}

/// Balance term through the autodiff path, from gate logits equal to
/// `ln p` so the softmax reproduces `probs` exactly up to rounding.
fn aux_through_tape(probs: &[f64], experts: usize) -> f64 {
    let tokens = probs.len() / experts;
    let mut tape = Tape::<f64>::new();
    // Identity gate: the "tokens" are the logits themselves.
    let x = tape.constant(Tensor::new(vec![tokens, experts], probs.iter().map(|p| p.ln()).collect()).unwrap());
    let mut eye = vec![0.0; experts * experts];
    for e in 0..experts {
        eye[e * experts + e] = 1.0;
    }
    let gate = tape.constant(Tensor::new(vec![experts, experts], eye).unwrap());
    let ex: Vec<ExpertVars> = (0..experts)
        .map(|_| ExpertVars {
            fc1_w: tape.constant(Tensor::zeros(&[experts, 2])),
            fc1_b: tape.constant(Tensor::zeros(&[2])),
            fc2_w: tape.constant(Tensor::zeros(&[2, experts])),
            fc2_b: tape.constant(Tensor::zeros(&[experts])),
        })
        .collect();
    let out = moe_forward(&mut tape, x, gate, &ex, 1.25).unwrap();
    tape.value(out.aux_loss).item()
}

#[test]
fn balance_term_can_fall_below_one() {
    // One confident token on expert 0, two near-ties leaning to expert 1.
    let probs = [0.99, 0.01, 0.49, 0.51, 0.49, 0.51];
    let oracle = 2.0 * ((1.0 / 3.0) * (1.97 / 3.0) + (2.0 / 3.0) * (1.03 / 3.0));
    assert!((aux_of(&probs, 2) - oracle).abs() < 1e-12);
    let aux = aux_through_tape(&probs, 2);
    assert!((aux - oracle).abs() < 1e-9, "{} vs {}", aux, oracle);
    assert!(aux < 1.0);
}

proptest! {
    /// With routing ignored, `E · Σ P_e²` is at least 1 by Cauchy-Schwarz.
    #[test]
    fn squared_mean_probs_bound(raw in prop::collection::vec(0.01f64..1.0, 4..64)) {
        let experts = 4;
        let tokens = raw.len() / experts;
        let mut probs = raw[..tokens * experts].to_vec();
        for row in probs.chunks_mut(experts) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        let p: Vec<f64> = (0..experts).map(|e| (0..tokens).map(|t| probs[t * experts + e]).sum::<f64>() / tokens as f64).collect();
        prop_assert!(experts as f64 * p.iter().map(|x| x * x).sum::<f64>() >= 1.0 - 1e-12);
    }

    #[test]
    fn dispatch_conserves_tokens(raw in prop::collection::vec(0.0f64..1.0, 8..400), cf in 0.5f64..2.0) {
        let experts = 8;
        let tokens = raw.len() / experts;
        let probs = &raw[..tokens * experts];
        let d = dispatch(probs, experts, cf).unwrap();
        prop_assert_eq!(d.capacity, expert_capacity(tokens, experts, cf));
        let kept: usize = d.kept.iter().map(Vec::len).sum();
        prop_assert_eq!(kept + d.dropped.len(), tokens);
        for k in &d.kept {
            prop_assert!(k.len() <= d.capacity);
            prop_assert!(k.windows(2).all(|w| w[0] < w[1]));
        }
        for (t, &e) in d.assignment.iter().enumerate() {
            let row = &probs[t * experts..(t + 1) * experts];
            prop_assert!(row.iter().all(|&p| p <= row[e]));
            prop_assert!(row[..e].iter().all(|&p| p < row[e]));
        }
    }
}

#[test]
fn capacity_never_zero() {
    assert_eq!(expert_capacity(1, 8, 1.25), 1);
    assert_eq!(expert_capacity(7, 8, 1.0), 1);
    assert_eq!(expert_capacity(16, 8, 1.25), 2);
}

#[test]
fn report_counts_add_up() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![6, 2], vec![1.0, 0.0, 0.9, 0.1, 1.0, 0.2, 0.0, 1.0, 0.8, 0.0, 1.0, 0.1]).unwrap());
    let gate = tape.constant(Tensor::new(vec![2, 2], vec![3.0, -3.0, -3.0, 3.0]).unwrap());
    let ex: Vec<ExpertVars> = (0..2)
        .map(|_| ExpertVars {
            fc1_w: tape.constant(Tensor::full(&[2, 4], 0.5)),
            fc1_b: tape.constant(Tensor::zeros(&[4])),
            fc2_w: tape.constant(Tensor::full(&[4, 2], 0.5)),
            fc2_b: tape.constant(Tensor::zeros(&[2])),
        })
        .collect();
    let out = moe_forward(&mut tape, x, gate, &ex, 1.0).unwrap();
    let r = &out.report;
    assert_eq!(r.capacity, 3);
    assert_eq!(r.assigned, vec![5, 1]);
    assert_eq!(r.counts, vec![3, 1]);
    assert_eq!(r.dropped, 2);
    assert_eq!(r.total_tokens(), 6);
    // Dropped tokens (the 4th and 5th routed to expert 0) produce zeros.
    let y = tape.value(out.y).data();
    assert!(y[8..12].iter().all(|&v| v == 0.0));
    assert!(y[..6].iter().all(|&v| v != 0.0));
}
