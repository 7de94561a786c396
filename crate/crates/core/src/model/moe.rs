//! Top-1 sparse mixture-of-experts with capacity-bounded dispatch.
//!
//! Each token goes to its highest-probability expert (ties to the lowest
//! index). An expert keeps at most `capacity` tokens in arrival order; the
//! rest are dropped, contribute nothing, and reach the output only through
//! the block's residual connection. Kept outputs are scaled by their gate
//! probability. The balance loss is `E · Σ_e f_e · P_e`, with `f_e` the
//! pre-drop fraction of tokens sent to `e` and `P_e` its mean gate probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

/// Per-call routing summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    /// Tokens processed by each expert (after capacity).
    pub counts: Vec<usize>,
    /// Tokens assigned to each expert before capacity.
    pub assigned: Vec<usize>,
    pub mean_gate_prob: Vec<f64>,
    pub dropped: usize,
    pub capacity: usize,
    pub aux_loss: f64,
}

impl RoutingReport {
    pub fn total_tokens(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.dropped
    }
}

/// Dispatch decision for one batch of tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dispatch {
    /// Chosen expert per token.
    pub assignment: Vec<usize>,
    /// Kept token indices per expert, in arrival order.
    pub kept: Vec<Vec<usize>>,
    /// Dropped token indices, ascending.
    pub dropped: Vec<usize>,
    pub capacity: usize,
}

/// `max(1, floor(capacity_factor · tokens / experts))`
pub fn expert_capacity(tokens: usize, experts: usize, capacity_factor: f64) -> usize {
    ((capacity_factor * tokens as f64 / experts as f64).floor() as usize).max(1)
}

/// Route `[tokens, experts]` gate probabilities.
pub fn dispatch<T: Scalar>(probs: &[T], experts: usize, capacity_factor: f64) -> Result<Dispatch> {
    if experts == 0 {
        return Err(Error::InvalidArgument("MoE needs at least one expert".into()));
    }
    let tokens = probs.len() / experts;
    let capacity = expert_capacity(tokens, experts, capacity_factor);
    let mut assignment = Vec::with_capacity(tokens);
    let mut kept = vec![Vec::new(); experts];
    let mut dropped = Vec::new();
    for t in 0..tokens {
        let row = &probs[t * experts..(t + 1) * experts];
        let mut best = 0;
        for (e, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = e;
            }
        }
        assignment.push(best);
        if kept[best].len() < capacity {
            kept[best].push(t);
        } else {
            dropped.push(t);
        }
    }
    Ok(Dispatch {
        assignment,
        kept,
        dropped,
        capacity,
    })
}

/// Parameters of one two-layer GELU expert (`[in, out]` weight layout).
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// `gelu(x·W1 + b1)·W2 + b2`
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ExpertVars) -> Result<Var> {
    let h = tape.matmul(x, p.fc1_w)?;
    let h = tape.add(h, p.fc1_b)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, p.fc2_w)?;
    tape.add(y, p.fc2_b)
}

pub struct MoeOutput {
    pub y: Var,
    pub aux_loss: Var,
    pub report: RoutingReport,
}

/// Sparse feed-forward over `x: [T, D]` with gate weights `[D, E]`.
pub fn moe_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gate: Var,
    experts: &[ExpertVars],
    capacity_factor: f64,
) -> Result<MoeOutput> {
    let num_experts = experts.len();
    if num_experts == 0 {
        return Err(Error::InvalidArgument("MoE needs at least one expert".into()));
    }
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[0] == 0 {
        return Err(Error::InvalidArgument(format!("moe_forward expects [T>=1, D], got {:?}", xs)));
    }
    let (tokens, width) = (xs[0], xs[1]);
    let logits = tape.matmul(x, gate)?;
    let probs = tape.softmax(logits)?;
    let route = dispatch(tape.value(probs).data(), num_experts, capacity_factor)?;

    let mut y = tape.constant(Tensor::zeros(&[tokens, width]));
    for (e, kept) in route.kept.iter().enumerate() {
        if kept.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, kept)?;
        let he = mlp(tape, xe, &experts[e])?;
        let flat: Vec<usize> = kept.iter().map(|&t| t * num_experts + e).collect();
        let ge = tape.take(probs, &flat, &[kept.len(), 1])?;
        let scaled = tape.mul(he, ge)?;
        y = tape.index_add_rows(y, kept, scaled)?;
    }

    let mut assigned = vec![0usize; num_experts];
    for &e in &route.assignment {
        assigned[e] += 1;
    }
    let fractions: Vec<f64> = assigned.iter().map(|&c| c as f64 / tokens as f64).collect();
    let mean_probs = tape.mean_axis(probs, 0)?;
    let f = tape.constant(Tensor::from_f64(&[num_experts], &fractions)?);
    let fp = tape.mul(mean_probs, f)?;
    let s = tape.sum(fp);
    let aux_loss = tape.scale(s, T::of(num_experts as f64));

    let report = RoutingReport {
        counts: route.kept.iter().map(Vec::len).collect(),
        assigned,
        mean_gate_prob: tape.value(mean_probs).data().iter().map(|p| p.f64()).collect(),
        dropped: route.dropped.len(),
        capacity: route.capacity,
        aux_loss: tape.value(aux_loss).item().f64(),
    };
    Ok(MoeOutput { y, aux_loss, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_formula() {
        assert_eq!(expert_capacity(64, 8, 1.25), 10);
        assert_eq!(expert_capacity(4, 8, 1.25), 1);
        assert_eq!(expert_capacity(4, 2, 1.25), 2);
    }

    #[test]
    fn ties_go_to_lowest_expert() {
        let d = dispatch(&[0.5f32, 0.5, 0.25, 0.25, 0.25, 0.25], 2, 8.0).unwrap();
        assert_eq!(d.assignment, vec![0, 0, 0]);
        let d = dispatch(&[0.25f64; 8], 4, 1.0).unwrap();
        assert_eq!(d.assignment, vec![0, 0]);
    }

    #[test]
    fn zero_experts_rejected() {
        assert!(dispatch::<f32>(&[], 0, 1.25).is_err());
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let g = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(moe_forward(&mut tape, x, g, &[], 1.25).is_err());
    }
}
