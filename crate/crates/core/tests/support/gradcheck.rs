//! Central finite-difference oracle for the autoencoder gradients.

use sdtrack::encoder::{Batch, EncoderState, Losses, Objective};

fn pick(l: Losses, objective: Objective) -> f64 {
    match objective {
        Objective::Total => l.total,
        Objective::BottleneckOnly => l.bottleneck,
    }
}

/// `|a - n| / max(|a|, |n|)` in the 2-norm, falling back to the absolute
/// difference when both vectors are negligible.
pub fn tensor_rel(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let denom = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if denom < 1e-8 {
        diff
    } else {
        diff / denom
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// Oracle with every ReLU held at its base-point pattern.
    pub frozen: f64,
    /// Oracle on the raw loss; ReLU kinks inside `[-eps, eps]` bias it.
    pub plain: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub tensors: Vec<TensorCheck>,
    pub entries: usize,
    /// Entries whose `+eps` or `-eps` evaluation flips at least one ReLU.
    pub kinked_entries: usize,
}

impl GradCheck {
    pub fn worst_frozen(&self) -> &TensorCheck {
        self.tensors.iter().max_by(|a, b| a.frozen.total_cmp(&b.frozen)).unwrap()
    }

    pub fn worst_plain(&self) -> &TensorCheck {
        self.tensors.iter().max_by(|a, b| a.plain.total_cmp(&b.plain)).unwrap()
    }
}

pub fn check(state: &mut EncoderState, prev: &Batch, curr: &Batch, objective: Objective, eps: f64) -> GradCheck {
    let (_, grads, _) = state.loss_and_gradients(prev, curr, objective).unwrap();
    let gates = state.pair_relu_gates(prev, curr).unwrap();
    let mut out = GradCheck { tensors: Vec::new(), entries: 0, kinked_entries: 0 };
    for i in 0..state.params.len() {
        let Some(g) = grads.grads[i].clone() else {
            continue;
        };
        let (mut frozen, mut plain) = (vec![0.0; g.len()], vec![0.0; g.len()]);
        for j in 0..g.len() {
            let orig = state.params[i].value[j];
            let mut eval = |v: f64| {
                state.params[i].value[j] = v;
                let f = pick(state.pair_loss_gated(prev, curr, &gates).unwrap(), objective);
                let (p, _, _) = state.loss_and_gradients(prev, curr, objective).unwrap();
                let same = state.pair_relu_gates(prev, curr).unwrap() == gates;
                (f, pick(p, objective), same)
            };
            let (fu, pu, su) = eval(orig + eps);
            let (fd, pd, sd) = eval(orig - eps);
            state.params[i].value[j] = orig;
            frozen[j] = (fu - fd) / (2.0 * eps);
            plain[j] = (pu - pd) / (2.0 * eps);
            out.entries += 1;
            if !(su && sd) {
                out.kinked_entries += 1;
            }
        }
        out.tensors.push(TensorCheck {
            name: state.params[i].name.clone(),
            frozen: tensor_rel(&g, &frozen),
            plain: tensor_rel(&g, &plain),
        });
    }
    out
}
