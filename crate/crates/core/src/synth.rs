//! Seeded synthetic FFNs and token streams for tests, benchmarks and the
//! bundled fixture.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::grouping::Partition;
use crate::profile::DenseFfn;
use crate::tensor::Matrix;

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// FFN with i.i.d. uniform weights of variance `1/d` (up/gate) and `1/d_h`
/// (down).
pub fn random_ffn(rng: &mut impl Rng, d: usize, d_h: usize) -> DenseFfn {
    let a = (3.0 / d as f32).sqrt();
    let b = (3.0 / d_h as f32).sqrt();
    let w_up = uniform(rng, d, d_h, a);
    let w_gate = uniform(rng, d, d_h, a);
    let w_down = uniform(rng, d_h, d, b);
    DenseFfn::new(w_up, w_gate, w_down).expect("shapes are consistent by construction")
}

/// `q × d` tokens with entries uniform in `[-1, 1)`.
pub fn random_tokens(rng: &mut impl Rng, q: usize, d: usize) -> Matrix {
    uniform(rng, q, d, 1.0)
}

/// FFN whose neurons come in `groups` blocks of `m`; every neuron of block
/// `k` reads (mostly) input direction `k`, so blocks fire together.
#[derive(Clone, Debug)]
pub struct GroupedLayer {
    pub ffn: DenseFfn,
    /// Block of each neuron.
    pub group_of: Vec<usize>,
    pub groups: usize,
}

/// Builds a [`GroupedLayer`] with `d ≥ groups`. Neuron order is shuffled so
/// blocks are not contiguous.
pub fn grouped_ffn(
    rng: &mut impl Rng,
    d: usize,
    groups: usize,
    m: usize,
    noise: f32,
) -> GroupedLayer {
    assert!(d >= groups, "need one input direction per group");
    let d_h = groups * m;
    let mut group_of: Vec<usize> = (0..d_h).map(|i| i / m).collect();
    group_of.shuffle(rng);
    let mut w_up = uniform(rng, d, d_h, noise);
    let mut w_gate = uniform(rng, d, d_h, noise);
    for (i, &g) in group_of.iter().enumerate() {
        let gain: f32 = rng.gen_range(0.8..1.2);
        w_gate.set(g, i, w_gate.get(g, i) + 2.0 * gain);
        w_up.set(g, i, w_up.get(g, i) + gain);
    }
    let b = (3.0 / d_h as f32).sqrt();
    let w_down = uniform(rng, d_h, d, b);
    GroupedLayer {
        ffn: DenseFfn::new(w_up, w_gate, w_down).expect("consistent shapes"),
        group_of,
        groups,
    }
}

/// Tokens for a [`GroupedLayer`]: direction 0 is always on, plus `per_token`
/// of the directions `1..groups` drawn with the given relative weights
/// (uniform when `weights` is `None`), each with amplitude in `[1, 2)`.
pub fn grouped_tokens(
    rng: &mut impl Rng,
    q: usize,
    d: usize,
    groups: usize,
    per_token: usize,
    weights: Option<&[f64]>,
    noise: f32,
) -> Matrix {
    let choices: Vec<usize> = (1..groups).collect();
    let mut x = uniform(rng, q, d, noise);
    for t in 0..q {
        let picked: Vec<usize> = match weights {
            Some(w) => choices
                .choose_multiple_weighted(rng, per_token, |&g| w[g - 1])
                .expect("valid weights")
                .copied()
                .collect(),
            None => choices.choose_multiple(rng, per_token).copied().collect(),
        };
        let row = x.row_mut(t);
        row[0] += 1.0;
        for g in picked {
            row[g] += rng.gen_range(1.0..2.0);
        }
    }
    x
}

/// A hand-partitioned layer whose router affinities sit in a narrow band,
/// with expert 0 favoured by `skew`. Used to exercise load balancing.
#[derive(Clone, Debug)]
pub struct SkewedRouterLayer {
    pub ffn: DenseFfn,
    pub partition: Partition,
    pub tokens: Matrix,
}

/// Token `x = [1, z_1, …, z_R]` with `z ~ U(-spread, spread)`; the
/// representative of expert `j` has up column `e_0` and gate column
/// `skew_j·e_0 + e_{j+1}`, so `s_j = Swish(skew_j + z_{j+1})`.
pub fn skewed_router_layer(
    rng: &mut impl Rng,
    n_routed: usize,
    m: usize,
    skew: f32,
    spread: f32,
    q: usize,
) -> SkewedRouterLayer {
    let d = n_routed + 1;
    let d_h = n_routed * m;
    let mut w_up = uniform(rng, d, d_h, 0.3);
    let mut w_gate = uniform(rng, d, d_h, 0.3);
    let w_down = uniform(rng, d_h, d, 0.3);
    let mut clusters = Vec::with_capacity(n_routed);
    let mut reps = Vec::with_capacity(n_routed);
    for j in 0..n_routed {
        let rep = j * m;
        for r in 0..d {
            w_up.set(r, rep, if r == 0 { 1.0 } else { 0.0 });
            w_gate.set(r, rep, 0.0);
        }
        w_gate.set(0, rep, if j == 0 { skew } else { 0.0 });
        w_gate.set(j + 1, rep, 1.0);
        clusters.push((rep..rep + m).collect());
        reps.push(rep);
    }
    let tokens = Matrix::from_fn(q, d, |_, c| {
        if c == 0 {
            1.0
        } else {
            rng.gen_range(-spread..spread)
        }
    });
    SkewedRouterLayer {
        ffn: DenseFfn::new(w_up, w_gate, w_down).expect("consistent shapes"),
        partition: Partition {
            shared: Vec::new(),
            clusters,
            centroids: Vec::new(),
            representatives: reps,
        },
        tokens,
    }
}
