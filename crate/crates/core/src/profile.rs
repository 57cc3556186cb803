//! Activation profiling over a calibration batch.
//!
//! A neuron is marked active for a token when its hidden value is among the
//! `k_a` largest in absolute value (ATopK). Stacking the markers gives the
//! `q × d_h` matrix `A`; its columns are the per-neuron feature vectors used
//! for clustering, and its column means are the activation rates `μ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{hadamard, matmul, swish, swish_scalar, vec_mat, Matrix};

/// One SwiGLU feed-forward block: `F(x) = (Swish(x·W_gate) ⊙ (x·W_up))·W_down`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFfn {
    w_up: Matrix,
    w_gate: Matrix,
    w_down: Matrix,
}

impl DenseFfn {
    /// `w_up`, `w_gate`: `d × d_h`; `w_down`: `d_h × d`.
    pub fn new(w_up: Matrix, w_gate: Matrix, w_down: Matrix) -> Result<Self> {
        if w_up.shape() != w_gate.shape() {
            return Err(Error::ShapeMismatch {
                op: "DenseFfn::new (up/gate)",
                left: w_up.shape(),
                right: w_gate.shape(),
            });
        }
        if w_down.shape() != (w_up.cols(), w_up.rows()) {
            return Err(Error::ShapeMismatch {
                op: "DenseFfn::new (up/down)",
                left: w_up.shape(),
                right: w_down.shape(),
            });
        }
        Ok(Self {
            w_up,
            w_gate,
            w_down,
        })
    }

    /// Model width `d`.
    pub fn d(&self) -> usize {
        self.w_up.rows()
    }

    /// Intermediate width `d_h` (number of neurons).
    pub fn d_h(&self) -> usize {
        self.w_up.cols()
    }

    pub fn w_up(&self) -> &Matrix {
        &self.w_up
    }

    pub fn w_gate(&self) -> &Matrix {
        &self.w_gate
    }

    pub fn w_down(&self) -> &Matrix {
        &self.w_down
    }

    /// Raw hidden state `h` of one token.
    pub fn hidden(&self, x: &[f32]) -> Result<Vec<f32>> {
        swiglu_hidden(x, &self.w_gate, &self.w_up)
    }

    /// Dense output `F(x) = h·W_down`.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let h = self.hidden(x)?;
        vec_mat(&h, &self.w_down)
    }

    /// Output with every hidden entry outside the ATopK set zeroed.
    pub fn forward_atopk(&self, x: &[f32], k_a: usize) -> Result<Vec<f32>> {
        let h = self.hidden(x)?;
        let keep = atopk_markers(&h, k_a)?;
        let h: Vec<f32> = h
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k == 1 { v } else { 0.0 })
            .collect();
        vec_mat(&h, &self.w_down)
    }
}

/// `Swish(x·W_gate) ⊙ (x·W_up)` for a single row vector.
pub(crate) fn swiglu_hidden(x: &[f32], w_gate: &Matrix, w_up: &Matrix) -> Result<Vec<f32>> {
    let g = vec_mat(x, w_gate)?;
    let u = vec_mat(x, w_up)?;
    Ok(g.into_iter()
        .zip(u)
        .map(|(g, u)| swish_scalar(g) * u)
        .collect())
}

/// Pre-flattened calibration tokens, `q × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    x: Matrix,
}

impl CalibrationBatch {
    pub fn new(x: Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Empty("CalibrationBatch"));
        }
        Ok(Self { x })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }
}

/// Binary ATopK markers over the calibration tokens plus activation rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    q: usize,
    d_h: usize,
    k_a: usize,
    /// Row-major `q × d_h`, entries 0 or 1.
    markers: Vec<u8>,
    rates: Vec<f64>,
}

impl ActivationProfile {
    /// Rebuilds a profile from stored markers, recomputing the rates.
    pub fn from_markers(q: usize, d_h: usize, k_a: usize, markers: Vec<u8>) -> Result<Self> {
        if q == 0 {
            return Err(Error::Empty("ActivationProfile"));
        }
        if markers.len() != q * d_h {
            return Err(Error::ShapeMismatch {
                op: "ActivationProfile::from_markers",
                left: (q, d_h),
                right: (markers.len(), 1),
            });
        }
        for (t, row) in markers.chunks(d_h).enumerate() {
            let ones = row.iter().filter(|&&v| v == 1).count();
            if row.iter().any(|&v| v > 1) || ones != k_a {
                return Err(Error::InvalidConfig(format!(
                    "marker row {t} has {ones} ones, expected {k_a}"
                )));
            }
        }
        let rates = rates_of(&markers, q, d_h);
        Ok(Self {
            q,
            d_h,
            k_a,
            markers,
            rates,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn k_a(&self) -> usize {
        self.k_a
    }

    pub fn markers(&self) -> &[u8] {
        &self.markers
    }

    pub fn marker_row(&self, token: usize) -> &[u8] {
        &self.markers[token * self.d_h..(token + 1) * self.d_h]
    }

    /// Activation rates `μ`.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Feature vector `c_i`: column `i` of the marker matrix.
    pub fn feature(&self, neuron: usize) -> Vec<f64> {
        (0..self.q)
            .map(|t| self.markers[t * self.d_h + neuron] as f64)
            .collect()
    }

    /// Counts of `μ` in `bins` equal-width bins over `[0, 1]`; `μ = 1` lands in
    /// the last bin.
    pub fn rate_histogram(&self, bins: usize) -> Vec<usize> {
        let mut counts = vec![0usize; bins];
        if bins == 0 {
            return counts;
        }
        for &r in &self.rates {
            let b = ((r * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        counts
    }
}

fn rates_of(markers: &[u8], q: usize, d_h: usize) -> Vec<f64> {
    let mut counts = vec![0u64; d_h];
    for row in markers.chunks(d_h) {
        for (c, &m) in counts.iter_mut().zip(row) {
            *c += m as u64;
        }
    }
    counts.into_iter().map(|c| c as f64 / q as f64).collect()
}

fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let norm = m
            .row(r)
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm {
                axis: "token row",
                index: r,
            });
        }
        for v in out.row_mut(r) {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(out)
}

fn normalize_columns(m: &Matrix, axis: &'static str) -> Result<Matrix> {
    let mut norms = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (n, &v) in norms.iter_mut().zip(m.row(r)) {
            *n += (v as f64) * (v as f64);
        }
    }
    if let Some(c) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm { axis, index: c });
    }
    let norms: Vec<f64> = norms.into_iter().map(f64::sqrt).collect();
    let mut out = m.clone();
    for r in 0..m.rows() {
        for (v, &n) in out.row_mut(r).iter_mut().zip(&norms) {
            *v = (*v as f64 / n) as f32;
        }
    }
    Ok(out)
}

/// Hidden states `H = Swish(X·W_gate) ⊙ (X·W_up)` for the whole batch.
///
/// With `normalize`, each token row of `X` and each neuron column of `W_gate`
/// and `W_up` is scaled to unit L2 norm first.
pub fn hidden_states(batch: &CalibrationBatch, ffn: &DenseFfn, normalize: bool) -> Result<Matrix> {
    if batch.width() != ffn.d() {
        return Err(Error::ShapeMismatch {
            op: "hidden_states",
            left: batch.tokens().shape(),
            right: ffn.w_up().shape(),
        });
    }
    let (x, gate, up) = if normalize {
        (
            normalize_rows(batch.tokens())?,
            normalize_columns(ffn.w_gate(), "w_gate column")?,
            normalize_columns(ffn.w_up(), "w_up column")?,
        )
    } else {
        (
            batch.tokens().clone(),
            ffn.w_gate().clone(),
            ffn.w_up().clone(),
        )
    };
    hadamard(&swish(&matmul(&x, &gate)?), &matmul(&x, &up)?)
}

/// ATopK markers: ones at the `k_a` entries of largest `|h_i|`, ties to the
/// lower index.
pub fn atopk_markers(h: &[f32], k_a: usize) -> Result<Vec<u8>> {
    if k_a == 0 || k_a > h.len() {
        return Err(Error::InvalidConfig(format!(
            "k_a must be in 1..={}, got {k_a}",
            h.len()
        )));
    }
    let mut out = vec![0u8; h.len()];
    for i in top_k_by(h.len(), k_a, |i| h[i].abs() as f64) {
        out[i] = 1;
    }
    Ok(out)
}

/// Indices of the `k` largest keys, ties broken toward the lower index.
/// Returned in rank order.
pub(crate) fn top_k_by(n: usize, k: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let keys: Vec<f64> = (0..n).map(&key).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Hidden states → ATopK markers → activation rates.
pub fn build_profile(
    batch: &CalibrationBatch,
    ffn: &DenseFfn,
    k_a: usize,
    normalize: bool,
) -> Result<ActivationProfile> {
    let h = hidden_states(batch, ffn, normalize)?;
    let (q, d_h) = h.shape();
    let mut markers = Vec::with_capacity(q * d_h);
    for t in 0..q {
        markers.extend(atopk_markers(h.row(t), k_a)?);
    }
    let rates = rates_of(&markers, q, d_h);
    Ok(ActivationProfile {
        q,
        d_h,
        k_a,
        markers,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::random_ffn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn atopk_forward_keeps_only_marked_neurons() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ffn = random_ffn(&mut rng, 5, 12);
        let x: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = ffn.hidden(&x).unwrap();
        let keep = atopk_markers(&h, 4).unwrap();
        let mut want = vec![0.0f64; 5];
        for i in (0..12).filter(|&i| keep[i] == 1) {
            for (c, w) in want.iter_mut().enumerate() {
                *w += h[i] as f64 * ffn.w_down().get(i, c) as f64;
            }
        }
        let got = ffn.forward_atopk(&x, 4).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
        assert_eq!(ffn.forward_atopk(&x, 12).unwrap(), ffn.forward(&x).unwrap());
        assert!(ffn.forward_atopk(&x, 0).is_err());
    }

    #[test]
    fn zero_tokens_give_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = random_ffn(&mut rng, 4, 6);
        let batch = CalibrationBatch::new(Matrix::zeros(3, 4)).unwrap();
        let h = hidden_states(&batch, &ffn, false).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_hidden_state() {
        let eye = Matrix::identity(2);
        let ffn = DenseFfn::new(eye.clone(), eye.clone(), eye).unwrap();
        let batch = CalibrationBatch::new(Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let h = hidden_states(&batch, &ffn, false).unwrap();
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((h.get(0, 0) as f64 - want).abs() < 1e-7);
        assert_eq!(h.get(0, 1), 0.0);
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ffn = random_ffn(&mut rng, 6, 10);
        let scales: Vec<f32> = (0..10).map(|_| rng.gen_range(0.1..10.0)).collect();
        let scale =
            |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) * scales[c]);
        let scaled =
            DenseFfn::new(scale(ffn.w_up()), scale(ffn.w_gate()), ffn.w_down().clone()).unwrap();
        let x = Matrix::from_fn(5, 6, |_, _| rng.gen_range(-3.0..3.0));
        let batch = CalibrationBatch::new(x).unwrap();
        let a = hidden_states(&batch, &ffn, true).unwrap();
        let b = hidden_states(&batch, &scaled, true).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-5, "{p} vs {q}");
        }
    }

    #[test]
    fn zero_norm_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ffn = random_ffn(&mut rng, 3, 4);
        let mut x = Matrix::from_fn(3, 3, |_, _| 1.0);
        x.row_mut(1).fill(0.0);
        let batch = CalibrationBatch::new(x).unwrap();
        assert!(matches!(
            hidden_states(&batch, &ffn, true),
            Err(Error::ZeroNorm { index: 1, .. })
        ));
        assert!(hidden_states(&batch, &ffn, false).is_ok());
    }

    #[test]
    fn atopk_cases() {
        assert_eq!(
            atopk_markers(&[0.5, -2.0, 0.1, 3.0], 2).unwrap(),
            vec![0, 1, 0, 1]
        );
        assert_eq!(atopk_markers(&[1.0, -1.0, 0.0], 3).unwrap(), vec![1, 1, 1]);
        // |h_1| == |h_2| straddle the cut: lower index wins.
        assert_eq!(
            atopk_markers(&[5.0, 2.0, -2.0, 0.0], 2).unwrap(),
            vec![1, 1, 0, 0]
        );
        assert!(atopk_markers(&[1.0], 0).is_err());
        assert!(atopk_markers(&[1.0], 2).is_err());
    }

    #[test]
    fn rates_average_markers() {
        let p = ActivationProfile::from_markers(2, 2, 1, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(p.rates(), &[0.5, 0.5]);
        let p = ActivationProfile::from_markers(2, 2, 2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(p.rates(), &[1.0, 1.0]);
        assert!(ActivationProfile::from_markers(2, 2, 1, vec![1, 0, 1, 1]).is_err());
    }

    #[test]
    fn rates_from_unbalanced_markers() {
        // rows [[1,0],[1,1]] can only arise with different k_a per row, so
        // compute the average directly.
        assert_eq!(rates_of(&[1, 0, 1, 1], 2, 2), vec![1.0, 0.5]);
    }

    #[test]
    fn repeated_token_gives_binary_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ffn = random_ffn(&mut rng, 5, 12);
        let tok: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Matrix::from_rows(&vec![tok; 7]).unwrap();
        let p = build_profile(&CalibrationBatch::new(x).unwrap(), &ffn, 4, true).unwrap();
        for t in 1..7 {
            assert_eq!(p.marker_row(t), p.marker_row(0));
        }
        assert!(p.rates().iter().all(|&r| r == 0.0 || r == 1.0));
    }

    #[test]
    fn rates_sum_to_k_a_and_build_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ffn = random_ffn(&mut rng, 8, 32);
        let x = Matrix::from_fn(40, 8, |_, _| rng.gen_range(-1.0..1.0));
        let batch = CalibrationBatch::new(x).unwrap();
        for k_a in [1, 5, 10, 32] {
            let p = build_profile(&batch, &ffn, k_a, true).unwrap();
            for t in 0..p.q() {
                assert_eq!(
                    p.marker_row(t).iter().map(|&v| v as usize).sum::<usize>(),
                    k_a
                );
            }
            let total: f64 = p.rates().iter().sum();
            assert!((total - k_a as f64).abs() <= 1e-9);
            assert!(p.rates().iter().all(|r| (0.0..=1.0).contains(r)));
            assert_eq!(p, build_profile(&batch, &ffn, k_a, true).unwrap());
        }
    }

    #[test]
    fn histogram_counts_every_neuron() {
        let p = ActivationProfile::from_markers(2, 3, 2, vec![1, 1, 0, 1, 0, 1]).unwrap();
        let h = p.rate_histogram(50);
        assert_eq!(h.iter().sum::<usize>(), 3);
        assert_eq!(h[49], 1);
        assert_eq!(h[25], 2);
    }
}
