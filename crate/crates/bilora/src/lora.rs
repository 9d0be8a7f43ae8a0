//! Low-rank adapters over frozen projection matrices.
//!
//! An adapter holds the pair `A [r x d_in]`, `B [d_out x r]` and applies
//!
//! ```text
//! h = W x + (alpha / r) * B (A drop(x))
//! ```
//!
//! `B` starts at zero, so a freshly injected adapter leaves the host model's
//! behavior bit-for-bit unchanged; `A` starts Gaussian (mean 0, std `1/r`)
//! so gradients reach `B` from the first step. Merging folds the update
//! into a plain weight matrix: `W' = W + (alpha / r) * B A`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{kernels, Graph, Tensor};
use crate::{Error, Result};

// ── Configuration ───────────────────────────────────────────────────────

/// Which projection matrices inside a self-attention layer get adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Query,
    Key,
    Value,
    Output,
}

impl ProjKind {
    pub fn name(self) -> &'static str {
        match self {
            ProjKind::Query => "query",
            ProjKind::Key => "key",
            ProjKind::Value => "value",
            ProjKind::Output => "output",
        }
    }
}

impl std::str::FromStr for ProjKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(ProjKind::Query),
            "key" | "k" => Ok(ProjKind::Key),
            "value" | "v" => Ok(ProjKind::Value),
            "output" | "o" => Ok(ProjKind::Output),
            other => Err(Error::Config(format!(
                "unknown projection kind {other:?} (expected query, key, value or output)"
            ))),
        }
    }
}

fn default_targets() -> Vec<ProjKind> {
    vec![ProjKind::Query, ProjKind::Key]
}

fn default_rank() -> usize {
    16
}

fn default_alpha() -> f64 {
    32.0
}

fn default_dropout() -> f64 {
    0.05
}

/// Adapter hyperparameters as they appear in configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub r: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<ProjKind>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            r: default_rank(),
            alpha: default_alpha(),
            dropout: default_dropout(),
            targets: default_targets(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("adapter alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "adapter dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        // An empty target list is legal: injection becomes a no-op and the
        // model keeps its frozen base behavior.
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(Error::Config("duplicate adapter target".into()));
        }
        Ok(())
    }
}

// ── The adapter ─────────────────────────────────────────────────────────

/// One low-rank adapter attached to a `[d_out x d_in]` weight.
#[derive(Debug, Clone)]
pub struct LoraAdapter<F: Scalar> {
    /// Down projection, `[r x d_in]`, Gaussian init.
    pub a: Tensor<F>,
    /// Up projection, `[d_out x r]`, zero init.
    pub b: Tensor<F>,
    r: usize,
    d_in: usize,
    d_out: usize,
    alpha: f64,
    dropout: f64,
}

impl<F: Scalar> LoraAdapter<F> {
    /// Seeded initialization. `B` is all zeros; `A` is i.i.d. Gaussian with
    /// mean 0 and standard deviation `1/r`.
    pub fn init(
        d_in: usize,
        d_out: usize,
        r: usize,
        alpha: f64,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if r == 0 || r > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "adapter rank {r} must lie in 1..={} for a {d_out}x{d_in} weight",
                d_in.min(d_out)
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config("adapter alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!(
                "adapter dropout must lie in [0, 1), got {dropout}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / r as f64).expect("std is positive and finite");
        let a_data: Vec<F> = (0..r * d_in)
            .map(|_| F::c(normal.sample(&mut rng)))
            .collect();
        let a = Tensor::param(&[r, d_in], a_data)?;
        let b = Tensor::zeros(&[d_out, r]);
        b.set_requires_grad(true);
        Ok(LoraAdapter {
            a,
            b,
            r,
            d_in,
            d_out,
            alpha,
            dropout,
        })
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// The `alpha / r` factor on the low-rank path.
    pub fn scaling(&self) -> F {
        F::c(self.alpha / self.r as f64)
    }

    /// Adapted projection over a `[t x d_in]` token matrix against the
    /// frozen weight `w [d_out x d_in]`. `drop_mask`, when given, is an
    /// inverted-dropout mask applied to the adapter input only; the frozen
    /// path always sees the raw activations.
    pub fn forward_tokens(
        &self,
        g: &mut Graph<F>,
        w: &Tensor<F>,
        x: &Tensor<F>,
        drop_mask: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        if w.shape() != [self.d_out, self.d_in] {
            return Err(Error::ShapeMismatch {
                op: "lora_forward",
                lhs: w.shape().to_vec(),
                rhs: vec![self.d_out, self.d_in],
            });
        }
        let base = g.matmul_nt(x, w)?;
        let dropped = match drop_mask {
            Some(m) => g.mul(x, m)?,
            None => x.clone(),
        };
        let down = g.matmul_nt(&dropped, &self.a)?;
        let up = g.matmul_nt(&down, &self.b)?;
        let scaled = g.scale(&up, self.scaling())?;
        g.add(&base, &scaled)
    }

    /// Single-activation form: `x [d_in]` in, `h [d_out]` out. In training
    /// mode a fresh dropout mask is drawn from `rng`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        w: &Tensor<F>,
        x: &Tensor<F>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<F>> {
        if x.shape() != [self.d_in] {
            return Err(Error::ShapeMismatch {
                op: "lora_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.d_in],
            });
        }
        let row = crate::tensor::graph::reshape(g, x, &[1, self.d_in])?;
        let mask = if training && self.dropout > 0.0 {
            Some(dropout_mask(&[1, self.d_in], self.dropout, rng)?)
        } else {
            None
        };
        let out = self.forward_tokens(g, w, &row, mask.as_ref())?;
        crate::tensor::graph::reshape(g, &out, &[self.d_out])
    }

    /// Fold the adapter into its weight: `W' = W + (alpha/r) * B A`.
    /// Produces a fresh constant tensor; the inputs are untouched.
    pub fn merge(&self, w: &Tensor<F>) -> Result<Tensor<F>> {
        if w.shape() != [self.d_out, self.d_in] {
            return Err(Error::ShapeMismatch {
                op: "lora_merge",
                lhs: w.shape().to_vec(),
                rhs: vec![self.d_out, self.d_in],
            });
        }
        let ba = kernels::matmul(self.d_out, self.r, self.d_in, &self.b.data(), &self.a.data());
        let s = self.scaling();
        let merged: Vec<F> = w
            .data()
            .iter()
            .zip(ba.iter())
            .map(|(&wv, &uv)| wv + s * uv)
            .collect();
        Tensor::from_vec(w.shape(), merged)
    }

    /// Both trainable tensors, `A` before `B`.
    pub fn params(&self) -> [&Tensor<F>; 2] {
        [&self.a, &self.b]
    }

    /// Fresh storage for use on another worker; values and flags copied.
    pub fn deep_copy(&self) -> Self {
        LoraAdapter {
            a: self.a.deep_copy(),
            b: self.b.deep_copy(),
            ..self.clone()
        }
    }
}

/// Inverted-dropout mask: each entry is `1/(1-p)` with probability `1-p`
/// and `0` otherwise, so the expected value of `mask * x` is `x`.
pub fn dropout_mask<F: Scalar>(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
    }
    let keep = Bernoulli::new(1.0 - p).expect("probability in range");
    let scale = F::c(1.0 / (1.0 - p));
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| if keep.sample(rng) { scale } else { F::zero() })
        .collect();
    Tensor::from_vec(shape, data)
}

// ── Parameter budget ────────────────────────────────────────────────────

/// Trainable-vs-frozen census for a stack of adapted layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub trainable: u64,
    pub frozen: u64,
    /// `trainable / (trainable + frozen)`.
    pub fraction: f64,
}

/// Adapter parameter count for `layers` attention layers, each with
/// `matrices_per_layer` adapted square `[d_model x d_model]` projections of
/// rank `r`: every adapter contributes `r * (d_in + d_out)` parameters.
pub fn count_params(
    layers: usize,
    d_model: usize,
    matrices_per_layer: usize,
    r: usize,
    frozen_total: u64,
) -> ParamBudget {
    let trainable = (layers * matrices_per_layer * r * (d_model + d_model)) as u64;
    let denom = trainable + frozen_total;
    let fraction = if denom == 0 {
        0.0
    } else {
        trainable as f64 / denom as f64
    };
    ParamBudget {
        trainable,
        frozen: frozen_total,
        fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Oracle for the adapted projection: dense arithmetic on plain vecs,
    /// no graph, no kernels module.
    fn brute_force_h(w: &[Vec<f64>], a: &[Vec<f64>], b: &[Vec<f64>], x: &[f64], s: f64) -> Vec<f64> {
        let d_out = w.len();
        let r = a.len();
        let ax: Vec<f64> = (0..r)
            .map(|i| a[i].iter().zip(x).map(|(&av, &xv)| av * xv).sum())
            .collect();
        (0..d_out)
            .map(|o| {
                let wx: f64 = w[o].iter().zip(x).map(|(&wv, &xv)| wv * xv).sum();
                let bax: f64 = b[o].iter().zip(&ax).map(|(&bv, &av)| bv * av).sum();
                wx + s * bax
            })
            .collect()
    }

    fn hand_adapter() -> (LoraAdapter<f64>, Tensor<f64>) {
        // r=1, alpha=1: A=[[1,1]], B=[[2],[0]], W=I.
        let adapter = LoraAdapter::<f64>::init(2, 2, 1, 1.0, 0.0, 0).unwrap();
        adapter.a.set_data(vec![1.0, 1.0]).unwrap();
        adapter.b.set_data(vec![2.0, 0.0]).unwrap();
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        (adapter, w)
    }

    #[test]
    fn forward_matches_hand_example() {
        let (adapter, w) = hand_adapter();
        let mut g = Graph::new();
        let x = t(&[1, 2], &[1.0, 2.0]);
        let h = adapter.forward_tokens(&mut g, &w, &x, None).unwrap();
        assert_eq!(h.to_vec(), vec![7.0, 2.0]);

        let oracle = brute_force_h(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![1.0, 1.0]],
            &[vec![2.0], vec![0.0]],
            &[1.0, 2.0],
            1.0,
        );
        assert_eq!(oracle, vec![7.0, 2.0]);
    }

    #[test]
    fn merge_matches_hand_example() {
        let (adapter, w) = hand_adapter();
        let merged = adapter.merge(&w).unwrap();
        assert_eq!(merged.to_vec(), vec![3.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn fresh_adapter_is_exactly_identity() {
        let adapter = LoraAdapter::<f64>::init(8, 6, 4, 32.0, 0.0, 3).unwrap();
        let w = t(&[6, 8], &(0..48).map(|i| (i as f64) * 0.1 - 2.0).collect::<Vec<_>>());
        let x = t(&[2, 8], &(0..16).map(|i| (i as f64) * 0.25 - 1.0).collect::<Vec<_>>());
        let mut g = Graph::new();
        let base = g.matmul_nt(&x, &w).unwrap();
        let adapted = adapter.forward_tokens(&mut g, &w, &x, None).unwrap();
        let (bv, av) = (base.to_vec(), adapted.to_vec());
        for (b, a) in bv.iter().zip(&av) {
            assert_eq!(b.to_bits(), a.to_bits(), "zero B must change nothing");
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_b_is_zero() {
        let a1 = LoraAdapter::<f64>::init(16, 16, 4, 8.0, 0.05, 42).unwrap();
        let a2 = LoraAdapter::<f64>::init(16, 16, 4, 8.0, 0.05, 42).unwrap();
        assert_eq!(a1.a.to_vec(), a2.a.to_vec());
        assert!(a1.b.to_vec().iter().all(|&v| v == 0.0));
        let a3 = LoraAdapter::<f64>::init(16, 16, 4, 8.0, 0.05, 43).unwrap();
        assert_ne!(a1.a.to_vec(), a3.a.to_vec());
    }

    #[test]
    fn rank_must_fit_the_weight() {
        assert!(LoraAdapter::<f64>::init(4, 8, 5, 1.0, 0.0, 0).is_err());
        assert!(LoraAdapter::<f64>::init(4, 8, 0, 1.0, 0.0, 0).is_err());
        assert!(LoraAdapter::<f64>::init(4, 8, 4, 1.0, 0.0, 0).is_ok());
    }

    #[test]
    fn merge_equals_runtime_path() {
        let adapter = LoraAdapter::<f64>::init(6, 5, 3, 12.0, 0.0, 9).unwrap();
        // Give B real contents so the low-rank path is live.
        adapter
            .b
            .set_data((0..15).map(|i| (i as f64) * 0.07 - 0.5).collect())
            .unwrap();
        let w = t(&[5, 6], &(0..30).map(|i| ((i * 7 % 13) as f64) * 0.11 - 0.6).collect::<Vec<_>>());
        let x = t(&[1, 6], &[0.3, -1.0, 0.25, 2.0, -0.75, 0.5]);
        let mut g = Graph::new();
        let live = adapter.forward_tokens(&mut g, &w, &x, None).unwrap();
        let merged = adapter.merge(&w).unwrap();
        let folded = g.matmul_nt(&x, &merged).unwrap();
        for (l, f) in live.to_vec().iter().zip(folded.to_vec()) {
            assert!((l - f).abs() < 1e-10, "merged and live paths disagree: {l} vs {f}");
        }
    }

    #[test]
    fn doubling_alpha_and_rank_preserves_the_update_when_ba_is_fixed() {
        // Pad A with zero rows and B with zero columns: B2 A2 == B1 A1 and
        // alpha/r is unchanged, so the merged weights must coincide.
        let a1 = LoraAdapter::<f64>::init(4, 4, 2, 4.0, 0.0, 5).unwrap();
        a1.b.set_data((0..8).map(|i| i as f64 * 0.2 - 0.7).collect()).unwrap();
        let a2 = LoraAdapter::<f64>::init(4, 4, 4, 8.0, 0.0, 99).unwrap();
        let mut a_padded = a1.a.to_vec();
        a_padded.extend(std::iter::repeat(0.0).take(2 * 4));
        a2.a.set_data(a_padded).unwrap();
        let mut b_padded = Vec::new();
        let b1 = a1.b.to_vec();
        for row in 0..4 {
            b_padded.extend_from_slice(&b1[row * 2..(row + 1) * 2]);
            b_padded.extend_from_slice(&[0.0, 0.0]);
        }
        a2.b.set_data(b_padded).unwrap();

        let w = t(&[4, 4], &(0..16).map(|i| i as f64 * 0.3).collect::<Vec<_>>());
        let m1 = a1.merge(&w).unwrap().to_vec();
        let m2 = a2.merge(&w).unwrap().to_vec();
        for (x, y) in m1.iter().zip(&m2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_is_inverted_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask: Tensor<f64> = dropout_mask(&[1, 1000], 0.25, &mut rng).unwrap();
        let v = mask.to_vec();
        let keep_scale = 1.0 / 0.75;
        assert!(v.iter().all(|&m| m == 0.0 || (m - keep_scale).abs() < 1e-12));
        let kept = v.iter().filter(|&&m| m != 0.0).count();
        assert!((600..900).contains(&kept), "keep rate wildly off: {kept}/1000");
    }

    #[test]
    fn param_budget_hand_example() {
        let budget = count_params(2, 64, 2, 4, 0);
        assert_eq!(budget.trainable, 2048);
    }
}
