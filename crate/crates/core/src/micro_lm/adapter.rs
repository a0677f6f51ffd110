use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FullGrads, MicroLM, MicroLmError, Projections};
use crate::vocab::TokenId;

/// `A` (d x r) and `B` (r x d) factors of one low-rank update.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraPair {
    fn zeros(d: usize, rank: usize) -> Self {
        Self {
            a: Array2::zeros((d, rank)),
            b: Array2::zeros((rank, d)),
        }
    }
}

/// Factors (or their gradients) for the query and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraTensors {
    pub q: LoraPair,
    pub v: LoraPair,
}

impl LoraTensors {
    pub fn zeros(d: usize, rank: usize) -> Self {
        Self {
            q: LoraPair::zeros(d, rank),
            v: LoraPair::zeros(d, rank),
        }
    }

    pub fn named(&self) -> [(&'static str, &Array2<f64>); 4] {
        [
            ("q_a", &self.q.a),
            ("q_b", &self.q.b),
            ("v_a", &self.v.a),
            ("v_b", &self.v.b),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 4] {
        [
            ("q_a", &mut self.q.a),
            ("q_b", &mut self.q.b),
            ("v_a", &mut self.v.a),
            ("v_b", &mut self.v.b),
        ]
    }

    /// All entries in `named()` order, row-major within each tensor.
    pub fn flatten(&self) -> Vec<f64> {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    /// Mutable access to entry `index` of [`Self::flatten`].
    pub fn entry_mut(&mut self, mut index: usize) -> &mut f64 {
        for (_, t) in self.named_mut() {
            if index < t.len() {
                let cols = t.ncols();
                return &mut t[(index / cols, index % cols)];
            }
            index -= t.len();
        }
        panic!("adapter entry index out of range");
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &LoraTensors) {
        for ((_, mine), (_, theirs)) in self.named_mut().into_iter().zip(other.named()) {
            mine.scaled_add(alpha, theirs);
        }
    }

    pub fn len(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_finite(&self) -> Result<(), MicroLmError> {
        for (name, t) in self.named() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(MicroLmError::NonFiniteGradient(name));
            }
        }
        Ok(())
    }
}

/// Low-rank update `(alpha / r) A B` on the query and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    rank: usize,
    alpha: f64,
    pub tensors: LoraTensors,
}

impl LowRankAdapter {
    pub const DEFAULT_RANK: usize = 8;
    pub const DEFAULT_ALPHA: f64 = 16.0;

    /// `A` drawn from U(-1/sqrt(d), 1/sqrt(d)), `B` zero: the adapted model
    /// starts out identical to the base model.
    pub fn new(d_model: usize, rank: usize, alpha: f64, seed: u64) -> Self {
        assert!(rank >= 1, "adapter rank must be at least 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut tensors = LoraTensors::zeros(d_model, rank);
        tensors.q.a.mapv_inplace(|_| rng.gen_range(-bound..bound));
        tensors.v.a.mapv_inplace(|_| rng.gen_range(-bound..bound));
        Self {
            rank,
            alpha,
            tensors,
        }
    }

    pub fn from_tensors(
        rank: usize,
        alpha: f64,
        tensors: LoraTensors,
    ) -> Result<Self, MicroLmError> {
        if rank == 0 {
            return Err(MicroLmError::ShapeMismatch(
                "rank must be at least 1".into(),
            ));
        }
        let d = tensors.q.a.nrows();
        for (name, t) in tensors.named() {
            let expected = if name.ends_with("_a") {
                (d, rank)
            } else {
                (rank, d)
            };
            if t.dim() != expected {
                return Err(MicroLmError::ShapeMismatch(format!(
                    "{name} has shape {:?}, expected {expected:?}",
                    t.dim()
                )));
            }
        }
        Ok(Self {
            rank,
            alpha,
            tensors,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_model(&self) -> usize {
        self.tensors.q.a.nrows()
    }

    /// Trainable parameter count: `2 * (d*r + r*d)` over the two projections.
    pub fn trainable_parameters(&self) -> usize {
        self.tensors.len()
    }

    pub(crate) fn check_fits(&self, d_model: usize) -> Result<(), MicroLmError> {
        if self.d_model() != d_model {
            return Err(MicroLmError::ShapeMismatch(format!(
                "adapter d_model {} != model d_model {d_model}",
                self.d_model()
            )));
        }
        Ok(())
    }

    pub fn delta_q(&self) -> Array2<f64> {
        self.tensors.q.a.dot(&self.tensors.q.b) * self.scale()
    }

    pub fn delta_v(&self) -> Array2<f64> {
        self.tensors.v.a.dot(&self.tensors.v.b) * self.scale()
    }

    /// Chain rule from effective-projection gradients to the factors:
    /// `dA = s dP B^T`, `dB = s A^T dP`.
    pub(crate) fn factor_grads(&self, d_pq: &Array2<f64>, d_pv: &Array2<f64>) -> LoraTensors {
        let s = self.scale();
        let t = &self.tensors;
        LoraTensors {
            q: LoraPair {
                a: d_pq.dot(&t.q.b.t()) * s,
                b: t.q.a.t().dot(d_pq) * s,
            },
            v: LoraPair {
                a: d_pv.dot(&t.v.b.t()) * s,
                b: t.v.a.t().dot(d_pv) * s,
            },
        }
    }
}

/// A differentiable scalar objective over adapter parameters.
///
/// The loss may read the adapted model's last-token logits on a fixed set of
/// contexts and may also depend on the adapter parameters directly.
pub trait AdapterObjective {
    fn contexts(&self) -> &[Vec<TokenId>];

    /// Loss and its gradient with respect to each context's logits.
    fn logit_loss(&self, logits: &[Array1<f64>]) -> (f64, Vec<Array1<f64>>);

    /// Optional term depending on the adapter parameters themselves.
    fn param_loss(&self, _adapter: &LowRankAdapter) -> Option<(f64, LoraTensors)> {
        None
    }
}

/// Forward-only evaluation of an objective.
pub fn adapter_loss(
    model: &MicroLM,
    adapter: &LowRankAdapter,
    objective: &dyn AdapterObjective,
) -> Result<f64, MicroLmError> {
    let proj = model.projections(Some(adapter))?;
    let logits = objective
        .contexts()
        .iter()
        .map(|ids| model.forward_ids(&proj, ids).map(|(l, _)| l))
        .collect::<Result<Vec<_>, _>>()?;
    let (mut loss, _) = if logits.is_empty() {
        (0.0, Vec::new())
    } else {
        objective.logit_loss(&logits)
    };
    if let Some((direct, _)) = objective.param_loss(adapter) {
        loss += direct;
    }
    Ok(loss)
}

/// Loss and analytic gradient with respect to the adapter factors. The base
/// model is never modified.
pub fn grad_adapter(
    model: &MicroLM,
    adapter: &LowRankAdapter,
    objective: &dyn AdapterObjective,
) -> Result<(f64, LoraTensors), MicroLmError> {
    let proj = model.projections(Some(adapter))?;
    let mut grads = LoraTensors::zeros(adapter.d_model(), adapter.rank());
    let mut loss = 0.0;
    let contexts = objective.contexts();
    if !contexts.is_empty() {
        let mut logits = Vec::with_capacity(contexts.len());
        let mut caches = Vec::with_capacity(contexts.len());
        for ids in contexts {
            let (l, cache) = model.forward_ids(&proj, ids)?;
            logits.push(l);
            caches.push(cache);
        }
        let (l, d_logits) = objective.logit_loss(&logits);
        loss += l;
        let mut full = FullGrads::zeros(&model.params);
        for (cache, dl) in caches.iter().zip(&d_logits) {
            model.backward(&proj, cache, dl.view(), &mut full, false);
        }
        grads = adapter.factor_grads(&full.p_q, &full.p_v);
    }
    if let Some((direct, g)) = objective.param_loss(adapter) {
        loss += direct;
        grads.scaled_add(1.0, &g);
    }
    if !loss.is_finite() {
        return Err(MicroLmError::NonFiniteGradient("loss"));
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

impl Projections {
    pub fn query(&self) -> &Array2<f64> {
        &self.p_q
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.p_v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro_lm::tests::tiny_model;

    struct Constant;
    impl AdapterObjective for Constant {
        fn contexts(&self) -> &[Vec<TokenId>] {
            &[]
        }
        fn logit_loss(&self, _: &[Array1<f64>]) -> (f64, Vec<Array1<f64>>) {
            (0.0, Vec::new())
        }
        fn param_loss(&self, _: &LowRankAdapter) -> Option<(f64, LoraTensors)> {
            Some((3.5, LoraTensors::zeros(8, 8)))
        }
    }

    struct SquaredA;
    impl AdapterObjective for SquaredA {
        fn contexts(&self) -> &[Vec<TokenId>] {
            &[]
        }
        fn logit_loss(&self, _: &[Array1<f64>]) -> (f64, Vec<Array1<f64>>) {
            (0.0, Vec::new())
        }
        fn param_loss(&self, ad: &LowRankAdapter) -> Option<(f64, LoraTensors)> {
            let t = &ad.tensors;
            let loss = t.q.a.iter().chain(t.v.a.iter()).map(|v| v * v).sum();
            let mut g = LoraTensors::zeros(ad.d_model(), ad.rank());
            g.q.a = &t.q.a * 2.0;
            g.v.a = &t.v.a * 2.0;
            Some((loss, g))
        }
    }

    /// Sum of the logits over fixed contexts, weighted per token.
    struct Weighted {
        ctx: Vec<Vec<TokenId>>,
        w: Array1<f64>,
    }
    impl AdapterObjective for Weighted {
        fn contexts(&self) -> &[Vec<TokenId>] {
            &self.ctx
        }
        fn logit_loss(&self, logits: &[Array1<f64>]) -> (f64, Vec<Array1<f64>>) {
            let loss = logits.iter().map(|l| l.dot(&self.w)).sum();
            (loss, logits.iter().map(|_| self.w.clone()).collect())
        }
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let m = tiny_model(2);
        let ad = LowRankAdapter::new(8, 8, 16.0, 5);
        let (loss, g) = grad_adapter(&m, &ad, &Constant).unwrap();
        assert_eq!(loss, 3.5);
        assert!(g.named().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn squared_norm_of_a_gradient_is_2a() {
        let m = tiny_model(2);
        let ad = LowRankAdapter::new(8, 8, 16.0, 5);
        let (_, g) = grad_adapter(&m, &ad, &SquaredA).unwrap();
        assert_eq!(g.q.a, &ad.tensors.q.a * 2.0);
        assert_eq!(g.v.a, &ad.tensors.v.a * 2.0);
        assert!(g.q.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_b_leaves_base_untouched() {
        let m = tiny_model(4);
        let ad = LowRankAdapter::new(8, 8, 16.0, 9);
        for ctx in ["w1", "w2 w3", "w9 w9 w0 w4", "x y z"] {
            let base = m.forward_last_token(None, ctx).unwrap();
            let adapted = m.forward_last_token(Some(&ad), ctx).unwrap();
            for (a, b) in base.values().iter().zip(adapted.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn parameter_count() {
        let ad = LowRankAdapter::new(8, 8, 16.0, 0);
        assert_eq!(ad.trainable_parameters(), 2 * (8 * 8 + 8 * 8));
        let ad = LowRankAdapter::new(32, 4, 16.0, 0);
        assert_eq!(ad.trainable_parameters(), 2 * (32 * 4 + 4 * 32));
    }

    #[test]
    fn linear_logit_objective_matches_finite_differences() {
        let m = tiny_model(11);
        let mut ad = LowRankAdapter::new(8, 8, 16.0, 3);
        // nonzero B so that dA is informative
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        ad.tensors.q.b.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        ad.tensors.v.b.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        let obj = Weighted {
            ctx: vec![m.tokenize("w1 w2 w3"), m.tokenize("w7 w0")],
            w: Array1::from_shape_fn(16, |i| (i as f64 * 0.37).sin()),
        };
        let (_, g) = grad_adapter(&m, &ad, &obj).unwrap();
        let h = 1e-5;
        for (idx, an) in g.flatten().into_iter().enumerate() {
            let mut plus = ad.clone();
            let mut minus = ad.clone();
            *plus.tensors.entry_mut(idx) += h;
            *minus.tensors.entry_mut(idx) -= h;
            let fd = (adapter_loss(&m, &plus, &obj).unwrap()
                - adapter_loss(&m, &minus, &obj).unwrap())
                / (2.0 * h);
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (an - fd).abs() / denom < 1e-4,
                "entry {idx}: analytic {an} fd {fd}"
            );
        }
    }
}
