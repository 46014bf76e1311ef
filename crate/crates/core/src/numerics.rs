//! Loss functions, stochastic sampling, Gram statistics, gradient reversal,
//! and the staged loss scheduler.
//!
//! Every loss exists in two forms: a tape function (`*_t`, used by the
//! trainer so gradients flow) and a plain wrapper that evaluates the same
//! graph on a throwaway tape. There is exactly one implementation of each
//! formula.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Diagonal Gaussian over the style latent; the standard deviation is kept
/// as log-variance.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Array1<f64>,
    pub log_var: Array1<f64>,
}

impl GaussianPosterior {
    pub fn from_mu_log_var(mu: Array1<f64>, log_var: Array1<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::contract(format!(
                "posterior mu/log_var length mismatch: {} vs {}",
                mu.len(),
                log_var.len()
            )));
        }
        Ok(Self { mu, log_var })
    }

    /// Construct from a standard deviation; `sigma = 0` is representable
    /// (log-variance −∞) and reparameterizes to `mu` exactly.
    pub fn from_mu_sigma(mu: Array1<f64>, sigma: Array1<f64>) -> Result<Self> {
        if sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::contract("posterior sigma must be non-negative"));
        }
        let log_var = sigma.mapv(|s| 2.0 * s.ln());
        Self::from_mu_log_var(mu, log_var)
    }

    pub fn sigma(&self) -> Array1<f64> {
        self.log_var.mapv(|lv| (0.5 * lv).exp())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

// ---- reparameterization -----------------------------------------------------

/// Tape form of the reparameterization trick `z = μ + σ ⊙ φ`. The noise is
/// a constant, so gradients reach only `mu` and `log_var`.
pub fn reparameterize_t(tape: &Tape, mu: Var, log_var: Var, noise: &Array1<f64>) -> Var {
    let sigma = tape.exp(tape.affine(log_var, 0.5, 0.0));
    let scaled = tape.mul_constv(sigma, &noise.clone().into_dyn());
    tape.add(mu, scaled)
}

pub fn reparameterize(post: &GaussianPosterior, noise: &Array1<f64>) -> Result<Array1<f64>> {
    if noise.len() != post.dim() {
        return Err(Error::contract(format!(
            "reparameterize: noise length {} does not match posterior dim {}",
            noise.len(),
            post.dim()
        )));
    }
    Ok(&post.mu + &(&post.sigma() * noise))
}

// ---- KL margin loss ----------------------------------------------------------

/// Tape form of `max(0, KL(N(μ,σ²) ‖ N(0,I)) − Δ)`; also returns the raw
/// (unhinged) KL value for reporting.
pub fn kl_margin_loss_t(tape: &Tape, mu: Var, log_var: Var, margin: f64) -> (Var, f64) {
    // KL = 0.5 Σ (μ² + σ² − 1 − ln σ²)
    let mu_sq = tape.square(mu);
    let var = tape.exp(log_var);
    let inner = tape.sub(tape.add(mu_sq, var), tape.affine(log_var, 1.0, 1.0));
    let kl = tape.affine(tape.sum(inner), 0.5, 0.0);
    let raw = tape.scalar_of(kl);
    let hinged = tape.relu(tape.affine(kl, 1.0, -margin));
    (hinged, raw)
}

pub fn kl_margin_loss(post: &GaussianPosterior, margin: f64) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::contract("kl margin must be non-negative"));
    }
    if post.sigma().iter().any(|&s| s <= 0.0) {
        return Err(Error::contract("kl_margin_loss: sigma must be positive"));
    }
    let tape = Tape::new();
    let mu = tape.leaf1(post.mu.clone());
    let lv = tape.leaf1(post.log_var.clone());
    let (hinged, _) = kl_margin_loss_t(&tape, mu, lv, margin);
    Ok(tape.scalar_of(hinged))
}

/// Closed-form KL without the hinge, for logging and tests.
pub fn kl_raw(post: &GaussianPosterior) -> f64 {
    post.mu
        .iter()
        .zip(post.log_var.iter())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

// ---- Gram statistics -----------------------------------------------------------

/// Length-normalized Gram matrix `FᵀF / T` of a T×d feature sequence.
/// Normalizing by T makes crops of different lengths comparable.
pub fn gram(features: &Array2<f64>) -> Result<Array2<f64>> {
    let t = features.nrows();
    if t == 0 {
        return Err(Error::contract("gram: empty feature sequence"));
    }
    Ok(features.t().dot(features) / t as f64)
}

/// Tape form of the Gram distance `(1/d²) Σ (G_a − G_b)²` shared by the
/// cycle and contrastive losses.
pub fn gram_distance_t(tape: &Tape, feat_a: Var, feat_b: Var) -> Var {
    let ga = tape.gram(feat_a);
    let gb = tape.gram(feat_b);
    let d = tape.value(ga).shape()[0];
    let diff = tape.sub(ga, gb);
    tape.affine(tape.sum(tape.square(diff)), 1.0 / (d * d) as f64, 0.0)
}

fn check_channels(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::contract("gram loss: empty feature sequence"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::contract(format!(
            "gram loss: channel mismatch {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

pub fn cycle_loss_t(tape: &Tape, feat_a: Var, feat_b: Var) -> Var {
    gram_distance_t(tape, feat_a, feat_b)
}

pub fn cycle_loss(feat_a: &Array2<f64>, feat_b: &Array2<f64>) -> Result<f64> {
    check_channels(feat_a, feat_b)?;
    let tape = Tape::new();
    let a = tape.leaf2(feat_a.clone());
    let b = tape.leaf2(feat_b.clone());
    Ok(tape.scalar_of(cycle_loss_t(&tape, a, b)))
}

/// `max(0, Γ − gram_distance)`, hinged so the pair is only pushed apart
/// until the margin is met.
pub fn contrast_loss_t(tape: &Tape, feat_y: Var, feat_aug: Var, margin: f64) -> Var {
    let d = gram_distance_t(tape, feat_y, feat_aug);
    tape.relu(tape.affine(d, -1.0, margin))
}

pub fn contrast_loss(feat_y: &Array2<f64>, feat_aug: &Array2<f64>, margin: f64) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::contract("contrast margin must be non-negative"));
    }
    check_channels(feat_y, feat_aug)?;
    let tape = Tape::new();
    let a = tape.leaf2(feat_y.clone());
    let b = tape.leaf2(feat_aug.clone());
    Ok(tape.scalar_of(contrast_loss_t(&tape, a, b, margin)))
}

// ---- gradient reversal & the speaker adversary ----------------------------------

/// Identity forward; the backward pass multiplies the gradient by `-scale`.
pub fn grl_apply(tape: &Tape, x: Var, scale: f64) -> Var {
    tape.grl(x, scale)
}

/// Cross entropy of a linear softmax speaker classifier applied behind a
/// gradient reversal layer; this is `L_spk`.
pub fn speaker_adversary_loss_t(
    tape: &Tape,
    style_emb: Var,
    speaker_id: usize,
    clf_w: Var,
    clf_b: Var,
    grl_scale: f64,
) -> Var {
    let reversed = tape.grl(style_emb, grl_scale);
    let row = tape.reshape(reversed, &[1, tape.value(style_emb).len()]);
    let logits = tape.linear(row, clf_w, clf_b);
    tape.softmax_ce_rows(logits, &[speaker_id])
}

pub fn speaker_adversary_loss(
    style_emb: &Array1<f64>,
    speaker_id: usize,
    clf_w: &Array2<f64>,
    clf_b: &Array1<f64>,
) -> Result<f64> {
    let n_speakers = clf_b.len();
    if speaker_id >= n_speakers {
        return Err(Error::contract(format!(
            "speaker id {speaker_id} out of range for {n_speakers} speakers"
        )));
    }
    if clf_w.nrows() != style_emb.len() || clf_w.ncols() != n_speakers {
        return Err(Error::contract("classifier weight shape mismatch"));
    }
    let tape = Tape::new();
    let emb = tape.leaf1(style_emb.clone());
    let w = tape.leaf2(clf_w.clone());
    let b = tape.leaf1(clf_b.clone());
    Ok(tape.scalar_of(speaker_adversary_loss_t(&tape, emb, speaker_id, w, b, 1.0)))
}

// ---- loss weights, stages, and the total ------------------------------------------

/// The seven loss terms, in the staged optimization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Spec,
    Stop,
    Commitment,
    Kl,
    Spk,
    Cycle,
    Contrast,
}

impl LossTerm {
    pub const STAGED_ORDER: [LossTerm; 7] = [
        LossTerm::Spec,
        LossTerm::Stop,
        LossTerm::Commitment,
        LossTerm::Kl,
        LossTerm::Spk,
        LossTerm::Cycle,
        LossTerm::Contrast,
    ];
}

/// One entry of the stage schedule: from `step` on, exactly `active` terms
/// contribute to the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub step: u64,
    pub active: Vec<LossTerm>,
}

/// Linear KL annealing ramp: α is scaled by 0 before `start`, then ramps to
/// 1 over `ramp_len` steps. `start = None` means "the step the KL stage
/// activates".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlAnneal {
    pub ramp_len: u64,
    pub start: Option<u64>,
}

impl Default for KlAnneal {
    fn default() -> Self {
        Self {
            ramp_len: 10_000,
            start: None,
        }
    }
}

/// Weights of the weighted loss terms, the two hinge margins, the KL
/// annealing ramp, and the stage schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub zeta: f64,
    pub kl_margin: f64,
    pub contrast_margin: f64,
    pub kl_anneal: KlAnneal,
    pub stages: Vec<Stage>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 0.02,
            gamma: 1.0,
            delta: 1.0,
            zeta: 0.25,
            kl_margin: 0.5,
            contrast_margin: 1.0,
            kl_anneal: KlAnneal::default(),
            stages: Self::staged_activation([500, 1000, 1500, 2000, 2500]),
        }
    }
}

impl LossWeights {
    /// Build the canonical schedule from activation steps for
    /// `[commitment, kl, spk, cycle, contrast]`; spec and stop are active
    /// from step 0.
    pub fn staged_activation(steps: [u64; 5]) -> Vec<Stage> {
        let mut stages = vec![Stage {
            step: 0,
            active: vec![LossTerm::Spec, LossTerm::Stop],
        }];
        let order = [
            LossTerm::Commitment,
            LossTerm::Kl,
            LossTerm::Spk,
            LossTerm::Cycle,
            LossTerm::Contrast,
        ];
        for (i, term) in order.iter().enumerate() {
            let mut active = stages.last().unwrap().active.clone();
            active.push(*term);
            if steps[i] == stages.last().unwrap().step {
                stages.last_mut().unwrap().active = active;
            } else {
                stages.push(Stage {
                    step: steps[i],
                    active,
                });
            }
        }
        stages
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("zeta", self.zeta),
            ("kl_margin", self.kl_margin),
            ("contrast_margin", self.contrast_margin),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be ≥ 0, got {v}")));
            }
        }
        if self.stages.is_empty() {
            return Err(Error::config("stage schedule must have at least one stage"));
        }
        if self.stages[0].step != 0 {
            return Err(Error::config("first stage must start at step 0"));
        }
        let mut prev: Option<&Stage> = None;
        let mut seen_rank = 0usize;
        for stage in &self.stages {
            if let Some(p) = prev {
                if stage.step <= p.step {
                    return Err(Error::config("stage thresholds must be strictly increasing"));
                }
                for term in &p.active {
                    if !stage.active.contains(term) {
                        return Err(Error::config(
                            "active loss sets must be monotone under inclusion",
                        ));
                    }
                }
            }
            // Newly activated terms must appear in the staged order.
            for term in &stage.active {
                let rank = LossTerm::STAGED_ORDER
                    .iter()
                    .position(|t| t == term)
                    .unwrap();
                if prev.map_or(true, |p| !p.active.contains(term)) {
                    if rank < seen_rank {
                        return Err(Error::config(
                            "loss terms must activate in the staged optimization order",
                        ));
                    }
                    seen_rank = seen_rank.max(rank);
                }
            }
            prev = Some(stage);
        }
        Ok(())
    }

    /// First step at which `term` is active, if ever.
    pub fn activation_step(&self, term: LossTerm) -> Option<u64> {
        self.stages
            .iter()
            .find(|s| s.active.contains(&term))
            .map(|s| s.step)
    }

    /// Multiplier applied to α at `step`: 0 before the ramp, linear within
    /// it, 1 after.
    pub fn kl_anneal_factor(&self, step: u64) -> f64 {
        let start = self
            .kl_anneal
            .start
            .or_else(|| self.activation_step(LossTerm::Kl))
            .unwrap_or(0);
        if step < start {
            return 0.0;
        }
        if self.kl_anneal.ramp_len == 0 {
            return 1.0;
        }
        (((step - start) as f64) / self.kl_anneal.ramp_len as f64).min(1.0)
    }

    /// Effective weight of a term at `step` (0 when inactive; α carries the
    /// annealing factor).
    pub fn effective_weight(&self, term: LossTerm, step: u64) -> f64 {
        if !stage_schedule(step, self).contains(&term) {
            return 0.0;
        }
        match term {
            LossTerm::Spec | LossTerm::Stop => 1.0,
            LossTerm::Commitment => self.zeta,
            LossTerm::Kl => self.alpha * self.kl_anneal_factor(step),
            LossTerm::Spk => self.beta,
            LossTerm::Cycle => self.gamma,
            LossTerm::Contrast => self.delta,
        }
    }
}

/// Active loss terms at `step`: the last stage whose threshold is ≤ `step`.
pub fn stage_schedule(step: u64, weights: &LossWeights) -> &[LossTerm] {
    let mut active: &[LossTerm] = &[];
    for stage in &weights.stages {
        if stage.step <= step {
            active = &stage.active;
        } else {
            break;
        }
    }
    active
}

/// Raw per-term loss values for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermValues {
    pub spec: f64,
    pub stop: f64,
    pub kl: f64,
    pub spk: f64,
    pub cycle: f64,
    pub contrast: f64,
    pub commitment: f64,
}

impl TermValues {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Spec => self.spec,
            LossTerm::Stop => self.stop,
            LossTerm::Commitment => self.commitment,
            LossTerm::Kl => self.kl,
            LossTerm::Spk => self.spk,
            LossTerm::Cycle => self.cycle,
            LossTerm::Contrast => self.contrast,
        }
    }
}

/// Weighted total of the active terms at `step`.
pub fn total_loss(terms: &TermValues, weights: &LossWeights, step: u64) -> Result<f64> {
    let mut total = 0.0;
    for term in LossTerm::STAGED_ORDER {
        let w = weights.effective_weight(term, step);
        if w != 0.0 {
            let v = terms.get(term);
            if !v.is_finite() {
                return Err(Error::TrainingAbort {
                    step,
                    detail: format!("loss term {term:?} is not finite ({v})"),
                });
            }
            total += w * v;
        }
    }
    Ok(total)
}

/// Per-term tape nodes for one training step.
pub struct TermVars {
    pub spec: Var,
    pub stop: Var,
    pub kl: Var,
    pub spk: Var,
    pub cycle: Var,
    pub contrast: Var,
    pub commitment: Var,
}

impl TermVars {
    pub fn get(&self, term: LossTerm) -> Var {
        match term {
            LossTerm::Spec => self.spec,
            LossTerm::Stop => self.stop,
            LossTerm::Commitment => self.commitment,
            LossTerm::Kl => self.kl,
            LossTerm::Spk => self.spk,
            LossTerm::Cycle => self.cycle,
            LossTerm::Contrast => self.contrast,
        }
    }
}

/// Tape form of the weighted total at `step`. Inactive terms contribute
/// nothing, so their branches receive zero gradient.
pub fn total_loss_t(tape: &Tape, terms: &TermVars, weights: &LossWeights, step: u64) -> Var {
    let mut total = tape.scalar(0.0);
    for term in LossTerm::STAGED_ORDER {
        let w = weights.effective_weight(term, step);
        if w != 0.0 {
            total = tape.add(total, tape.affine(terms.get(term), w, 0.0));
        }
    }
    total
}

/// Full per-step record written to the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub spec: f64,
    pub stop: f64,
    /// Unhinged KL divergence, before the margin.
    pub kl_raw: f64,
    pub kl: f64,
    pub spk: f64,
    pub cycle: f64,
    pub contrast: f64,
    pub commitment: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> TermValues {
        TermValues {
            spec: self.spec,
            stop: self.stop,
            kl: self.kl,
            spk: self.spk,
            cycle: self.cycle,
            contrast: self.contrast,
            commitment: self.commitment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn posterior(mu: &[f64], sigma: &[f64]) -> GaussianPosterior {
        GaussianPosterior::from_mu_sigma(arr1(mu), arr1(sigma)).unwrap()
    }

    #[test]
    fn reparameterize_degenerate_variance_returns_mu() {
        let post = posterior(&[0.3, -0.7, 1.1], &[0.0, 0.0, 0.0]);
        let noise = arr1(&[5.0, -2.0, 0.1]);
        let z = reparameterize(&post, &noise).unwrap();
        assert_eq!(z, post.mu);
    }

    #[test]
    fn reparameterize_direct_substitution() {
        let post = posterior(&[0.0], &[2.0]);
        let z = reparameterize(&post, &arr1(&[1.0])).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-12);

        // Elementwise closed form μ + σ⊙φ.
        let post = posterior(&[1.0, -1.0], &[0.5, 0.5]);
        let z = reparameterize(&post, &arr1(&[2.0, -2.0])).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-12);
        assert!((z[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_rejects_dimension_mismatch() {
        let post = posterior(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(reparameterize(&post, &arr1(&[1.0])).is_err());
    }

    #[test]
    fn kl_margin_loss_examples() {
        // Standard normal against itself.
        let post = posterior(&[0.0; 8], &[1.0; 8]);
        assert!(kl_margin_loss(&post, 0.0).unwrap().abs() < 1e-12);

        // Closed-form diagonal-Gaussian KL: 0.5(μ² + σ² − 1 − ln σ²).
        let post = posterior(&[1.0], &[1.0]);
        let expected = 0.5 * (1.0_f64 + 1.0 - 1.0 - 0.0);
        assert!((kl_margin_loss(&post, 0.0).unwrap() - expected).abs() < 1e-12);

        // Same oracle, clipped at zero by the margin.
        assert_eq!(kl_margin_loss(&post, 0.6).unwrap(), 0.0);
    }

    #[test]
    fn kl_margin_never_negative_and_matches_raw_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let mu = Array1::from_shape_fn(n, |_| rng.gen_range(-2.0..2.0));
            let sigma = Array1::from_shape_fn(n, |_| rng.gen_range(0.1..3.0));
            let post = GaussianPosterior::from_mu_sigma(mu, sigma).unwrap();
            let margin = rng.gen_range(0.0..2.0);
            let loss = kl_margin_loss(&post, margin).unwrap();
            let raw = kl_raw(&post);
            assert!(loss >= 0.0);
            if raw <= margin {
                assert_eq!(loss, 0.0);
            } else {
                assert!((loss - (raw - margin)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gram_hand_computed_and_psd() {
        let f = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let g = gram(&f).unwrap();
        assert_eq!(g, ndarray::arr2(&[[0.5, 0.0], [0.0, 0.5]]));

        let z = Array2::<f64>::zeros((4, 3));
        assert_eq!(gram(&z).unwrap(), Array2::zeros((3, 3)));

        // Symmetric PSD for random inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let t = rng.gen_range(1..10);
            let d = rng.gen_range(1..6);
            let f = Array2::from_shape_fn((t, d), |_| rng.gen_range(-2.0..2.0));
            let g = gram(&f).unwrap();
            for i in 0..d {
                for j in 0..d {
                    assert!((g[(i, j)] - g[(j, i)]).abs() < 1e-12);
                }
            }
            // xᵀGx ≥ 0 for a few random x.
            for _ in 0..5 {
                let x = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
                assert!(x.dot(&g.dot(&x)) >= -1e-10);
            }
        }
        assert!(gram(&Array2::<f64>::zeros((0, 3))).is_err());
    }

    #[test]
    fn cycle_loss_examples() {
        let a = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(cycle_loss(&a, &a).unwrap(), 0.0);

        // Gram(a) = I/2, Gram(b) = 0 → (1/4)(0.25 + 0.25) = 0.125.
        let b = Array2::<f64>::zeros((2, 2));
        assert!((cycle_loss(&a, &b).unwrap() - 0.125).abs() < 1e-12);
        assert_eq!(cycle_loss(&a, &b).unwrap(), cycle_loss(&b, &a).unwrap());

        let c = Array2::<f64>::zeros((2, 3));
        assert!(cycle_loss(&a, &c).is_err());
    }

    #[test]
    fn contrast_loss_examples() {
        let a = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(contrast_loss(&a, &a, 1.0).unwrap(), 1.0);

        let b = Array2::<f64>::zeros((2, 2));
        assert!((contrast_loss(&a, &b, 1.0).unwrap() - 0.875).abs() < 1e-12);

        // Distance ≥ Γ clips to zero.
        assert_eq!(contrast_loss(&a, &b, 0.1).unwrap(), 0.0);

        // Always within [0, Γ].
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let t = rng.gen_range(1..8);
            let d = rng.gen_range(1..5);
            let x = Array2::from_shape_fn((t, d), |_| rng.gen_range(-2.0..2.0));
            let y = Array2::from_shape_fn((t, d), |_| rng.gen_range(-2.0..2.0));
            let margin = rng.gen_range(0.0..2.0);
            let v = contrast_loss(&x, &y, margin).unwrap();
            assert!(v >= 0.0 && v <= margin + 1e-12);
        }
    }

    #[test]
    fn speaker_adversary_uniform_logits_gives_log_s() {
        let emb = Array1::zeros(16);
        let w = Array2::zeros((16, 6));
        let b = Array1::zeros(6);
        let loss = speaker_adversary_loss(&emb, 2, &w, &b).unwrap();
        assert!((loss - (6.0f64).ln()).abs() < 1e-12);
        assert!(speaker_adversary_loss(&emb, 6, &w, &b).is_err());
    }

    #[test]
    fn speaker_adversary_confident_correct_logits_vanish() {
        let emb = arr1(&[1.0, 0.0]);
        // Column 1 (the true speaker) dominated by a huge weight.
        let mut w = Array2::zeros((2, 3));
        w[(0, 1)] = 50.0;
        let b = Array1::zeros(3);
        let loss = speaker_adversary_loss(&emb, 1, &w, &b).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn grl_flips_embedding_gradient_sign() {
        // Same classifier with and without GRL: embedding gradients must be
        // exact negations (scale 1).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb_v = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let w_v = Array2::from_shape_fn((8, 4), |_| rng.gen_range(-1.0..1.0));
        let b_v = Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5));

        let grad_with = |grl: bool| -> Array1<f64> {
            let tape = Tape::new();
            let emb = tape.leaf1(emb_v.clone());
            let w = tape.leaf2(w_v.clone());
            let b = tape.leaf1(b_v.clone());
            let loss = if grl {
                speaker_adversary_loss_t(&tape, emb, 1, w, b, 1.0)
            } else {
                let row = tape.reshape(emb, &[1, 8]);
                let logits = tape.linear(row, w, b);
                tape.softmax_ce_rows(logits, &[1])
            };
            let grads = tape.backward(loss);
            grads
                .get(emb)
                .unwrap()
                .clone()
                .into_dimensionality()
                .unwrap()
        };
        let g_grl = grad_with(true);
        let g_plain = grad_with(false);
        for (a, b) in g_grl.iter().zip(g_plain.iter()) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_schedule_follows_staged_order() {
        let w = LossWeights::default();
        w.validate().unwrap();
        let at0 = stage_schedule(0, &w);
        assert_eq!(at0, &[LossTerm::Spec, LossTerm::Stop]);
        let beyond = stage_schedule(1_000_000, &w);
        assert_eq!(beyond.len(), 7);
        let cyc = w.activation_step(LossTerm::Cycle).unwrap();
        let con = w.activation_step(LossTerm::Contrast).unwrap();
        assert!(cyc < con);
    }

    #[test]
    fn stage_validation_rejects_bad_schedules() {
        let mut w = LossWeights::default();
        w.stages = vec![
            Stage {
                step: 0,
                active: vec![LossTerm::Spec, LossTerm::Stop],
            },
            Stage {
                step: 10,
                active: vec![LossTerm::Spec], // dropped a term
            },
        ];
        assert!(w.validate().is_err());

        w.stages = vec![
            Stage {
                step: 0,
                active: vec![LossTerm::Spec, LossTerm::Stop],
            },
            Stage {
                step: 10,
                active: vec![LossTerm::Spec, LossTerm::Stop, LossTerm::Contrast],
            },
            Stage {
                step: 20,
                active: vec![
                    LossTerm::Spec,
                    LossTerm::Stop,
                    LossTerm::Contrast,
                    LossTerm::Kl, // out of order
                ],
            },
        ];
        assert!(w.validate().is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut w = LossWeights::default();
        w.stages = LossWeights::staged_activation([10, 20, 30, 40, 50]);
        w.kl_anneal = KlAnneal {
            ramp_len: 100,
            start: None,
        };
        let terms = TermValues {
            spec: 2.0,
            stop: 0.5,
            kl: 3.0,
            spk: 1.0,
            cycle: 0.25,
            contrast: 0.75,
            commitment: 4.0,
        };

        // Before any weighted stage: only reconstruction terms.
        assert_eq!(total_loss(&terms, &w, 5).unwrap(), 2.5);

        // All weights zero behaves identically.
        let mut wz = w.clone();
        wz.alpha = 0.0;
        wz.beta = 0.0;
        wz.gamma = 0.0;
        wz.delta = 0.0;
        wz.zeta = 0.0;
        assert_eq!(total_loss(&terms, &wz, 1000).unwrap(), 2.5);

        // Mid-ramp: α is scaled by 50%.
        let mut wa = w.clone();
        wa.alpha = 1.0;
        let at = 20 + 50; // kl activates at 20, ramp 100 → factor 0.5
        let total = total_loss(&terms, &wa, at).unwrap();
        let expected = 2.0
            + 0.5
            + 0.5 * 3.0
            + wa.beta * 1.0
            + wa.gamma * 0.25
            + wa.zeta * 4.0;
        assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");
    }

    #[test]
    fn total_loss_aborts_on_nan_in_active_term() {
        let w = LossWeights::default();
        let terms = TermValues {
            spec: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(
            total_loss(&terms, &w, 0),
            Err(Error::TrainingAbort { .. })
        ));
        // NaN in an inactive term is not an abort.
        let terms = TermValues {
            kl: f64::NAN,
            ..Default::default()
        };
        assert!(total_loss(&terms, &w, 0).is_ok());
    }

    #[test]
    fn activation_only_adds_nonnegative_weighted_terms() {
        let w = LossWeights::default();
        let terms = TermValues {
            spec: 1.0,
            stop: 1.0,
            kl: 1.0,
            spk: 1.0,
            cycle: 1.0,
            contrast: 1.0,
            commitment: 1.0,
        };
        let mut prev = 0.0;
        for step in 0..4000 {
            let t = total_loss(&terms, &w, step).unwrap();
            assert!(t >= prev - 1e-12, "total decreased at step {step}");
            prev = t;
        }
    }
}
