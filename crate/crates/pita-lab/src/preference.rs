//! Bradley-Terry preference layer: the logit transform, preference oracles,
//! a linear preference predictor over a feature map, the binary
//! cross-entropy loss with gradient and Hessian, and projected MLE onto the
//! zero-sum norm ball.
//!
//! The predictor models the probability that a completion beats the greedy
//! reference completion of its context as `sigma(<theta, Phi(y)>)`, with
//! `theta` constrained to `{ <1, theta> = 0, ||theta||_2 <= B }`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Error;
use crate::mdp::{Completion, State};
use crate::Result;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The logit transform `ln(p / (1 - p))`, inverse of the logistic function.
/// Converts a win probability against the greedy reference completion into
/// an implicit reward.
pub fn psi(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("psi requires p in (0,1), got {p}")));
    }
    Ok((p / (1.0 - p)).ln())
}

/// Bradley-Terry win probability `sigma(r_w - r_l)`.
pub fn bt_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Known feature embedding `Phi` with dimension `d` and norm bound `L`.
#[derive(Clone)]
pub struct FeatureMap {
    dim: usize,
    bound: f64,
    eval: Arc<dyn Fn(&State) -> Result<DVector<f64>> + Send + Sync>,
}

impl FeatureMap {
    pub fn new(
        dim: usize,
        bound: f64,
        eval: impl Fn(&State) -> Result<DVector<f64>> + Send + Sync + 'static,
    ) -> Self {
        FeatureMap { dim, bound, eval: Arc::new(eval) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The norm bound `L`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn features(&self, state: &State) -> Result<DVector<f64>> {
        let v = (self.eval)(state)?;
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        debug_assert!(
            v.norm() <= self.bound + 1e-9,
            "feature norm {} exceeds bound {}",
            v.norm(),
            self.bound
        );
        Ok(v)
    }

    pub fn features_of(&self, completion: &Completion) -> Result<DVector<f64>> {
        self.features(&completion.full_state())
    }
}

/// Linear preference parameter constrained to the zero-sum norm ball.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    theta: DVector<f64>,
    bound: f64,
}

impl ThetaParams {
    /// Wrap a vector that already satisfies the constraints.
    pub fn new(theta: DVector<f64>, bound: f64) -> Result<Self> {
        if theta.sum().abs() > 1e-10 {
            return Err(Error::Domain(format!(
                "theta must be zero-sum, got sum {}",
                theta.sum()
            )));
        }
        if theta.norm() > bound + 1e-10 {
            return Err(Error::Domain(format!(
                "theta norm {} exceeds bound {bound}",
                theta.norm()
            )));
        }
        Ok(ThetaParams { theta, bound })
    }

    pub fn zeros(dim: usize, bound: f64) -> Self {
        ThetaParams { theta: DVector::zeros(dim), bound }
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Exact Euclidean projection onto the zero-sum norm-`B` ball: subtract the
/// mean, then rescale to norm `B` when exceeded.
pub fn project_theta(raw: &DVector<f64>, bound: f64) -> ThetaParams {
    let mean = raw.sum() / raw.len() as f64;
    let mut v = raw.map(|x| x - mean);
    let norm = v.norm();
    if norm > bound {
        v *= bound / norm;
    }
    ThetaParams { theta: v, bound }
}

/// Win probability of `y` against the greedy reference of its context:
/// `sigma(<theta, Phi(y)>)`.
pub fn predict(theta: &ThetaParams, phi: &FeatureMap, y: &State) -> Result<f64> {
    let features = phi.features(y)?;
    if features.len() != theta.dim() {
        return Err(Error::DimensionMismatch { expected: theta.dim(), got: features.len() });
    }
    Ok(sigmoid(theta.vector().dot(&features)))
}

/// One pairwise feedback event: a sampled completion `y` judged against the
/// greedy reference completion `y_ref` of the shared context.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSample {
    pub context: State,
    pub y: Completion,
    pub y_ref: Completion,
    pub label: u8,
    pub iteration: usize,
}

/// Append-only collection of preference samples, aggregated across
/// alignment iterations.
#[derive(Debug, Clone, Default)]
pub struct PreferenceDataset {
    samples: Vec<PreferenceSample>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: PreferenceSample) {
        self.samples.push(sample);
    }

    pub fn extend(&mut self, samples: impl IntoIterator<Item = PreferenceSample>) {
        self.samples.extend(samples);
    }

    pub fn samples(&self) -> &[PreferenceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature matrix rows and labels for the contained samples.
    pub fn featurize(&self, phi: &FeatureMap) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
        let mut xs = Vec::with_capacity(self.samples.len());
        let mut os = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            xs.push(phi.features_of(&s.y)?);
            os.push(s.label as f64);
        }
        Ok((xs, os))
    }
}

/// How labels are drawn from the latent reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// `label ~ Bernoulli(sigma(r(y) - r(y_ref)))`.
    Stochastic,
    /// Requires binary rewards: the correct completion always wins;
    /// ties flip a fair coin.
    DeterministicByCorrectness,
    /// `label ~ Bernoulli(sigma(r(y)))`, ignoring `y_ref`: the reward is
    /// already expressed relative to the reference completion, whose
    /// features are renormalized to zero.
    WinRate,
}

/// A preference annotator backed by a latent reward function.
#[derive(Clone)]
pub struct BtOracle {
    true_reward: Arc<dyn Fn(&Completion) -> f64 + Send + Sync>,
    mode: OracleMode,
}

impl BtOracle {
    pub fn stochastic(true_reward: impl Fn(&Completion) -> f64 + Send + Sync + 'static) -> Self {
        BtOracle { true_reward: Arc::new(true_reward), mode: OracleMode::Stochastic }
    }

    pub fn deterministic_by_correctness(
        true_reward: impl Fn(&Completion) -> f64 + Send + Sync + 'static,
    ) -> Self {
        BtOracle {
            true_reward: Arc::new(true_reward),
            mode: OracleMode::DeterministicByCorrectness,
        }
    }

    /// Rewards measured relative to an implicit zero-reward reference.
    pub fn win_rate(true_reward: impl Fn(&Completion) -> f64 + Send + Sync + 'static) -> Self {
        BtOracle { true_reward: Arc::new(true_reward), mode: OracleMode::WinRate }
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn reward(&self, completion: &Completion) -> f64 {
        (self.true_reward)(completion)
    }
}

/// Draw the label `1{y beats y_ref}` from the oracle.
pub fn sample_label<R: Rng>(
    oracle: &BtOracle,
    y: &Completion,
    y_ref: &Completion,
    rng: &mut R,
) -> Result<u8> {
    let r_y = oracle.reward(y);
    let r_ref = oracle.reward(y_ref);
    match oracle.mode {
        OracleMode::Stochastic => {
            let p = bt_prob(r_y, r_ref);
            Ok(u8::from(rng.gen::<f64>() < p))
        }
        OracleMode::WinRate => Ok(u8::from(rng.gen::<f64>() < sigmoid(r_y))),
        OracleMode::DeterministicByCorrectness => {
            for r in [r_y, r_ref] {
                if r != 0.0 && r != 1.0 {
                    return Err(Error::Mode(format!(
                        "deterministic-by-correctness oracle needs binary rewards, got {r}"
                    )));
                }
            }
            if r_y > r_ref {
                Ok(1)
            } else if r_y < r_ref {
                Ok(0)
            } else {
                Ok(u8::from(rng.gen::<f64>() < 0.5))
            }
        }
    }
}

/// Draw a win label for `y` against a reference whose features have been
/// renormalized to zero (implicit reward 0): `Bernoulli(sigma(r(y)))`.
pub fn sample_win_label<R: Rng>(oracle: &BtOracle, y: &Completion, rng: &mut R) -> Result<u8> {
    if oracle.mode == OracleMode::DeterministicByCorrectness {
        return Err(Error::Mode(
            "win labels against the renormalized reference need a stochastic oracle".into(),
        ));
    }
    let p = sigmoid(oracle.reward(y));
    Ok(u8::from(rng.gen::<f64>() < p))
}

fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Prediction clamp applied before logarithms and the logit transform.
pub const PREDICTION_CLAMP: f64 = 1e-6;

pub(crate) fn bce_loss_on(features: &[DVector<f64>], labels: &[f64], theta: &DVector<f64>) -> f64 {
    let n = features.len() as f64;
    let mut total = 0.0;
    for (x, &o) in features.iter().zip(labels) {
        let p = clamp_prob(sigmoid(theta.dot(x)), PREDICTION_CLAMP);
        total += -o * p.ln() - (1.0 - o) * (1.0 - p).ln();
    }
    total / n
}

pub(crate) fn bce_grad_on(
    features: &[DVector<f64>],
    labels: &[f64],
    theta: &DVector<f64>,
) -> DVector<f64> {
    let n = features.len() as f64;
    let mut grad = DVector::zeros(theta.len());
    for (x, &o) in features.iter().zip(labels) {
        let p = sigmoid(theta.dot(x));
        grad.axpy(p - o, x, 1.0);
    }
    grad / n
}

/// Mean binary cross-entropy of the predictor on the dataset, with
/// predictions clamped away from {0, 1} so the loss stays finite.
pub fn bce_loss(theta: &ThetaParams, data: &PreferenceDataset, phi: &FeatureMap) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (xs, os) = data.featurize(phi)?;
    Ok(bce_loss_on(&xs, &os, theta.vector()))
}

/// Gradient `(1/n) sum (sigma(<theta,Phi_i>) - o_i) Phi_i` and Hessian
/// `(1/n) sum w_i Phi_i Phi_i^T` with logistic weights
/// `w = exp(-z)/(exp(-z)+1)^2`.
pub fn bce_grad_hess(
    theta: &ThetaParams,
    data: &PreferenceDataset,
    phi: &FeatureMap,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (xs, os) = data.featurize(phi)?;
    let d = theta.dim();
    let n = xs.len() as f64;
    let grad = bce_grad_on(&xs, &os, theta.vector());
    let mut hess = DMatrix::zeros(d, d);
    for x in &xs {
        let s = sigmoid(theta.vector().dot(x));
        let w = s * (1.0 - s);
        hess.syger(w / n, x, x, 1.0);
    }
    hess.fill_upper_triangle_with_lower_triangle();
    Ok((grad, hess))
}

/// Settings for the projected-gradient MLE.
#[derive(Debug, Clone, Copy)]
pub struct MleOptions {
    /// Stop once the projected-gradient norm falls below this.
    pub grad_tol: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
    pub initial_step: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            grad_tol: 1e-8,
            max_iterations: 10_000,
            armijo_c: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
        }
    }
}

/// Result of [`fit_mle`]: the constrained estimate plus convergence
/// diagnostics. When the iteration cap is reached the best iterate is
/// returned with `converged = false`.
#[derive(Debug, Clone)]
pub struct MleFit {
    pub theta: ThetaParams,
    pub converged: bool,
    pub iterations: usize,
    pub loss: f64,
    pub projected_grad_norm: f64,
}

/// Maximum-likelihood estimate of the preference parameter over the
/// zero-sum norm-`B` ball, by projected gradient descent with backtracking
/// line search from `theta = 0`.
pub fn fit_mle(
    data: &PreferenceDataset,
    phi: &FeatureMap,
    bound: f64,
    opts: &MleOptions,
) -> Result<MleFit> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bound <= 0.0 {
        return Err(Error::Domain(format!("bound B must be positive, got {bound}")));
    }
    let (xs, os) = data.featurize(phi)?;
    fit_mle_on(&xs, &os, bound, opts)
}

/// Raw outcome of the projected-gradient loop.
pub(crate) struct GdFit {
    pub(crate) point: DVector<f64>,
    pub(crate) converged: bool,
    pub(crate) iterations: usize,
    pub(crate) loss: f64,
    pub(crate) projected_grad_norm: f64,
}

/// Projected gradient descent with backtracking on the BCE loss; pass the
/// identity projector for an unconstrained fit.
pub(crate) fn gd_fit_on(
    xs: &[DVector<f64>],
    os: &[f64],
    opts: &MleOptions,
    project: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> GdFit {
    let d = xs[0].len();
    let mut theta = DVector::zeros(d);
    let mut loss = bce_loss_on(xs, os, &theta);
    let mut iterations = 0;
    let mut pg_norm = f64::INFINITY;

    while iterations < opts.max_iterations {
        let grad = bce_grad_on(xs, os, &theta);
        pg_norm = (&theta - project(&(&theta - &grad))).norm();
        if pg_norm < opts.grad_tol {
            return GdFit { point: theta, converged: true, iterations, loss, projected_grad_norm: pg_norm };
        }
        let mut step = opts.initial_step;
        // Sufficient-decrease comparisons saturate at the rounding noise of
        // the loss itself once the gradient is tiny.
        let noise = 4.0 * f64::EPSILON * loss.abs().max(1.0);
        loop {
            let candidate = project(&(&theta - step * &grad));
            let candidate_loss = bce_loss_on(xs, os, &candidate);
            let decrease = grad.dot(&(&theta - &candidate));
            if candidate_loss <= loss - opts.armijo_c * decrease + noise {
                theta = candidate;
                loss = candidate_loss;
                break;
            }
            step *= opts.shrink;
            if step < 1e-18 {
                // Line search exhausted at numerical precision.
                return GdFit {
                    point: theta,
                    converged: pg_norm < opts.grad_tol,
                    iterations,
                    loss,
                    projected_grad_norm: pg_norm,
                };
            }
        }
        iterations += 1;
    }
    GdFit { point: theta, converged: false, iterations, loss, projected_grad_norm: pg_norm }
}

pub(crate) fn fit_mle_on(
    xs: &[DVector<f64>],
    os: &[f64],
    bound: f64,
    opts: &MleOptions,
) -> Result<MleFit> {
    let fit = gd_fit_on(xs, os, opts, |v| project_theta(v, bound).theta);
    Ok(MleFit {
        theta: ThetaParams { theta: fit.point, bound },
        converged: fit.converged,
        iterations: fit.iterations,
        loss: fit.loss,
        projected_grad_norm: fit.projected_grad_norm,
    })
}

/// The `(Sigma_D + lambda I)`-seminorm of the estimation error
/// `theta_hat - theta_star`, with `Sigma_D` the empirical feature
/// second-moment matrix of the dataset.
pub fn seminorm_error(
    theta_hat: &ThetaParams,
    theta_star: &ThetaParams,
    data: &PreferenceDataset,
    phi: &FeatureMap,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    if theta_hat.dim() != theta_star.dim() {
        return Err(Error::DimensionMismatch {
            expected: theta_star.dim(),
            got: theta_hat.dim(),
        });
    }
    let (xs, _) = data.featurize(phi)?;
    let delta = theta_hat.vector() - theta_star.vector();
    Ok(seminorm_on(&xs, &delta, lambda))
}

pub(crate) fn seminorm_on(xs: &[DVector<f64>], delta: &DVector<f64>, lambda: f64) -> f64 {
    let n = xs.len() as f64;
    let quad: f64 = xs.iter().map(|x| x.dot(delta).powi(2)).sum::<f64>() / n;
    (quad + lambda * delta.norm_squared()).sqrt()
}

/// Strong-convexity constant of the preference BCE loss over logits in
/// `[-LB, LB]`: `1 / (2 + exp(-LB) + exp(LB))`.
pub fn gamma(feature_bound: f64, theta_bound: f64) -> f64 {
    let lb = feature_bound * theta_bound;
    1.0 / (2.0 + (-lb).exp() + lb.exp())
}

/// Conservative variant of [`gamma`] valid over the doubled logit range
/// `[-2LB, 2LB]`; always the smaller of the two.
pub fn gamma_conservative(feature_bound: f64, theta_bound: f64) -> f64 {
    gamma(feature_bound, 2.0 * theta_bound)
}

/// True iff Bradley-Terry probabilities computed from the oracle's reward
/// and from the reward shifted by a context-only offset agree on every pair
/// within 1e-12. Pairs must share contexts pairwise.
pub fn reward_shift_invariance_check(
    oracle: &BtOracle,
    offset: impl Fn(&State) -> f64,
    pairs: &[(Completion, Completion)],
) -> bool {
    for (a, b) in pairs {
        let base = bt_prob(oracle.reward(a), oracle.reward(b));
        let c = offset(a.context());
        let shifted = bt_prob(oracle.reward(a) + c, oracle.reward(b) + c);
        if (base - shifted).abs() > 1e-12 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Token;
    use crate::seeding::derive_rng;
    use approx::assert_relative_eq;

    fn constant_completion(tokens: &[u32]) -> Completion {
        Completion::new(State::from_ids(tokens), vec![Token(99)], true)
    }

    /// Feature map reading the first `dim` token ids as float features
    /// scaled by `scale`.
    fn token_features(dim: usize, bound: f64) -> FeatureMap {
        FeatureMap::new(dim, bound, move |s: &State| {
            let mut v = DVector::zeros(dim);
            for (i, t) in s.tokens().iter().take(dim).enumerate() {
                v[i] = t.id() as f64;
            }
            let norm = v.norm();
            if norm > bound {
                v *= bound / norm;
            }
            Ok(v)
        })
    }

    /// Fixed-vector feature map for hand-constructed tests: indexes features
    /// by the first token id.
    fn table_features(rows: Vec<DVector<f64>>, bound: f64) -> FeatureMap {
        FeatureMap::new(rows[0].len(), bound, move |s: &State| {
            let idx = s.tokens().first().map_or(0, |t| t.id() as usize);
            Ok(rows[idx].clone())
        })
    }

    fn one_sample_dataset(first_token: u32, label: u8) -> PreferenceDataset {
        let mut data = PreferenceDataset::new();
        data.push(PreferenceSample {
            context: State::empty(),
            y: constant_completion(&[first_token]),
            y_ref: constant_completion(&[0]),
            label,
            iteration: 0,
        });
        data
    }

    #[test]
    fn psi_known_values_and_domain() {
        assert_eq!(psi(0.5).unwrap(), 0.0);
        assert_relative_eq!(psi(0.9).unwrap(), 9f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(psi(0.9).unwrap(), 2.1972246, epsilon = 1e-6);
        assert!(psi(0.0).is_err());
        assert!(psi(1.0).is_err());
        assert!(psi(-0.2).is_err());
        assert!(psi(f64::NAN).is_err());
    }

    #[test]
    fn psi_inverts_sigmoid() {
        // The probability representation caps the attainable round-trip
        // accuracy: an ulp of error in sigmoid's output near saturation
        // becomes ~eps * exp(|x|) after the logit. Assert 1e-12 where f64
        // supports it and the conditioning bound elsewhere.
        let mut x = -30.0f64;
        while x <= 30.0 {
            let roundtrip = psi(sigmoid(x)).unwrap();
            let cond_bound = 8.0 * f64::EPSILON * (1.0 + x.abs().exp());
            assert!(
                (roundtrip - x).abs() <= 1e-12f64.max(cond_bound),
                "x = {x}: roundtrip {roundtrip}"
            );
            if x.abs() <= 9.0 {
                assert!((roundtrip - x).abs() <= 1e-12, "x = {x}: roundtrip {roundtrip}");
            }
            x += 0.5;
        }
    }

    #[test]
    fn bt_prob_values_and_symmetry() {
        assert_eq!(bt_prob(0.0, 0.0), 0.5);
        assert_relative_eq!(bt_prob(1.0, 0.0), 0.7310586, epsilon = 1e-7);
        let mut rng = derive_rng(3, "bt-symmetry", 0);
        for _ in 0..100 {
            let a: f64 = rng.gen_range(-5.0..5.0);
            let b: f64 = rng.gen_range(-5.0..5.0);
            assert_relative_eq!(bt_prob(a, b) + bt_prob(b, a), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn deterministic_oracle_prefers_correct() {
        let oracle = BtOracle::deterministic_by_correctness(|c: &Completion| {
            f64::from(c.context().tokens().first() == Some(&Token(1)))
        });
        let correct = constant_completion(&[1]);
        let wrong = constant_completion(&[0]);
        let mut rng = derive_rng(4, "oracle", 0);
        assert_eq!(sample_label(&oracle, &correct, &wrong, &mut rng).unwrap(), 1);
        assert_eq!(sample_label(&oracle, &wrong, &correct, &mut rng).unwrap(), 0);
    }

    #[test]
    fn deterministic_oracle_rejects_non_binary_rewards() {
        let oracle = BtOracle::deterministic_by_correctness(|_: &Completion| 0.3);
        let mut rng = derive_rng(5, "oracle", 0);
        let err =
            sample_label(&oracle, &constant_completion(&[0]), &constant_completion(&[1]), &mut rng)
                .unwrap_err();
        assert!(matches!(err, Error::Mode(_)));
    }

    #[test]
    fn stochastic_oracle_matches_bt_rate() {
        let oracle = BtOracle::stochastic(|c: &Completion| {
            f64::from(c.context().tokens().first() == Some(&Token(1)))
        });
        let y = constant_completion(&[1]);
        let y_ref = constant_completion(&[0]);
        let mut rng = derive_rng(6, "oracle", 0);
        let n = 10_000;
        let wins: u32 =
            (0..n).map(|_| sample_label(&oracle, &y, &y_ref, &mut rng).unwrap() as u32).sum();
        let mean = wins as f64 / n as f64;
        assert!((mean - 0.7310586).abs() < 0.02, "mean = {mean}");

        // Equal rewards: fair coin.
        let ties: u32 =
            (0..n).map(|_| sample_label(&oracle, &y, &y, &mut rng).unwrap() as u32).sum();
        let tie_mean = ties as f64 / n as f64;
        assert!((tie_mean - 0.5).abs() < 0.02, "tie mean = {tie_mean}");
    }

    #[test]
    fn tie_labels_in_deterministic_mode_are_fair() {
        let oracle = BtOracle::deterministic_by_correctness(|_: &Completion| 1.0);
        let y = constant_completion(&[1]);
        let mut rng = derive_rng(7, "oracle", 0);
        let n = 10_000;
        let wins: u32 =
            (0..n).map(|_| sample_label(&oracle, &y, &y, &mut rng).unwrap() as u32).sum();
        let mean = wins as f64 / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "tie mean = {mean}");
    }

    #[test]
    fn predict_zero_theta_is_half() {
        let phi = token_features(3, 10.0);
        let theta = ThetaParams::zeros(3, 1.0);
        let p = predict(&theta, &phi, &State::from_ids(&[2, 5, 1])).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn predict_matches_sigma_of_inner_product() {
        // theta = (1, -1) (zero-sum, norm sqrt(2) <= B = sqrt(2)),
        // Phi = (1, -1): inner product 2.
        let phi = table_features(vec![DVector::from_vec(vec![1.0, -1.0])], 2.0);
        let theta =
            ThetaParams::new(DVector::from_vec(vec![1.0, -1.0]), 2f64.sqrt()).unwrap();
        let p = predict(&theta, &phi, &State::from_ids(&[0])).unwrap();
        assert_relative_eq!(p, 0.8807971, epsilon = 1e-7);
    }

    #[test]
    fn predict_invariant_to_all_ones_feature_shift() {
        let base = DVector::from_vec(vec![0.4, -1.2, 0.7]);
        let shifted = base.map(|x| x + 5.0);
        let phi0 = table_features(vec![base], 10.0);
        let phi1 = table_features(vec![shifted], 20.0);
        let theta = project_theta(&DVector::from_vec(vec![1.0, 2.0, -0.5]), 3.0);
        let s = State::from_ids(&[0]);
        let p0 = predict(&theta, &phi0, &s).unwrap();
        let p1 = predict(&theta, &phi1, &s).unwrap();
        assert_relative_eq!(p0, p1, epsilon = 1e-12);
    }

    #[test]
    fn bce_loss_at_zero_theta_is_ln_two() {
        let phi = token_features(2, 10.0);
        let mut data = one_sample_dataset(1, 1);
        data.push(PreferenceSample {
            context: State::empty(),
            y: constant_completion(&[3]),
            y_ref: constant_completion(&[0]),
            label: 0,
            iteration: 0,
        });
        let loss = bce_loss(&ThetaParams::zeros(2, 1.0), &data, &phi).unwrap();
        assert_relative_eq!(loss, 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(loss, 0.6931472, epsilon = 1e-6);
    }

    #[test]
    fn bce_loss_single_sample_at_point_nine() {
        // Prediction 0.9 on a label-1 sample: loss = -ln 0.9.
        let z = 9f64.ln();
        let phi = table_features(vec![DVector::from_vec(vec![z, -z])], 2.0 * z);
        let theta = ThetaParams::new(DVector::from_vec(vec![0.5, -0.5]), 1.0).unwrap();
        let data = one_sample_dataset(0, 1);
        let loss = bce_loss(&theta, &data, &phi).unwrap();
        assert_relative_eq!(loss, -(0.9f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(loss, 0.1053605, epsilon = 1e-6);
    }

    #[test]
    fn bce_loss_rejects_empty_dataset() {
        let phi = token_features(2, 10.0);
        let err = bce_loss(&ThetaParams::zeros(2, 1.0), &PreferenceDataset::new(), &phi)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn fitted_loss_attains_label_entropy_on_constant_features() {
        // With a single feature value the model can only predict the base
        // rate, so the optimal loss is the empirical label entropy.
        let phi = table_features(vec![DVector::from_vec(vec![0.5, -0.5])], 1.0);
        let mut data = PreferenceDataset::new();
        for i in 0..10 {
            data.push(PreferenceSample {
                context: State::empty(),
                y: constant_completion(&[0]),
                y_ref: constant_completion(&[0]),
                label: u8::from(i < 3),
                iteration: 0,
            });
        }
        let fit = fit_mle(&data, &phi, 5.0, &MleOptions::default()).unwrap();
        let m = 0.3f64;
        let entropy = -m * m.ln() - (1.0 - m) * (1.0 - m).ln();
        assert!(fit.loss >= entropy - 1e-9);
        assert_relative_eq!(fit.loss, entropy, epsilon = 1e-6);
    }

    fn random_dataset(
        seed: u64,
        n: usize,
        dim: usize,
    ) -> (PreferenceDataset, FeatureMap) {
        let mut rng = derive_rng(seed, "pref-random-data", 0);
        let mut rows = Vec::new();
        let mut data = PreferenceDataset::new();
        for i in 0..n {
            let v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let norm = v.norm();
            rows.push(if norm > 1.0 { v / norm } else { v });
            data.push(PreferenceSample {
                context: State::empty(),
                y: constant_completion(&[i as u32]),
                y_ref: constant_completion(&[0]),
                label: u8::from(rng.gen::<f64>() < 0.5),
                iteration: 0,
            });
        }
        (data, table_features(rows, 1.0))
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..20u64 {
            let (data, phi) = random_dataset(seed, 40, 3);
            let mut rng = derive_rng(seed, "pref-grad-theta", 0);
            let raw = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let theta = project_theta(&raw, 2.0);
            let (grad, _) = bce_grad_hess(&theta, &data, &phi).unwrap();

            let (xs, os) = data.featurize(&phi).unwrap();
            let h = 1e-5;
            let mut fd = DVector::zeros(3);
            for j in 0..3 {
                let mut plus = theta.vector().clone();
                let mut minus = theta.vector().clone();
                plus[j] += h;
                minus[j] -= h;
                fd[j] = (bce_loss_on(&xs, &os, &plus) - bce_loss_on(&xs, &os, &minus)) / (2.0 * h);
            }
            let rel = (&grad - &fd).amax() / grad.amax().max(1e-8);
            assert!(rel < 1e-6, "seed {seed}: relative gradient error {rel}");
        }
    }

    #[test]
    fn hessian_is_psd_with_quarter_weight_at_zero() {
        let (data, phi) = random_dataset(42, 60, 4);
        let theta = ThetaParams::zeros(4, 1.0);
        let (_, hess) = bce_grad_hess(&theta, &data, &phi).unwrap();
        let eig = hess.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-10);

        // Single sample at z = 0: H = 0.25 * Phi Phi^T exactly.
        let phi1 = table_features(vec![DVector::from_vec(vec![0.6, -0.8])], 1.0);
        let data1 = one_sample_dataset(0, 1);
        let (_, h1) = bce_grad_hess(&ThetaParams::zeros(2, 1.0), &data1, &phi1).unwrap();
        assert_relative_eq!(h1[(0, 0)], 0.25 * 0.36, epsilon = 1e-12);
        assert_relative_eq!(h1[(0, 1)], 0.25 * -0.48, epsilon = 1e-12);
    }

    #[test]
    fn bce_loss_is_convex_along_segments() {
        let (data, phi) = random_dataset(9, 50, 3);
        let (xs, os) = data.featurize(&phi).unwrap();
        let mut rng = derive_rng(9, "pref-convexity", 1);
        for _ in 0..200 {
            let a = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let b = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let mid = (&a + &b) * 0.5;
            let fa = bce_loss_on(&xs, &os, &a);
            let fb = bce_loss_on(&xs, &os, &b);
            let fm = bce_loss_on(&xs, &os, &mid);
            assert!(fm <= 0.5 * (fa + fb) + 1e-12);
        }
    }

    #[test]
    fn project_theta_examples_and_idempotence() {
        let p = project_theta(&DVector::from_vec(vec![1.0, 1.0]), 1.0);
        assert_eq!(p.vector(), &DVector::from_vec(vec![0.0, 0.0]));

        let p = project_theta(&DVector::from_vec(vec![3.0, -3.0]), 1.0);
        assert_relative_eq!(p.vector()[0], 0.7071068, epsilon = 1e-7);
        assert_relative_eq!(p.vector()[1], -0.7071068, epsilon = 1e-7);

        let mut rng = derive_rng(10, "pref-project", 0);
        for _ in 0..100 {
            let v = DVector::from_fn(5, |_, _| rng.gen_range(-3.0..3.0));
            let once = project_theta(&v, 1.5);
            let twice = project_theta(once.vector(), 1.5);
            assert!((once.vector() - twice.vector()).norm() < 1e-12);
            assert!(once.vector().sum().abs() < 1e-12);
            assert!(once.vector().norm() <= 1.5 + 1e-12);
        }
    }

    #[test]
    fn fit_mle_balanced_symmetric_data_gives_zero() {
        // Every feature vector appears with both labels: gradient at zero
        // vanishes, so the optimum is theta = 0.
        let phi = token_features(3, 10.0);
        let mut data = PreferenceDataset::new();
        for ids in [[1u32, 2, 0], [0, 1, 2], [2, 0, 1]] {
            for label in [0u8, 1] {
                data.push(PreferenceSample {
                    context: State::empty(),
                    y: constant_completion(&ids),
                    y_ref: constant_completion(&[0]),
                    label,
                    iteration: 0,
                });
            }
        }
        let fit = fit_mle(&data, &phi, 2.0, &MleOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.theta.vector().norm() < 1e-6);
    }

    #[test]
    fn fit_mle_recovers_realizable_parameter() {
        let dim = 4;
        let n = 4096;
        let bound = 1.5;
        let mut rng = derive_rng(20, "pref-recovery", 0);
        let theta_star =
            project_theta(&DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)), bound);
        // Rescale onto the sphere of radius `bound` inside the hyperplane.
        let theta_star = ThetaParams::new(
            theta_star.vector() * (bound / theta_star.vector().norm()),
            bound,
        )
        .unwrap();

        let mut rows = Vec::with_capacity(n);
        let mut data = PreferenceDataset::new();
        for i in 0..n {
            let v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let v = &v / v.norm();
            let p = sigmoid(theta_star.vector().dot(&v));
            rows.push(v);
            data.push(PreferenceSample {
                context: State::empty(),
                y: constant_completion(&[i as u32]),
                y_ref: constant_completion(&[0]),
                label: u8::from(rng.gen::<f64>() < p),
                iteration: 0,
            });
        }
        let phi = table_features(rows, 1.0);
        let fit = fit_mle(&data, &phi, bound, &MleOptions::default()).unwrap();
        let err = (fit.theta.vector() - theta_star.vector()).norm();
        assert!(err < 0.15, "recovery error {err}");
        assert!(fit.theta.vector().sum().abs() < 1e-10);
        assert!(fit.theta.vector().norm() <= bound + 1e-10);
        assert!(fit.loss <= bce_loss(&ThetaParams::zeros(dim, bound), &data, &phi).unwrap());
    }

    /// Newton iteration restricted to the zero-sum hyperplane; an
    /// independent check of the interior optimum.
    fn newton_on_hyperplane(xs: &[DVector<f64>], os: &[f64], dim: usize) -> DVector<f64> {
        // Orthonormal basis of the hyperplane via Gram-Schmidt on
        // e_i - (1/d) 1.
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for i in 0..dim - 1 {
            let mut v = DVector::from_fn(dim, |j, _| {
                if j == i { 1.0 - 1.0 / dim as f64 } else { -1.0 / dim as f64 }
            });
            for b in &basis {
                let c = v.dot(b);
                v -= c * b;
            }
            v /= v.norm();
            basis.push(v);
        }
        let u = DMatrix::from_columns(&basis);
        let mut beta = DVector::zeros(dim - 1);
        for _ in 0..200 {
            let theta = &u * &beta;
            let grad = bce_grad_on(xs, os, &theta);
            let n = xs.len() as f64;
            let mut hess = DMatrix::zeros(dim, dim);
            for x in xs {
                let s = sigmoid(theta.dot(x));
                hess.syger(s * (1.0 - s) / n, x, x, 1.0);
            }
            hess.fill_upper_triangle_with_lower_triangle();
            let g = u.transpose() * &grad;
            if g.norm() < 1e-13 {
                break;
            }
            let h = u.transpose() * &hess * &u;
            let step = h
                .lu()
                .solve(&g)
                .expect("reduced Hessian is invertible on this data");
            beta -= step;
        }
        &u * &beta
    }

    #[test]
    fn fit_mle_matches_independent_newton_solver() {
        let dim = 4;
        let mut rng = derive_rng(21, "pref-newton", 0);
        let theta_star = project_theta(&DVector::from_fn(dim, |_, _| rng.gen_range(-0.5..0.5)), 1.0);
        let mut rows = Vec::new();
        let mut data = PreferenceDataset::new();
        for i in 0..800usize {
            let v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let v = &v / v.norm();
            let p = sigmoid(theta_star.vector().dot(&v));
            rows.push(v);
            data.push(PreferenceSample {
                context: State::empty(),
                y: constant_completion(&[i as u32]),
                y_ref: constant_completion(&[0]),
                label: u8::from(rng.gen::<f64>() < p),
                iteration: 0,
            });
        }
        let phi = table_features(rows, 1.0);
        let (xs, os) = data.featurize(&phi).unwrap();
        let newton = newton_on_hyperplane(&xs, &os, dim);
        let bound = 10.0;
        assert!(newton.norm() < bound, "optimum must be interior for this check");
        let fit = fit_mle(&data, &phi, bound, &MleOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.projected_grad_norm < 1e-6);
        let gap = (fit.theta.vector() - &newton).norm();
        assert!(gap < 1e-5, "PGD vs Newton gap {gap}");
    }

    #[test]
    fn seminorm_examples() {
        let phi = table_features(
            vec![DVector::from_vec(vec![2f64.sqrt(), 0.0]), DVector::from_vec(vec![0.0, 2f64.sqrt()])],
            2.0,
        );
        let mut data = PreferenceDataset::new();
        for i in 0..2u32 {
            data.push(PreferenceSample {
                context: State::empty(),
                y: constant_completion(&[i]),
                y_ref: constant_completion(&[0]),
                label: 1,
                iteration: 0,
            });
        }
        // Sigma_D = I here (each scaled one-hot appears once over n = 2).
        let a = ThetaParams::new(DVector::from_vec(vec![0.3, -0.3]), 1.0).unwrap();
        let b = ThetaParams::new(DVector::from_vec(vec![-0.1, 0.1]), 1.0).unwrap();
        let delta_norm = (a.vector() - b.vector()).norm();
        assert_relative_eq!(
            seminorm_error(&a, &b, &data, &phi, 0.0).unwrap(),
            delta_norm,
            epsilon = 1e-12
        );
        assert_eq!(seminorm_error(&a, &a, &data, &phi, 0.0).unwrap(), 0.0);
        assert!(seminorm_error(&a, &b, &data, &phi, -0.1).is_err());

        // Hand value: delta = (1, 0), Sigma = diag(2, 1), lambda = 1.
        let xs =
            vec![DVector::from_vec(vec![2f64.sqrt(), 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        let delta = DVector::from_vec(vec![1.0, 0.0]);
        // Sigma_D = diag(1, 0.5) from these two rows; rescale rows so
        // Sigma_D = diag(2, 1): use n = 1 weighting instead.
        let direct = seminorm_on(&[xs[0].clone() * 2f64.sqrt()], &delta, 1.0);
        // (1/1) * (2)^2-free: <x, delta>^2 = 4... construct explicitly below.
        let _ = direct;
        let x_single = vec![DVector::from_vec(vec![2f64.sqrt(), 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        // Sigma_D of these 2 rows = diag(1, 0.5): scale delta instead.
        let quad = seminorm_on(&x_single, &delta, 1.0);
        assert_relative_eq!(quad, (1.0 + 1.0f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn seminorm_hand_quadratic_form() {
        // Sigma_D = [[2,0],[0,1]] via rows (2,0) and (0, sqrt(2)) over n = 2.
        let xs = vec![DVector::from_vec(vec![2.0, 0.0]), DVector::from_vec(vec![0.0, 2f64.sqrt()])];
        let delta = DVector::from_vec(vec![1.0, 0.0]);
        let v = seminorm_on(&xs, &delta, 1.0);
        assert_relative_eq!(v, 3f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(v, 1.7320508, epsilon = 1e-6);
    }

    #[test]
    fn gamma_values_and_monotonicity() {
        assert_relative_eq!(gamma(1.0, 1.0), 0.1966119, epsilon = 1e-6);
        assert_relative_eq!(gamma(1e-9, 1.0), 0.25, epsilon = 1e-6);
        let mut previous = f64::INFINITY;
        for lb in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let g = gamma(lb, 1.0);
            assert!(g < previous);
            previous = g;
        }
        assert!(gamma_conservative(1.0, 1.0) < gamma(1.0, 1.0));
    }

    #[test]
    fn strong_convexity_witness() {
        // Bregman gap of the loss >= gamma_conservative * seminorm^2 for
        // parameters inside the zero-sum norm ball, L = 1, B = 2.
        let bound = 2.0;
        let (data, phi) = random_dataset(30, 60, 4);
        let (xs, os) = data.featurize(&phi).unwrap();
        let g = gamma_conservative(1.0, bound);
        let mut rng = derive_rng(30, "pref-strong-convexity", 1);
        for trial in 0..100 {
            let theta_star =
                project_theta(&DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0)), bound);
            let perturbed = project_theta(
                &(theta_star.vector() + DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0))),
                bound,
            );
            let delta = perturbed.vector() - theta_star.vector();
            let gap = bce_loss_on(&xs, &os, perturbed.vector())
                - bce_loss_on(&xs, &os, theta_star.vector())
                - bce_grad_on(&xs, &os, theta_star.vector()).dot(&delta);
            let sq = seminorm_on(&xs, &delta, 0.0).powi(2);
            assert!(
                gap >= g * sq - 1e-10,
                "trial {trial}: gap {gap} < {} (seminorm^2 {sq})",
                g * sq
            );
        }
    }

    #[test]
    fn reward_shift_invariance() {
        let oracle = BtOracle::stochastic(|c: &Completion| {
            c.suffix().iter().map(|t| t.id() as f64 * 0.37).sum::<f64>()
        });
        let mut pairs = Vec::new();
        let mut rng = derive_rng(31, "pref-shift", 0);
        for _ in 0..100 {
            let ctx = State::from_ids(&[rng.gen_range(0..5)]);
            let a = Completion::new(ctx.clone(), vec![Token(rng.gen_range(0..9))], true);
            let b = Completion::new(ctx, vec![Token(rng.gen_range(0..9))], true);
            pairs.push((a, b));
        }
        assert!(reward_shift_invariance_check(&oracle, |_| 0.0, &pairs));
        assert!(reward_shift_invariance_check(&oracle, |_| 7.3, &pairs));
        assert!(reward_shift_invariance_check(
            &oracle,
            |s: &State| s.tokens().first().map_or(0.0, |t| t.id() as f64 * 3.1),
            &pairs
        ));
        // A completion-dependent perturbation changes the probabilities:
        // compare against an oracle whose reward was perturbed per suffix.
        let perturbed = BtOracle::stochastic(|c: &Completion| {
            c.suffix().iter().map(|t| t.id() as f64 * 0.37).sum::<f64>()
                + c.suffix().first().map_or(0.0, |t| f64::from(t.id() % 2 == 0))
        });
        let differs = pairs.iter().any(|(a, b)| {
            (bt_prob(oracle.reward(a), oracle.reward(b))
                - bt_prob(perturbed.reward(a), perturbed.reward(b)))
            .abs()
                > 0.01
        });
        assert!(differs);
    }

    #[test]
    fn win_label_uses_renormalized_reference() {
        let oracle = BtOracle::stochastic(|_: &Completion| 1.0);
        let mut rng = derive_rng(32, "pref-win", 0);
        let y = constant_completion(&[1]);
        let n = 10_000;
        let wins: u32 = (0..n).map(|_| sample_win_label(&oracle, &y, &mut rng).unwrap() as u32).sum();
        let mean = wins as f64 / n as f64;
        assert!((mean - 0.7310586).abs() < 0.02, "mean = {mean}");

        let det = BtOracle::deterministic_by_correctness(|_: &Completion| 1.0);
        assert!(sample_win_label(&det, &y, &mut rng).is_err());
    }
}
