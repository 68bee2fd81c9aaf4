//! The four training objectives: ERM cross-entropy, the IRM gradient-scale
//! penalty, the REx risk-variance penalty and group-DRO exponentiated
//! weighting, with warmup/rescale scheduling.

use crate::error::{Error, Result};
use crate::nn::{self, MaskMultiplier, ModelArchitecture, ParameterSet};
use crate::scalar::{c, Scalar};
use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskKind {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "IRM")]
    Irm,
    #[serde(rename = "REx")]
    Rex,
    #[serde(rename = "DRO")]
    Dro,
}

/// Which risk to train with and how the penalty is scheduled. DRO fields
/// are ignored unless kind is DRO; penalty fields are ignored for ERM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: RiskKind,
    #[serde(rename = "lambda")]
    pub penalty_coefficient: f64,
    pub warmup_step: usize,
    #[serde(rename = "rescale")]
    pub rescale_by_coefficient: bool,
    #[serde(rename = "eta_q")]
    pub dro_step_size: f64,
}

impl ObjectiveSpec {
    pub fn erm() -> Self {
        ObjectiveSpec {
            kind: RiskKind::Erm,
            penalty_coefficient: 0.0,
            warmup_step: 0,
            rescale_by_coefficient: false,
            dro_step_size: 0.0,
        }
    }

    pub fn irm(lambda: f64, warmup_step: usize, rescale: bool) -> Self {
        ObjectiveSpec {
            kind: RiskKind::Irm,
            penalty_coefficient: lambda,
            warmup_step,
            rescale_by_coefficient: rescale,
            dro_step_size: 0.0,
        }
    }

    pub fn rex(lambda: f64, warmup_step: usize, rescale: bool) -> Self {
        ObjectiveSpec {
            kind: RiskKind::Rex,
            penalty_coefficient: lambda,
            warmup_step,
            rescale_by_coefficient: rescale,
            dro_step_size: 0.0,
        }
    }

    pub fn dro(eta_q: f64) -> Self {
        ObjectiveSpec {
            kind: RiskKind::Dro,
            penalty_coefficient: 0.0,
            warmup_step: 0,
            rescale_by_coefficient: false,
            dro_step_size: eta_q,
        }
    }

    /// Penalty coefficient at a step: 1 before warmup, λ at and after.
    pub fn coefficient_at(&self, step: usize) -> f64 {
        if step < self.warmup_step {
            1.0
        } else {
            self.penalty_coefficient
        }
    }
}

/// One risk value per seen environment.
#[derive(Debug, Clone)]
pub struct EnvRisks<T: Scalar>(pub Vec<T>);

impl<T: Scalar> EnvRisks<T> {
    pub fn mean(&self) -> T {
        self.0.iter().copied().sum::<T>() / c::<T>(self.0.len() as f64)
    }
}

/// Simplex weights over seen environments for group DRO.
#[derive(Debug, Clone)]
pub struct DroState {
    pub q: Vec<f64>,
}

impl DroState {
    pub fn uniform(num_envs: usize) -> Self {
        DroState { q: vec![1.0 / num_envs as f64; num_envs] }
    }

    /// Exponentiated update q′_e ∝ q_e · exp(η_q · R_e), renormalized.
    pub fn update<T: Scalar>(&mut self, risks: &EnvRisks<T>, eta_q: f64) -> Result<()> {
        if eta_q <= 0.0 {
            return Err(Error::invalid("dro step size must be positive"));
        }
        if risks.0.len() != self.q.len() {
            return Err(Error::shape("risk count does not match DRO weights"));
        }
        // Shift by the max risk before exponentiating so large risks cannot overflow.
        let max_r = risks.0.iter().map(|r| r.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        for (q, r) in self.q.iter_mut().zip(&risks.0) {
            *q *= (eta_q * (r.as_f64() - max_r)).exp();
        }
        let sum: f64 = self.q.iter().sum();
        for q in &mut self.q {
            *q /= sum;
        }
        Ok(())
    }

    /// Σ q_e R_e with the weights treated as constants.
    pub fn loss<T: Scalar>(&self, risks: &EnvRisks<T>) -> T {
        risks
            .0
            .iter()
            .zip(&self.q)
            .map(|(&r, &q)| r * c::<T>(q))
            .sum()
    }
}

fn softmax<T: Scalar>(scores: &Array2<T>) -> Array2<T> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().sum::<T>();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean over the batch of −log softmax(scores)[label].
pub fn cross_entropy<T: Scalar>(scores: &Array2<T>, labels: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_grad(scores, labels)?.0)
}

/// Cross-entropy together with its gradient (softmax − onehot)/batch.
pub fn cross_entropy_with_grad<T: Scalar>(
    scores: &Array2<T>,
    labels: &[usize],
) -> Result<(T, Array2<T>)> {
    let (n, k) = scores.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {} score rows", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax(scores);
    let inv_n = T::one() / c::<T>(n as f64);
    let mut loss = T::zero();
    let mut grad = probs;
    for (i, &label) in labels.iter().enumerate() {
        let p = grad[[i, label]];
        loss -= p.ln();
        grad[[i, label]] -= T::one();
    }
    grad.mapv_inplace(|v| v * inv_n);
    Ok((loss * inv_n, grad))
}

/// Cross-entropy evaluated per environment with shared parameters/mask,
/// batch statistics per environment batch.
pub fn per_env_risks<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    env_batches: &[(Array4<T>, Vec<usize>)],
) -> Result<EnvRisks<T>> {
    let mut risks = Vec::with_capacity(env_batches.len());
    for (batch, labels) in env_batches {
        if batch.dim().0 == 0 {
            return Err(Error::invalid("empty environment batch"));
        }
        let scores = nn::forward(arch, params, mask, batch, nn::Mode::Train)?;
        risks.push(cross_entropy(&scores, labels)?);
    }
    Ok(EnvRisks(risks))
}

/// The IRMv1 diagnostic for one environment's scores: the derivative
/// D = d/ds CE(s·scores)|_{s=1} and its gradient with respect to the scores.
pub fn irm_scale_grad<T: Scalar>(scores: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (n, k) = scores.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {} score rows", labels.len(), n)));
    }
    let probs = softmax(scores);
    let inv_n = T::one() / c::<T>(n as f64);
    let mut d = T::zero();
    let mut d_grad = Array2::<T>::zeros((n, k));
    for i in 0..n {
        let label = labels[i];
        let z_dot_p = (0..k).map(|cidx| scores[[i, cidx]] * probs[[i, cidx]]).sum::<T>();
        for cidx in 0..k {
            let y = if cidx == label { T::one() } else { T::zero() };
            let p = probs[[i, cidx]];
            d += (p - y) * scores[[i, cidx]];
            d_grad[[i, cidx]] = (p - y) + p * (scores[[i, cidx]] - z_dot_p);
        }
    }
    d_grad.mapv_inplace(|v| v * inv_n);
    Ok((d * inv_n, d_grad))
}

/// Σ_e ‖d/ds R^e(s·f)|_{s=1}‖² over the given environment batches.
pub fn irm_penalty<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    env_batches: &[(Array4<T>, Vec<usize>)],
) -> Result<T> {
    let mut total = T::zero();
    for (batch, labels) in env_batches {
        let scores = nn::forward(arch, params, mask, batch, nn::Mode::Train)?;
        let (d, _) = irm_scale_grad(&scores, labels)?;
        total += d * d;
    }
    Ok(total)
}

/// Population variance of the per-environment risks.
pub fn rex_penalty<T: Scalar>(risks: &EnvRisks<T>) -> Result<T> {
    let e = risks.0.len();
    if e < 2 {
        return Err(Error::invalid("REx penalty needs at least two environments"));
    }
    let mean = risks.mean();
    let var = risks.0.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / c::<T>(e as f64);
    Ok(var)
}

/// Combine base risk and penalty under the warmup/rescale schedule. The
/// base is the mean of the risks (callers pass the DRO-weighted loss as a
/// one-element risk vector for DRO).
pub fn total_objective<T: Scalar>(
    spec: &ObjectiveSpec,
    step: usize,
    risks: &EnvRisks<T>,
    penalty: T,
) -> T {
    let base = risks.mean();
    match spec.kind {
        RiskKind::Erm | RiskKind::Dro => base,
        RiskKind::Irm | RiskKind::Rex => {
            let coeff = spec.coefficient_at(step);
            let mut total = base + c::<T>(coeff) * penalty;
            if spec.rescale_by_coefficient && coeff > 1.0 {
                total = total / c::<T>(coeff);
            }
            total
        }
    }
}

/// Scores-level evaluation of an objective: total loss, per-environment
/// risks, penalty and d(total)/d(scores) per environment.
pub struct ScoreObjective<T: Scalar> {
    pub total: T,
    pub risks: EnvRisks<T>,
    pub penalty: T,
    pub d_scores: Vec<Array2<T>>,
}

/// Evaluate the objective and its score gradients on per-environment score
/// matrices. For DRO the state is updated first (exponentiated weighting),
/// then treated as constant inside the gradient.
pub fn objective_on_scores<T: Scalar>(
    spec: &ObjectiveSpec,
    step: usize,
    scores: &[Array2<T>],
    labels: &[Vec<usize>],
    mut dro: Option<&mut DroState>,
) -> Result<ScoreObjective<T>> {
    let e = scores.len();
    if e == 0 {
        return Err(Error::invalid("no environment batches"));
    }
    let inv_e = 1.0 / e as f64;
    let mut risks = Vec::with_capacity(e);
    let mut ce_grads = Vec::with_capacity(e);
    for (s, l) in scores.iter().zip(labels) {
        let (r, g) = cross_entropy_with_grad(s, l)?;
        risks.push(r);
        ce_grads.push(g);
    }
    let risks = EnvRisks(risks);

    match spec.kind {
        RiskKind::Erm => {
            let d_scores = ce_grads
                .into_iter()
                .map(|g| g.mapv(|v| v * c::<T>(inv_e)))
                .collect();
            Ok(ScoreObjective { total: risks.mean(), risks, penalty: T::zero(), d_scores })
        }
        RiskKind::Dro => {
            let state = dro
                .as_deref_mut()
                .ok_or_else(|| Error::invalid("DRO objective needs a DroState"))?;
            state.update(&risks, spec.dro_step_size)?;
            let total = state.loss(&risks);
            let d_scores = ce_grads
                .into_iter()
                .zip(&state.q)
                .map(|(g, &q)| g.mapv(|v| v * c::<T>(q)))
                .collect();
            Ok(ScoreObjective { total, risks, penalty: T::zero(), d_scores })
        }
        RiskKind::Rex => {
            let penalty = rex_penalty(&risks)?;
            let coeff = spec.coefficient_at(step);
            let mean = risks.mean();
            let mut total = mean + c::<T>(coeff) * penalty;
            let mut d_scores: Vec<Array2<T>> = ce_grads
                .into_iter()
                .zip(&risks.0)
                .map(|(g, &r)| {
                    let w = c::<T>(inv_e) + c::<T>(coeff) * c::<T>(2.0 * inv_e) * (r - mean);
                    g.mapv(|v| v * w)
                })
                .collect();
            if spec.rescale_by_coefficient && coeff > 1.0 {
                total = total / c::<T>(coeff);
                for g in &mut d_scores {
                    g.mapv_inplace(|v| v / c::<T>(coeff));
                }
            }
            Ok(ScoreObjective { total, risks, penalty, d_scores })
        }
        RiskKind::Irm => {
            let coeff = spec.coefficient_at(step);
            let mut penalty = T::zero();
            let mut d_scores = Vec::with_capacity(e);
            for ((s, l), ce_grad) in scores.iter().zip(labels).zip(ce_grads) {
                let (d, d_grad) = irm_scale_grad(s, l)?;
                penalty += d * d;
                let two_d = c::<T>(2.0) * d * c::<T>(coeff);
                let mut g = ce_grad.mapv(|v| v * c::<T>(inv_e));
                g.zip_mut_with(&d_grad, |gv, &dv| *gv += two_d * dv);
                d_scores.push(g);
            }
            let mut total = risks.mean() + c::<T>(coeff) * penalty;
            if spec.rescale_by_coefficient && coeff > 1.0 {
                total = total / c::<T>(coeff);
                for g in &mut d_scores {
                    g.mapv_inplace(|v| v / c::<T>(coeff));
                }
            }
            Ok(ScoreObjective { total, risks, penalty, d_scores })
        }
    }
}
