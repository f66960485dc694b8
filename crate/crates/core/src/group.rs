//! Sampled rollout groups and group-relative advantage normalization.
//!
//! A [`RolloutGroup`] holds the `G` responses sampled for one prompt. Each
//! response carries its sequence-level reward and, when available, the
//! per-token policy ratios `rho_{i,t} = pi_new / pi_old`.
//! [`normalize_advantages`] turns the rewards into the normalized advantages
//!
//! ```text
//! mu = mean(r),  sigma = sqrt(mean((r - mu)^2) + eps_var),  A_i = (r_i - mu) / sigma
//! ```
//!
//! and partitions responses by the strict sign of `A_i`.

use crate::error::{AggError, Result};

/// Relative tolerance between supplied ratios and `exp(logp_new - logp_old)`.
pub const LOGP_RATIO_RTOL: f64 = 1e-9;

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    len: usize,
    tokens: Option<Vec<u32>>,
    reward: f64,
    ratios: Option<Vec<f64>>,
    logp_new: Option<Vec<f64>>,
    logp_old: Option<Vec<f64>>,
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    match ratios.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
        Some(t) => Err(AggError::InvalidResponse(format!(
            "ratio {} at token {t} is not strictly positive and finite",
            ratios[t]
        ))),
        None => Ok(()),
    }
}

impl Response {
    /// Response with explicit token ids and per-token ratios.
    pub fn new(tokens: Vec<u32>, reward: f64, ratios: Vec<f64>) -> Result<Self> {
        Self::from_parts(tokens.len(), Some(tokens), reward, Some(ratios), None, None)
    }

    /// Response whose ratios are derived from per-token log-probabilities.
    pub fn from_logprobs(
        tokens: Vec<u32>,
        reward: f64,
        logp_new: Vec<f64>,
        logp_old: Vec<f64>,
    ) -> Result<Self> {
        Self::from_parts(
            tokens.len(),
            Some(tokens),
            reward,
            None,
            Some(logp_new),
            Some(logp_old),
        )
    }

    /// Response without token ids; its length is the number of ratios.
    pub fn from_ratios(reward: f64, ratios: Vec<f64>) -> Result<Self> {
        Self::from_parts(ratios.len(), None, reward, Some(ratios), None, None)
    }

    /// Response known only by its token count. Supports length and advantage
    /// diagnostics but not objective evaluation.
    pub fn length_only(len: usize, reward: f64) -> Result<Self> {
        Self::from_parts(len, None, reward, None, None, None)
    }

    /// General constructor. `len` must agree with every supplied per-token
    /// array. If both log-prob arrays are given and `ratios` is not, ratios
    /// are derived from them; if both are given they must agree.
    pub fn from_parts(
        len: usize,
        tokens: Option<Vec<u32>>,
        reward: f64,
        ratios: Option<Vec<f64>>,
        logp_new: Option<Vec<f64>>,
        logp_old: Option<Vec<f64>>,
    ) -> Result<Self> {
        if len == 0 {
            return Err(AggError::InvalidResponse("response has no tokens".into()));
        }
        let check_len = |name: &str, n: usize| {
            if n != len {
                Err(AggError::InvalidResponse(format!(
                    "{name} has length {n}, expected {len}"
                )))
            } else {
                Ok(())
            }
        };
        if let Some(t) = &tokens {
            check_len("tokens", t.len())?;
        }
        if let Some(r) = &ratios {
            check_len("ratios", r.len())?;
            check_ratios(r)?;
        }
        let derived = match (&logp_new, &logp_old) {
            (Some(new), Some(old)) => {
                check_len("logp_new", new.len())?;
                check_len("logp_old", old.len())?;
                let d: Vec<f64> = new.iter().zip(old).map(|(n, o)| (n - o).exp()).collect();
                check_ratios(&d)?;
                Some(d)
            }
            (None, None) => None,
            _ => {
                return Err(AggError::InvalidResponse(
                    "logp_new and logp_old must be supplied together".into(),
                ))
            }
        };
        let ratios = match (ratios, derived) {
            (Some(r), Some(d)) => {
                for (t, (a, b)) in r.iter().zip(&d).enumerate() {
                    if (a - b).abs() > LOGP_RATIO_RTOL * a.abs().max(b.abs()) {
                        return Err(AggError::InvalidResponse(format!(
                            "ratio {a} at token {t} disagrees with exp(logp_new - logp_old) = {b}"
                        )));
                    }
                }
                Some(r)
            }
            (r, d) => r.or(d),
        };
        Ok(Self {
            len,
            tokens,
            reward,
            ratios,
            logp_new,
            logp_old,
        })
    }

    /// Token count `T_i`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tokens(&self) -> Option<&[u32]> {
        self.tokens.as_deref()
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn ratios(&self) -> Option<&[f64]> {
        self.ratios.as_deref()
    }

    pub fn logp_new(&self) -> Option<&[f64]> {
        self.logp_new.as_deref()
    }

    pub fn logp_old(&self) -> Option<&[f64]> {
        self.logp_old.as_deref()
    }

    /// Same response with its ratios replaced.
    pub fn with_ratios(&self, ratios: Vec<f64>) -> Result<Self> {
        Self::from_parts(
            self.len,
            self.tokens.clone(),
            self.reward,
            Some(ratios),
            None,
            None,
        )
    }
}

/// The `G` responses sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    prompt_id: String,
    responses: Vec<Response>,
    eps_var: f64,
}

impl RolloutGroup {
    pub fn new(
        prompt_id: impl Into<String>,
        responses: Vec<Response>,
        eps_var: f64,
    ) -> Result<Self> {
        if responses.len() < 2 {
            return Err(AggError::GroupTooSmall(responses.len()));
        }
        if !(eps_var.is_finite() && eps_var >= 0.0) {
            return Err(AggError::InvalidEpsVar(eps_var));
        }
        Ok(Self {
            prompt_id: prompt_id.into(),
            responses,
            eps_var,
        })
    }

    /// Convenience constructor for synthetic groups: one response per
    /// `(reward, ratios)` pair, no token ids.
    pub fn from_ratios(rewards: &[f64], ratios: Vec<Vec<f64>>, eps_var: f64) -> Result<Self> {
        if rewards.len() != ratios.len() {
            return Err(AggError::ShapeMismatch(format!(
                "{} rewards but {} ratio rows",
                rewards.len(),
                ratios.len()
            )));
        }
        let responses = rewards
            .iter()
            .zip(ratios)
            .map(|(&r, rho)| Response::from_ratios(r, rho))
            .collect::<Result<Vec<_>>>()?;
        Self::new("synthetic", responses, eps_var)
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn responses(&self) -> &[Response] {
        &self.responses
    }

    pub fn eps_var(&self) -> f64 {
        self.eps_var
    }

    /// Group size `G`.
    pub fn size(&self) -> usize {
        self.responses.len()
    }

    /// Total token count `N`.
    pub fn total_tokens(&self) -> usize {
        self.responses.iter().map(Response::len).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.responses.iter().map(Response::len).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(Response::reward).collect()
    }

    /// True when at least one response lacks per-token ratios.
    pub fn is_length_only(&self) -> bool {
        self.responses.iter().any(|r| r.ratios.is_none())
    }

    /// Per-response ratio slices; errors for length-only groups.
    pub fn ratios(&self) -> Result<Vec<&[f64]>> {
        self.responses
            .iter()
            .map(|r| r.ratios().ok_or(AggError::LengthOnly))
            .collect()
    }

    /// True when every reward is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.responses
            .iter()
            .all(|r| r.reward == 0.0 || r.reward == 1.0)
    }

    /// Same group with every response's ratios replaced.
    pub fn with_ratios(&self, ratios: Vec<Vec<f64>>) -> Result<Self> {
        if ratios.len() != self.size() {
            return Err(AggError::ShapeMismatch(format!(
                "{} ratio rows for a group of {}",
                ratios.len(),
                self.size()
            )));
        }
        let responses = self
            .responses
            .iter()
            .zip(ratios)
            .map(|(r, rho)| r.with_ratios(rho))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt_id: self.prompt_id.clone(),
            responses,
            eps_var: self.eps_var,
        })
    }

    /// Same group with responses reordered by `perm` (`perm[j]` is the old index of new response `j`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            prompt_id: self.prompt_id.clone(),
            responses: perm.iter().map(|&i| self.responses[i].clone()).collect(),
            eps_var: self.eps_var,
        }
    }
}

/// Strict sign class of a normalized advantage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Pos,
    Neg,
    Zero,
}

/// Normalized sequence-level advantages with their sign partition.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    advantages: Vec<f64>,
    mu: f64,
    sigma: f64,
    pos: Vec<usize>,
    neg: Vec<usize>,
}

impl AdvantageSet {
    /// Builds a set from explicit advantages. The partition follows the
    /// strict sign; `mu` and `sigma` are recorded as given.
    pub fn from_advantages(advantages: Vec<f64>, mu: f64, sigma: f64) -> Self {
        let pos = (0..advantages.len())
            .filter(|&i| advantages[i] > 0.0)
            .collect();
        let neg = (0..advantages.len())
            .filter(|&i| advantages[i] < 0.0)
            .collect();
        Self {
            advantages,
            mu,
            sigma,
            pos,
            neg,
        }
    }

    /// All-zero set for a group whose rewards are all equal with `eps_var = 0`.
    /// `sigma` is reported as 0; every response falls in the zero class.
    pub fn degenerate(group: &RolloutGroup) -> Self {
        let mu = group.rewards().first().copied().unwrap_or(0.0);
        Self::from_advantages(vec![0.0; group.size()], mu, 0.0)
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Indices with `A_i > 0`.
    pub fn pos_indices(&self) -> &[usize] {
        &self.pos
    }

    /// Indices with `A_i < 0`.
    pub fn neg_indices(&self) -> &[usize] {
        &self.neg
    }

    /// Indices with `A_i == 0`.
    pub fn zero_indices(&self) -> Vec<usize> {
        (0..self.advantages.len())
            .filter(|&i| self.advantages[i] == 0.0)
            .collect()
    }

    /// Number of positive responses `k`.
    pub fn k(&self) -> usize {
        self.pos.len()
    }

    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }

    pub fn sign(&self, i: usize) -> Sign {
        let a = self.advantages[i];
        if a > 0.0 {
            Sign::Pos
        } else if a < 0.0 {
            Sign::Neg
        } else {
            Sign::Zero
        }
    }

    /// True when every advantage is zero.
    pub fn all_zero(&self) -> bool {
        self.pos.is_empty() && self.neg.is_empty()
    }

    pub(crate) fn check_shape(&self, group: &RolloutGroup) -> Result<()> {
        if self.advantages.len() != group.size() {
            return Err(AggError::ShapeMismatch(format!(
                "advantage set has {} entries, group has {} responses",
                self.advantages.len(),
                group.size()
            )));
        }
        Ok(())
    }

    /// Same set with entries reordered by `perm`, matching [`RolloutGroup::permuted`].
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_advantages(
            perm.iter().map(|&i| self.advantages[i]).collect(),
            self.mu,
            self.sigma,
        )
    }
}

/// Group-relative reward normalization.
pub fn normalize_advantages(group: &RolloutGroup) -> Result<AdvantageSet> {
    let rewards = group.rewards();
    if let Some((index, &value)) = rewards.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        return Err(AggError::NonFiniteReward { index, value });
    }
    let eps_var = group.eps_var();
    let all_equal = rewards.iter().all(|&r| r == rewards[0]);
    if all_equal {
        if eps_var == 0.0 {
            return Err(AggError::DegenerateGroup);
        }
        // Deviations are exactly zero; skip the arithmetic so rounding in
        // the mean cannot leak a tiny nonzero advantage.
        return Ok(AdvantageSet::from_advantages(
            vec![0.0; rewards.len()],
            rewards[0],
            eps_var.sqrt(),
        ));
    }
    let g = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / g;
    let sigma = (var + eps_var).sqrt();
    let advantages = rewards.iter().map(|r| (r - mu) / sigma).collect();
    Ok(AdvantageSet::from_advantages(advantages, mu, sigma))
}

/// Closed-form normalized advantages for binary rewards with `k` correct
/// responses out of `G` (and `eps_var = 0`): `(sqrt((G-k)/k), -sqrt(k/(G-k)))`.
pub fn binary_closed_form(g: usize, k: usize) -> Result<(f64, f64)> {
    if k == 0 || k >= g {
        return Err(AggError::KOutOfRange { g, k });
    }
    let (gf, kf) = (g as f64, k as f64);
    Ok((((gf - kf) / kf).sqrt(), -(kf / (gf - kf)).sqrt()))
}
