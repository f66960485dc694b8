use serde::{Deserialize, Serialize};

use crate::error::{AggError, Result};

/// Tabular softmax policy: one logit vector per `(prompt, position)`.
///
/// The last vocabulary symbol is end-of-sequence. The policy conditions on
/// the position only, not on the prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    n_prompts: usize,
    t_max: usize,
    vocab: usize,
    logits: Vec<f64>,
}

impl PolicyTable {
    /// All-zero logits, i.e. the uniform policy.
    pub fn uniform(n_prompts: usize, t_max: usize, vocab: usize) -> Result<Self> {
        if n_prompts == 0 || t_max == 0 {
            return Err(AggError::InvalidConfig(
                "policy needs at least one prompt and one position".into(),
            ));
        }
        if vocab < 2 {
            return Err(AggError::InvalidConfig(
                "vocabulary must hold a symbol and EOS".into(),
            ));
        }
        Ok(Self {
            n_prompts,
            t_max,
            vocab,
            logits: vec![0.0; n_prompts * t_max * vocab],
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn eos(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn n_params(&self) -> usize {
        self.logits.len()
    }

    /// Flat offset of the logit vector for `(prompt, pos)`.
    pub fn offset(&self, prompt: usize, pos: usize) -> usize {
        debug_assert!(prompt < self.n_prompts && pos < self.t_max);
        (prompt * self.t_max + pos) * self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn logits_at(&self, prompt: usize, pos: usize) -> &[f64] {
        let o = self.offset(prompt, pos);
        &self.logits[o..o + self.vocab]
    }

    pub fn set_logits_at(&mut self, prompt: usize, pos: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.vocab || values.iter().any(|v| !v.is_finite()) {
            return Err(AggError::InvalidConfig(format!(
                "expected {} finite logits",
                self.vocab
            )));
        }
        let o = self.offset(prompt, pos);
        self.logits[o..o + self.vocab].copy_from_slice(values);
        Ok(())
    }

    /// Softmax at `(prompt, pos)`.
    pub fn probs(&self, prompt: usize, pos: usize) -> Vec<f64> {
        let z = self.logits_at(prompt, pos);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// `log pi(symbol | prompt, pos)` via log-sum-exp.
    pub fn log_prob(&self, prompt: usize, pos: usize, symbol: u32) -> f64 {
        let z = self.logits_at(prompt, pos);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z[symbol as usize] - lse
    }

    /// Pretty-printed JSON dump.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy table serializes")
    }

    /// Per-token log-probabilities of `tokens` generated for `prompt`.
    pub fn sequence_log_probs(&self, prompt: usize, tokens: &[u32]) -> Vec<f64> {
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &s)| self.log_prob(prompt, pos, s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_normalizes() {
        let mut p = PolicyTable::uniform(2, 3, 4).unwrap();
        p.set_logits_at(1, 2, &[3.0, -1.0, 0.5, 700.0]).unwrap();
        for prompt in 0..2 {
            for pos in 0..3 {
                let s: f64 = p.probs(prompt, pos).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!((p.probs(0, 0)[0] - 0.25).abs() < 1e-15);
        let lp = p.log_prob(1, 2, 0);
        assert!((lp.exp() - p.probs(1, 2)[0]).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(PolicyTable::uniform(0, 1, 3).is_err());
        assert!(PolicyTable::uniform(1, 1, 1).is_err());
        let mut p = PolicyTable::uniform(1, 1, 3).unwrap();
        assert!(p.set_logits_at(0, 0, &[1.0]).is_err());
        assert!(p.set_logits_at(0, 0, &[1.0, f64::NAN, 0.0]).is_err());
        assert_eq!(p.eos(), 2);
    }
}
