//! Hyperparameters and symbolic constant labels.

use crate::envs::ActionSpace;

/// Algorithm hyperparameters shared by every loss of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct HyperParams {
    /// Discount factor, in `(0, 1]`.
    pub gamma: f64,
    /// GAE parameter, in `[0, 1]`.
    pub lambda: f64,
    /// Gradient-descent step size.
    pub lr: f64,
    /// PPO clip ratio.
    pub eps_ppo: f64,
    /// SAC entropy coefficient.
    pub alpha_sac: f64,
    /// TD3 target-policy noise standard deviation.
    pub td3_sigma: f64,
    /// TD3 target-policy noise clip.
    pub td3_c: f64,
    /// Polyak target update rate.
    pub tau: f64,
    /// Minimum hurdle score for a child to be evaluated.
    pub hurdle_alpha: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            gamma: 0.99,
            lambda: 0.97,
            lr: 1e-3,
            eps_ppo: 0.2,
            alpha_sac: 0.2,
            td3_sigma: 0.2,
            td3_c: 0.5,
            tau: 0.005,
            hurdle_alpha: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid hyperparameter {name} = {value}")]
pub struct InvalidHyperParam {
    pub name: &'static str,
    pub value: f64,
}

impl HyperParams {
    pub fn check(&self) -> Result<(), InvalidHyperParam> {
        let fields = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("lr", self.lr),
            ("eps_ppo", self.eps_ppo),
            ("alpha_sac", self.alpha_sac),
            ("td3_sigma", self.td3_sigma),
            ("td3_c", self.td3_c),
            ("tau", self.tau),
            ("hurdle_alpha", self.hurdle_alpha),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(InvalidHyperParam { name, value });
            }
        }
        let bad = |name, value| Err(InvalidHyperParam { name, value });
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", self.gamma);
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", self.lambda);
        }
        if self.eps_ppo <= 0.0 {
            return bad("eps_ppo", self.eps_ppo);
        }
        if self.td3_sigma < 0.0 {
            return bad("td3_sigma", self.td3_sigma);
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", self.tau);
        }
        Ok(())
    }
}

/// Labels a constant node may carry.
pub const KNOWN_LABELS: [&str; 8] = ["1+eps", "1-eps", "c", "-c", "a_low", "a_high", "alpha", "sigma"];

pub fn is_known_label(label: &str) -> bool {
    KNOWN_LABELS.contains(&label)
}

/// Resolves a constant label against the hyperparameters and the bound
/// action space. Action bounds use the first action dimension.
pub fn resolve_label(label: &str, hp: &HyperParams, actions: &ActionSpace) -> Option<f64> {
    Some(match label {
        "1+eps" => 1.0 + hp.eps_ppo,
        "1-eps" => 1.0 - hp.eps_ppo,
        "c" => hp.td3_c,
        "-c" => -hp.td3_c,
        "alpha" => hp.alpha_sac,
        "sigma" => hp.td3_sigma,
        "a_low" => match actions {
            ActionSpace::Continuous { low, .. } => *low.first()?,
            ActionSpace::Discrete(_) => return None,
        },
        "a_high" => match actions {
            ActionSpace::Continuous { high, .. } => *high.first()?,
            ActionSpace::Discrete(_) => return None,
        },
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert!(HyperParams::default().check().is_ok());
    }

    #[test]
    fn ppo_labels_resolve() {
        let hp = HyperParams { eps_ppo: 0.2, ..Default::default() };
        let a = ActionSpace::Discrete(2);
        assert_eq!(resolve_label("1+eps", &hp, &a), Some(1.2));
        assert_eq!(resolve_label("1-eps", &hp, &a), Some(0.8));
        assert_eq!(resolve_label("a_low", &hp, &a), None);
    }

    #[test]
    fn rejects_bad_gamma() {
        let hp = HyperParams { gamma: 0.0, ..Default::default() };
        assert!(hp.check().is_err());
    }
}
