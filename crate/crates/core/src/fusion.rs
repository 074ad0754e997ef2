//! The bounded log-linear fusion rule with temperature and smoothing, plus
//! analytic cross-entropy gradients with respect to its inputs.

use crate::dist::{softmax_lenient, CategoricalDistribution, LogScoreVector};
use crate::error::{Error, Result};

/// Operands of the fusion rule. `audio_log_probs` must be the log of a valid
/// distribution (its exponential sums to 1 within 1e-6).
#[derive(Debug, Clone)]
pub struct FusionInputs {
    pub audio_log_probs: LogScoreVector,
    pub prior: CategoricalDistribution,
    pub omega: f64,
    pub temperature: f64,
    pub epsilon: f64,
}

impl FusionInputs {
    fn validate(&self) -> Result<()> {
        if self.audio_log_probs.len() != self.prior.n_classes() {
            return Err(Error::Dimension(format!(
                "audio has {} classes, prior has {}",
                self.audio_log_probs.len(),
                self.prior.n_classes()
            )));
        }
        let sum: f64 = self.audio_log_probs.scores().iter().map(|&s| s.exp()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "exp(audio_log_probs) sums to {sum}, not a log-distribution"
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperature {} must be positive and finite",
                self.temperature
            )));
        }
        // epsilon = 0 is permitted so the exactness checks can run the pure
        // Bayes product; negative values are rejected.
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "epsilon {} must be finite and >= 0",
                self.epsilon
            )));
        }
        if self.omega < 0.0 || !self.omega.is_finite() {
            return Err(Error::InvalidInput(format!(
                "omega {} must be finite and >= 0",
                self.omega
            )));
        }
        Ok(())
    }
}

/// `softmax(audio_log_probs / T + omega * ln(prior + eps))`.
///
/// With `omega = 0` and `T = 1` this recovers `exp(audio_log_probs)`
/// exactly; the prior term is skipped entirely at `omega = 0` so a zero
/// prior entry with `eps = 0` cannot poison the result.
pub fn fuse(inp: &FusionInputs) -> Result<CategoricalDistribution> {
    inp.validate()?;
    let scores: Vec<f64> = inp
        .audio_log_probs
        .scores()
        .iter()
        .zip(inp.prior.probs())
        .map(|(&a, &p)| {
            let mut s = a / inp.temperature;
            if inp.omega > 0.0 {
                s += inp.omega * (p + inp.epsilon).ln();
            }
            s
        })
        .collect();
    softmax_lenient(&scores)
}

/// Gradients of the cross-entropy loss `-ln p_fused(label)` with respect to
/// the fusion operands.
#[derive(Debug, Clone)]
pub struct FusionGradients {
    pub d_audio_log_probs: Vec<f64>,
    pub d_omega: f64,
    pub d_temperature: f64,
    pub d_epsilon: f64,
    pub fused: CategoricalDistribution,
}

/// Analytic softmax–cross-entropy gradients of the fusion rule.
pub fn fuse_gradients(inp: &FusionInputs, true_label: usize) -> Result<FusionGradients> {
    let c = inp.prior.n_classes();
    if true_label >= c {
        return Err(Error::InvalidInput(format!(
            "label {true_label} out of range for {c} classes"
        )));
    }
    let fused = fuse(inp)?;
    let t = inp.temperature;
    let mut d_audio = vec![0.0; c];
    let mut d_omega = 0.0;
    let mut d_temp = 0.0;
    let mut d_eps = 0.0;
    for y in 0..c {
        let diff = fused.probs()[y] - if y == true_label { 1.0 } else { 0.0 };
        let a = inp.audio_log_probs.scores()[y];
        let pe = inp.prior.probs()[y] + inp.epsilon;
        d_audio[y] = diff / t;
        d_omega += diff * pe.ln();
        d_temp -= diff * a / (t * t);
        d_eps += inp.omega * diff / pe;
    }
    Ok(FusionGradients {
        d_audio_log_probs: d_audio,
        d_omega,
        d_temperature: d_temp,
        d_epsilon: d_eps,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn log_probs(p: &[f64]) -> LogScoreVector {
        LogScoreVector::new(p.iter().map(|&x| x.ln()).collect()).unwrap()
    }

    fn random_distribution(rng: &mut ChaCha8Rng, c: usize) -> CategoricalDistribution {
        let scores: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
        crate::dist::softmax_lenient(&scores).unwrap()
    }

    #[test]
    fn recoverability_example() {
        let inp = FusionInputs {
            audio_log_probs: log_probs(&[0.7, 0.3]),
            prior: CategoricalDistribution::new(vec![0.1, 0.9]).unwrap(),
            omega: 0.0,
            temperature: 1.0,
            epsilon: 1e-6,
        };
        let p = fuse(&inp).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(p.probs()[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn product_renormalize_by_hand() {
        // audio=[0.7,0.3], prior=[0.9,0.1], omega=1, T=1, eps=0
        // -> [0.63, 0.03] / 0.66
        let inp = FusionInputs {
            audio_log_probs: log_probs(&[0.7, 0.3]),
            prior: CategoricalDistribution::new(vec![0.9, 0.1]).unwrap(),
            omega: 1.0,
            temperature: 1.0,
            epsilon: 0.0,
        };
        let p = fuse(&inp).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 0.63 / 0.66, epsilon = 1e-12);
        assert_abs_diff_eq!(p.probs()[1], 0.03 / 0.66, epsilon = 1e-12);
    }

    #[test]
    fn uniform_prior_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let audio = random_distribution(&mut rng, 6);
            let alp = log_probs(audio.probs());
            let omega = rng.gen_range(0.0..5.0);
            let inp = FusionInputs {
                audio_log_probs: alp.clone(),
                prior: CategoricalDistribution::uniform(6).unwrap(),
                omega,
                temperature: 1.0,
                epsilon: 0.0,
            };
            let fused = fuse(&inp).unwrap();
            for (f, a) in fused.probs().iter().zip(audio.probs()) {
                assert_abs_diff_eq!(f, a, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn invalid_scalars_rejected() {
        let inp = FusionInputs {
            audio_log_probs: log_probs(&[0.5, 0.5]),
            prior: CategoricalDistribution::uniform(2).unwrap(),
            omega: 1.0,
            temperature: 0.0,
            epsilon: 1e-6,
        };
        assert!(fuse(&inp).is_err());
        let inp2 = FusionInputs {
            temperature: 1.0,
            epsilon: -1e-9,
            ..inp.clone()
        };
        assert!(fuse(&inp2).is_err());
        let inp3 = FusionInputs {
            temperature: 1.0,
            epsilon: 0.0,
            omega: -0.5,
            ..inp
        };
        assert!(fuse(&inp3).is_err());
    }

    #[test]
    fn gradients_vanish_at_one_hot() {
        // audio essentially one-hot on the true label; fused follows
        let audio = CategoricalDistribution::new(vec![1.0 - 2e-13, 1e-13, 1e-13]).unwrap();
        let inp = FusionInputs {
            audio_log_probs: log_probs(audio.probs()),
            prior: CategoricalDistribution::one_hot(3, 0).unwrap(),
            omega: 1.0,
            temperature: 1.0,
            epsilon: 1e-3,
        };
        let g = fuse_gradients(&inp, 0).unwrap();
        assert!(g.d_omega.abs() < 1e-10);
        assert!(g.d_temperature.abs() < 1e-10);
        assert!(g.d_audio_log_probs.iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn uniform_prior_zero_omega_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let audio = random_distribution(&mut rng, 4);
        let inp = FusionInputs {
            audio_log_probs: log_probs(audio.probs()),
            prior: CategoricalDistribution::uniform(4).unwrap(),
            omega: 0.7,
            temperature: 1.0,
            epsilon: 0.0,
        };
        let g = fuse_gradients(&inp, 2).unwrap();
        // constant prior term: d_omega = ln(1/C) * (sum p_fused - 1) = 0
        assert_abs_diff_eq!(g.d_omega, 0.0, epsilon = 1e-12);
    }

    /// Finite-difference oracle for all fusion gradients.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let step = 1e-6;
        for _ in 0..30 {
            let c = rng.gen_range(3..8);
            let audio = random_distribution(&mut rng, c);
            let prior = random_distribution(&mut rng, c);
            let base = FusionInputs {
                audio_log_probs: log_probs(audio.probs()),
                prior,
                omega: rng.gen_range(0.05..3.0),
                temperature: rng.gen_range(0.3..3.0),
                epsilon: rng.gen_range(1e-6..1e-2),
            };
            let label = rng.gen_range(0..c);
            let g = fuse_gradients(&base, label).unwrap();
            let loss =
                |inp: &FusionInputs| -> f64 { -(fuse(inp).unwrap().probs()[label].max(1e-300)).ln() };

            let check = |analytic: f64, plus: f64, minus: f64, name: &str| {
                let fd = (plus - minus) / (2.0 * step);
                // the 1e-5 floor keeps round-off noise in near-zero
                // gradients from dominating the relative comparison
                let denom = analytic.abs().max(fd.abs()).max(1e-5);
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "{name}: analytic {analytic} vs fd {fd}"
                );
            };

            let mut p = base.clone();
            p.omega += step;
            let mut m = base.clone();
            m.omega -= step;
            check(g.d_omega, loss(&p), loss(&m), "omega");

            let mut p = base.clone();
            p.temperature += step;
            let mut m = base.clone();
            m.temperature -= step;
            check(g.d_temperature, loss(&p), loss(&m), "temperature");

            let mut p = base.clone();
            p.epsilon += step * 1e-2;
            let mut m = base.clone();
            m.epsilon -= step * 1e-2;
            let fd = (loss(&p) - loss(&m)) / (2.0 * step * 1e-2);
            let denom = g.d_epsilon.abs().max(fd.abs()).max(1e-8);
            assert!((g.d_epsilon - fd).abs() / denom < 1e-4);

            // audio log-prob gradients: perturb one coordinate. This moves
            // exp(a) off the simplex slightly, which validate() tolerates.
            for k in 0..c {
                let mut sp = base.audio_log_probs.scores().to_vec();
                sp[k] += step;
                let mut sm = base.audio_log_probs.scores().to_vec();
                sm[k] -= step;
                let p = FusionInputs {
                    audio_log_probs: LogScoreVector::new(sp).unwrap(),
                    ..base.clone()
                };
                let m = FusionInputs {
                    audio_log_probs: LogScoreVector::new(sm).unwrap(),
                    ..base.clone()
                };
                check(g.d_audio_log_probs[k], loss(&p), loss(&m), "audio");
            }
        }
    }

    proptest! {
        /// Recoverability: omega=0, T=1 reproduces the audio distribution.
        #[test]
        fn recoverability(scores in proptest::collection::vec(-6.0f64..6.0, 2..20)) {
            let audio = crate::dist::softmax_lenient(&scores).unwrap();
            let c = audio.n_classes();
            let inp = FusionInputs {
                audio_log_probs: log_probs(audio.probs()),
                prior: CategoricalDistribution::uniform(c).unwrap(),
                omega: 0.0,
                temperature: 1.0,
                epsilon: 1e-6,
            };
            let fused = fuse(&inp).unwrap();
            for (f, a) in fused.probs().iter().zip(audio.probs()) {
                prop_assert!((f - a).abs() < 1e-9);
            }
        }

        /// Per-entry log-score shift from the prior is bounded by
        /// omega * |ln eps|.
        #[test]
        fn bounded_influence(
            a in proptest::collection::vec(-4.0f64..4.0, 4),
            b in proptest::collection::vec(-4.0f64..4.0, 4),
            omega in 0.0f64..5.0,
        ) {
            let prior = crate::dist::softmax_lenient(&b).unwrap();
            let _audio = crate::dist::softmax_lenient(&a).unwrap();
            let eps = 1e-4f64;
            let bound = omega * eps.ln().abs();
            for &p in prior.probs() {
                let shift = omega * (p + eps).ln();
                prop_assert!(shift.abs() <= bound + 1e-12);
            }
        }

        /// Fused log-odds between any two classes are affine in omega:
        /// three-point collinearity.
        #[test]
        fn log_odds_affine_in_omega(
            a in proptest::collection::vec(-4.0f64..4.0, 5),
            b in proptest::collection::vec(-4.0f64..4.0, 5),
        ) {
            let audio = crate::dist::softmax_lenient(&a).unwrap();
            let prior = crate::dist::softmax_lenient(&b).unwrap();
            let fused_at = |omega: f64| {
                fuse(&FusionInputs {
                    audio_log_probs: log_probs(audio.probs()),
                    prior: prior.clone(),
                    omega,
                    temperature: 1.0,
                    epsilon: 1e-5,
                })
                .unwrap()
            };
            let (p0, p1, p2) = (fused_at(0.0), fused_at(1.0), fused_at(2.0));
            let lo = |p: &CategoricalDistribution| (p.probs()[0] / p.probs()[1]).ln();
            // midpoint of the omega endpoints must match omega = 1
            prop_assert!(((lo(&p0) + lo(&p2)) / 2.0 - lo(&p1)).abs() < 1e-9);
        }

        /// Agreement sharpening: shared argmax implies the fused max
        /// probability is at least the audio max probability.
        #[test]
        fn agreement_sharpening(
            a in proptest::collection::vec(-4.0f64..4.0, 4),
            b in proptest::collection::vec(-4.0f64..4.0, 4),
            omega in 0.0f64..4.0,
        ) {
            let audio = crate::dist::softmax_lenient(&a).unwrap();
            let prior = crate::dist::softmax_lenient(&b).unwrap();
            prop_assume!(audio.argmax() == prior.argmax());
            let fused = fuse(&FusionInputs {
                audio_log_probs: log_probs(audio.probs()),
                prior: prior.clone(),
                omega,
                temperature: 1.0,
                epsilon: 0.0,
            })
            .unwrap();
            let (a_max, _) = crate::dist::top2_stats(&audio);
            let (f_max, _) = crate::dist::top2_stats(&fused);
            prop_assert!(f_max >= a_max - 1e-12);
        }
    }
}
