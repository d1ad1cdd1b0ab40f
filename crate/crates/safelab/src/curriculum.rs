//! Curriculum schedules: which data mixture is active at each point of the
//! token budget, and exact accounting of what was actually consumed.
//!
//! The canonical experiments use two-phase schedules — safe-only data first,
//! then the intervention mixture starting at `floor(fraction * budget)` tokens.
//! Fraction 0 is "interventions from the start", fraction 1 is pure filtering
//! (interventions never activate).

use crate::corpus::Source;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub type Mixture = BTreeMap<Source, f64>;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CurriculumError {
    #[error("intervention start fraction {0} outside [0,1]")]
    InvalidFraction(f64),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("tokens_seen {seen} exceeds budget {budget}")]
    OutOfBudget { seen: u64, budget: u64 },
}

/// One contiguous span of training with a fixed mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// Fraction of the token budget at which this phase begins.
    pub start_fraction: f64,
    pub mixture: Mixture,
    pub interventions_active: bool,
}

/// Ordered phases over a total token budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub total_token_budget: u64,
    pub phases: Vec<Phase>,
    pub intervention_start_fraction: f64,
}

fn validate_mixture(mixture: &Mixture) -> Result<(), CurriculumError> {
    if mixture.is_empty() {
        return Err(CurriculumError::InvalidMixture("no sources".into()));
    }
    let mut sum = 0.0;
    for (src, &w) in mixture {
        if !(w.is_finite() && w >= 0.0) {
            return Err(CurriculumError::InvalidMixture(format!(
                "weight {w} for {src} is negative or non-finite"
            )));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(CurriculumError::InvalidMixture(format!(
            "weights sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Build the canonical schedule: safe-only until `fraction` of the budget, the
/// intervention mixture afterwards. Fractions 0 and 1 degenerate to a single
/// phase.
pub fn make_schedule(
    intervention_start_fraction: f64,
    total_token_budget: u64,
    safe_mixture: &Mixture,
    intervention_mixture: &Mixture,
) -> Result<CurriculumSchedule, CurriculumError> {
    if !(0.0..=1.0).contains(&intervention_start_fraction)
        || !intervention_start_fraction.is_finite()
    {
        return Err(CurriculumError::InvalidFraction(intervention_start_fraction));
    }
    if total_token_budget == 0 {
        return Err(CurriculumError::InvalidMixture("token budget must be > 0".into()));
    }
    validate_mixture(safe_mixture)?;
    validate_mixture(intervention_mixture)?;

    let phases = if intervention_start_fraction == 0.0 {
        vec![Phase {
            start_fraction: 0.0,
            mixture: intervention_mixture.clone(),
            interventions_active: true,
        }]
    } else if intervention_start_fraction == 1.0 {
        vec![Phase {
            start_fraction: 0.0,
            mixture: safe_mixture.clone(),
            interventions_active: false,
        }]
    } else {
        vec![
            Phase {
                start_fraction: 0.0,
                mixture: safe_mixture.clone(),
                interventions_active: false,
            },
            Phase {
                start_fraction: intervention_start_fraction,
                mixture: intervention_mixture.clone(),
                interventions_active: true,
            },
        ]
    };
    Ok(CurriculumSchedule {
        total_token_budget,
        phases,
        intervention_start_fraction,
    })
}

impl CurriculumSchedule {
    /// Token count at which phase `idx` begins.
    pub fn phase_start_tokens(&self, idx: usize) -> u64 {
        (self.phases[idx].start_fraction * self.total_token_budget as f64).floor() as u64
    }

    /// Index of the phase containing `tokens_seen`. A boundary token belongs
    /// to the later phase.
    pub fn phase_index_at(&self, tokens_seen: u64) -> Result<usize, CurriculumError> {
        if tokens_seen > self.total_token_budget {
            return Err(CurriculumError::OutOfBudget {
                seen: tokens_seen,
                budget: self.total_token_budget,
            });
        }
        let mut idx = 0;
        for i in 0..self.phases.len() {
            if tokens_seen >= self.phase_start_tokens(i) {
                idx = i;
            }
        }
        Ok(idx)
    }

    /// The phase active at `tokens_seen`.
    pub fn phase_at(&self, tokens_seen: u64) -> Result<&Phase, CurriculumError> {
        Ok(&self.phases[self.phase_index_at(tokens_seen)?])
    }
}

/// Draw a source from the phase mixture. Zero-weight sources are never drawn.
pub fn sample_source<R: Rng>(phase: &Phase, rng: &mut R) -> Source {
    let total: f64 = phase.mixture.values().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for (&src, &w) in &phase.mixture {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return src;
        }
        u -= w;
        last = Some(src);
    }
    // Rounding can push u past the final positive weight.
    last.expect("mixture validated to contain a positive weight")
}

/// One consumed block, as logged by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRecord {
    /// Trainer's tokens_seen counter before this block was consumed.
    pub tokens_seen: u64,
    pub phase: usize,
    pub source: Source,
    pub block_len: u64,
}

/// Exact per-phase per-source token totals from a run log.
pub fn accounting(records: &[BlockRecord]) -> BTreeMap<(usize, Source), u64> {
    let mut totals = BTreeMap::new();
    for r in records {
        *totals.entry((r.phase, r.source)).or_insert(0) += r.block_len;
    }
    totals
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mix(pairs: &[(Source, f64)]) -> Mixture {
        pairs.iter().copied().collect()
    }

    fn web_only() -> Mixture {
        mix(&[(Source::Web, 1.0)])
    }

    fn intervention_mix() -> Mixture {
        mix(&[
            (Source::Web, 0.6),
            (Source::SafewebRephrased, 0.2),
            (Source::RefusewebPair, 0.2),
        ])
    }

    #[test]
    fn fraction_point_two_boundary_arithmetic() {
        let s = make_schedule(0.2, 600_000_000_000, &web_only(), &intervention_mix()).unwrap();
        assert_eq!(s.phases.len(), 2);
        assert_eq!(s.phase_start_tokens(1), 120_000_000_000);
    }

    #[test]
    fn fraction_zero_single_active_phase() {
        let s = make_schedule(0.0, 1000, &web_only(), &intervention_mix()).unwrap();
        assert_eq!(s.phases.len(), 1);
        assert!(s.phases[0].interventions_active);
        assert!(s.phase_at(0).unwrap().interventions_active);
    }

    #[test]
    fn fraction_one_interventions_never_active() {
        let s = make_schedule(1.0, 1000, &web_only(), &intervention_mix()).unwrap();
        assert_eq!(s.phases.len(), 1);
        assert!(!s.phases[0].interventions_active);
        assert!(!s.phase_at(1000).unwrap().interventions_active);
    }

    #[test]
    fn boundary_token_belongs_to_later_phase() {
        let s = make_schedule(0.2, 1000, &web_only(), &intervention_mix()).unwrap();
        assert_eq!(s.phase_index_at(199).unwrap(), 0);
        assert_eq!(s.phase_index_at(200).unwrap(), 1);
        assert!(matches!(
            s.phase_index_at(1001),
            Err(CurriculumError::OutOfBudget { .. })
        ));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(matches!(
            make_schedule(1.5, 1000, &web_only(), &intervention_mix()),
            Err(CurriculumError::InvalidFraction(_))
        ));
        let bad = mix(&[(Source::Web, 0.5)]);
        assert!(matches!(
            make_schedule(0.2, 1000, &bad, &intervention_mix()),
            Err(CurriculumError::InvalidMixture(_))
        ));
        let negative = mix(&[(Source::Web, 1.5), (Source::Math, -0.5)]);
        assert!(matches!(
            make_schedule(0.2, 1000, &web_only(), &negative),
            Err(CurriculumError::InvalidMixture(_))
        ));
    }

    #[test]
    fn every_token_maps_to_exactly_one_phase() {
        let s = make_schedule(0.37, 997, &web_only(), &intervention_mix()).unwrap();
        let boundary = s.phase_start_tokens(1);
        for t in 0..=997 {
            let idx = s.phase_index_at(t).unwrap();
            assert_eq!(idx, usize::from(t >= boundary));
        }
    }

    #[test]
    fn degenerate_mixture_always_web() {
        let s = make_schedule(0.0, 100, &web_only(), &web_only()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_source(&s.phases[0], &mut rng), Source::Web);
        }
    }

    #[test]
    fn zero_weight_source_never_drawn() {
        let phase = Phase {
            start_fraction: 0.0,
            mixture: mix(&[(Source::Web, 1.0), (Source::Math, 0.0)]),
            interventions_active: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            assert_eq!(sample_source(&phase, &mut rng), Source::Web);
        }
    }

    #[test]
    fn sample_frequencies_within_three_sigma() {
        // Binomial bound: n=1e5, p=0.5 → sigma = sqrt(n p (1-p)) ≈ 158.1
        let phase = Phase {
            start_fraction: 0.0,
            mixture: mix(&[(Source::Web, 0.5), (Source::RefusewebPair, 0.5)]),
            interventions_active: true,
        };
        let n = 100_000u32;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut web = 0u32;
        for _ in 0..n {
            if sample_source(&phase, &mut rng) == Source::Web {
                web += 1;
            }
        }
        let sigma = (n as f64 * 0.25).sqrt();
        let dev = (web as f64 - n as f64 * 0.5).abs();
        assert!(dev <= 3.0 * sigma, "web count {web} deviates {dev:.1} > 3σ ({sigma:.1})");
    }

    #[test]
    fn accounting_totals() {
        assert!(accounting(&[]).is_empty());
        let records = vec![
            BlockRecord { tokens_seen: 0, phase: 0, source: Source::Web, block_len: 512 },
            BlockRecord { tokens_seen: 512, phase: 0, source: Source::Web, block_len: 512 },
            BlockRecord { tokens_seen: 1024, phase: 1, source: Source::RefusewebPair, block_len: 512 },
        ];
        let totals = accounting(&records);
        assert_eq!(totals[&(0, Source::Web)], 1024);
        assert_eq!(totals[&(1, Source::RefusewebPair)], 512);
        let sum: u64 = totals.values().sum();
        assert_eq!(sum, records.iter().map(|r| r.block_len).sum::<u64>());
    }
}
