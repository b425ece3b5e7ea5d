//! Monte Carlo campaigns over random scenarios: policy sweep under full and
//! partial UL/DL overlap, plus the PF baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;

use crate::association::{associate, policy_sweep, Policy};
use crate::error::{Error, Result};
use crate::interference::LinkSystem;
use crate::model::{OverlapModel, OverlapScheme, Scenario};
use crate::optimizer::{optimize_estimated_overlap, solve, SolveOptions};
use crate::pf::{pf_allocate, Split};
use crate::scenario::{generate, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSettings {
    pub solve: SolveOptions,
    /// Overlap scheme of the partial-overlap re-solve; `None` skips it.
    pub partial: OverlapScheme,
    pub pf_split: Split,
    pub pf_rounds: usize,
    /// Policies compared against PF.
    pub pf_policies: Vec<Policy>,
}

impl Default for CampaignSettings {
    fn default() -> Self {
        Self {
            solve: SolveOptions {
                record_trace: false,
                ..Default::default()
            },
            partial: OverlapScheme::CellPairwise,
            pf_split: Split::default(),
            pf_rounds: 3,
            pf_policies: vec![Policy::Coud, Policy::DeudP],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub policy: Policy,
    pub lambda_full: f64,
    /// NaN when the partial-overlap solve is disabled.
    pub lambda_partial: f64,
    pub lambda_ul: f64,
    pub lambda_dl: f64,
    pub g1: f64,
    pub g2: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfOutcome {
    pub policy: Policy,
    pub pf_lambda_ul: f64,
    pub pf_lambda_dl: f64,
    pub opt_lambda_ul: f64,
    pub opt_lambda_dl: f64,
}

impl PfOutcome {
    pub fn optimizer_wins(&self) -> bool {
        self.opt_lambda_ul.min(self.opt_lambda_dl) > self.pf_lambda_ul.min(self.pf_lambda_dl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub policies: Vec<PolicyOutcome>,
    pub pf: Vec<PfOutcome>,
}

/// Full-overlap solve, then a re-solve with overlap factors estimated from
/// the loads of the first solution.
pub fn evaluate_policy(
    scenario: &Scenario,
    policy: &Policy,
    settings: &CampaignSettings,
) -> Result<PolicyOutcome> {
    let (full, lambda_partial, partial_converged) = if settings.partial == OverlapScheme::None {
        let assoc = associate(policy, scenario);
        let (sys, _) = LinkSystem::new(scenario, &assoc, &OverlapModel::none())?;
        (solve(&sys, &settings.solve)?, f64::NAN, true)
    } else {
        let (full, partial, _) =
            optimize_estimated_overlap(policy, scenario, settings.partial, &settings.solve)?;
        (full, partial.lambda, partial.converged)
    };
    Ok(PolicyOutcome {
        policy: *policy,
        lambda_full: full.lambda,
        lambda_partial,
        lambda_ul: full.lambda_ul,
        lambda_dl: full.lambda_dl,
        g1: full.g1,
        g2: full.g2,
        converged: full.converged && partial_converged,
    })
}

pub fn run_trial(
    config: &ScenarioConfig,
    trial: usize,
    seed: u64,
    settings: &CampaignSettings,
) -> Result<TrialResult> {
    let scenario = generate(config, seed)?;
    let policies = policy_sweep()
        .iter()
        .map(|p| evaluate_policy(&scenario, p, settings))
        .collect::<Result<Vec<_>>>()?;
    let pf = settings
        .pf_policies
        .iter()
        .map(|policy| {
            let assoc = associate(policy, &scenario);
            let (sys, _) = LinkSystem::new(&scenario, &assoc, &OverlapModel::none())?;
            let opt = solve(&sys, &settings.solve)?;
            let base = pf_allocate(
                &sys,
                settings.pf_split,
                &settings.solve.initial_psd,
                settings.pf_rounds,
            )?;
            Ok(PfOutcome {
                policy: *policy,
                pf_lambda_ul: base.lambda_ul,
                pf_lambda_dl: base.lambda_dl,
                opt_lambda_ul: opt.lambda_ul,
                opt_lambda_dl: opt.lambda_dl,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialResult {
        trial,
        seed,
        policies,
        pf,
    })
}

/// Mean with the half-width of its two-sided 95% Student-t interval (NaN for
/// fewer than two samples).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
}

pub fn mean_ci(samples: &[f64]) -> MeanCi {
    let n = samples.len();
    let mean = samples.iter().mean();
    if n < 2 {
        return MeanCi {
            mean,
            half_width: f64::NAN,
        };
    }
    let sd = samples.iter().std_dev();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    MeanCi {
        mean,
        half_width: t * sd / (n as f64).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub policy: Policy,
    pub full: MeanCi,
    pub partial: MeanCi,
    /// Share of trials in which the policy is among the three best.
    pub top3_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfStats {
    pub policy: Policy,
    pub pf_ul: MeanCi,
    pub pf_dl: MeanCi,
    pub opt_ul: MeanCi,
    pub opt_dl: MeanCi,
    /// Share of trials where the optimizer's min-direction level beats PF's.
    pub win_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub trials: usize,
    pub seed_base: u64,
    pub policies: Vec<PolicyStats>,
    /// Offset policy with the largest mean full-overlap utility.
    pub best_policy: Policy,
    /// Mean utility of `best_policy` over that of CoUD.
    pub best_over_coud: f64,
    /// Mean partial-overlap over mean full-overlap utility of `best_policy`.
    pub partial_over_full: f64,
    pub pf: Vec<PfStats>,
    pub non_converged: usize,
}

pub fn summarize(results: &[TrialResult], seed_base: u64) -> Result<CampaignSummary> {
    let first = results
        .first()
        .ok_or_else(|| Error::Config("campaign has no trials".into()))?;
    let t = results.len() as f64;
    let np = first.policies.len();
    let column = |i: usize, get: fn(&PolicyOutcome) -> f64| -> Vec<f64> {
        results.iter().map(|r| get(&r.policies[i])).collect()
    };
    let mut top3 = vec![0usize; np];
    for r in results {
        let mut order: Vec<usize> = (0..np).collect();
        order.sort_by(|&a, &b| {
            r.policies[b]
                .lambda_full
                .total_cmp(&r.policies[a].lambda_full)
        });
        for &i in order.iter().take(3) {
            top3[i] += 1;
        }
    }
    let policies: Vec<PolicyStats> = (0..np)
        .map(|i| PolicyStats {
            policy: first.policies[i].policy,
            full: mean_ci(&column(i, |o| o.lambda_full)),
            partial: mean_ci(&column(i, |o| o.lambda_partial)),
            top3_share: top3[i] as f64 / t,
        })
        .collect();
    let best = (0..np)
        .max_by(|&a, &b| policies[a].full.mean.total_cmp(&policies[b].full.mean))
        .expect("non-empty sweep");
    let coud = policies
        .iter()
        .position(|s| s.policy.equivalent_tag() == Some("coud"))
        .ok_or_else(|| Error::Config("policy sweep lacks the zero offset".into()))?;
    let pf = (0..first.pf.len())
        .map(|i| {
            let col = |get: fn(&PfOutcome) -> f64| -> Vec<f64> {
                results.iter().map(|r| get(&r.pf[i])).collect()
            };
            PfStats {
                policy: first.pf[i].policy,
                pf_ul: mean_ci(&col(|o| o.pf_lambda_ul)),
                pf_dl: mean_ci(&col(|o| o.pf_lambda_dl)),
                opt_ul: mean_ci(&col(|o| o.opt_lambda_ul)),
                opt_dl: mean_ci(&col(|o| o.opt_lambda_dl)),
                win_share: results.iter().filter(|r| r.pf[i].optimizer_wins()).count() as f64 / t,
            }
        })
        .collect();
    Ok(CampaignSummary {
        trials: results.len(),
        seed_base,
        best_policy: policies[best].policy,
        best_over_coud: policies[best].full.mean / policies[coud].full.mean,
        partial_over_full: policies[best].partial.mean / policies[best].full.mean,
        policies,
        pf,
        non_converged: results
            .iter()
            .filter(|r| r.policies.iter().any(|p| !p.converged))
            .count(),
    })
}

/// Runs `trials` trials with seeds `seed_base + trial`, in parallel on
/// `workers` threads (rayon's default when `None`). Results come back in
/// trial order regardless of scheduling.
pub fn run_campaign(
    config: &ScenarioConfig,
    trials: usize,
    seed_base: u64,
    settings: &CampaignSettings,
    workers: Option<usize>,
) -> Result<Vec<TrialResult>> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|i| run_trial(config, i, seed_base.wrapping_add(i as u64), settings))
            .collect()
    })
}
