//! QoS-based proportional-fairness baseline with a fixed UL/DL split.
//!
//! Every cell splits its RBs into a UL part and a DL part, identical across
//! the network, so UL and DL never share spectrum and all cross-link
//! interference vanishes. Within each part RBs are handed out one at a time
//! to the link with the largest marginal gain of QoS satisfaction relative
//! to what it already has.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interference::{spectral_efficiency, Allocation, LinkSystem};
use crate::model::CouplingModel;
use crate::optimizer::InitialPsd;

/// Smoothing constant in the PF metric.
pub const EPS_PF: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub ul_rbs: usize,
    pub dl_rbs: usize,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            ul_rbs: 9,
            dl_rbs: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfAllocation {
    pub allocation: Allocation,
    pub lambda_ul: f64,
    pub lambda_dl: f64,
    /// RBs assigned to every link.
    pub rbs: Vec<usize>,
    pub split: Split,
}

impl PfAllocation {
    pub fn min_direction(&self) -> f64 {
        self.lambda_ul.min(self.lambda_dl)
    }
}

/// Coupling with all UL↔DL entries removed.
fn split_band_coupling(c: &CouplingModel, k: usize) -> CouplingModel {
    let mut out = c.clone();
    for r in 0..2 * k {
        for col in 0..2 * k {
            if (r < k) != (col < k) {
                out.v_tilde[(r, col)] = 0.0;
            }
        }
    }
    out
}

/// Greedy PF assignment of `budget` RBs over `links` with per-RB QoS gains
/// `gain[l]`. Ties go to the lowest link index.
fn assign(links: &[usize], gain: &DVector<f64>, budget: usize, rbs: &mut [usize]) {
    for &l in links {
        rbs[l] = 0;
    }
    for _ in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for &l in links {
            let have = rbs[l] as f64 * gain[l];
            let metric = gain[l] / (have + EPS_PF);
            if best.is_none_or(|(_, m)| metric > m) {
                best = Some((l, metric));
            }
        }
        match best {
            Some((l, _)) => rbs[l] += 1,
            None => return,
        }
    }
}

/// Runs `rounds` assignment passes; each pass re-evaluates SINRs under the
/// interference produced by the previous pass, starting from an even split.
pub fn pf_allocate(
    sys: &LinkSystem,
    split: Split,
    psd: &InitialPsd,
    rounds: usize,
) -> Result<PfAllocation> {
    let w0 = sys.rb_count;
    if split.ul_rbs + split.dl_rbs != w0 {
        return Err(Error::Config(format!(
            "PF split {}:{} does not add up to {w0} RBs",
            split.ul_rbs, split.dl_rbs
        )));
    }
    if rounds == 0 {
        return Err(Error::Config("PF needs at least one round".into()));
    }
    let k = sys.ue_count();
    let n = sys.bs_count();
    let coupling = split_band_coupling(&sys.coupling, k);
    let p = psd.per_link(sys);

    let mut cells: Vec<(Vec<usize>, usize)> = Vec::with_capacity(2 * n);
    for b in 0..n {
        let ul: Vec<usize> = (0..k).filter(|&j| sys.assoc.serving_ul()[j] == b).collect();
        let dl: Vec<usize> = (0..k)
            .filter(|&i| sys.assoc.serving_dl()[i] == b)
            .map(|i| k + i)
            .collect();
        cells.push((ul, split.ul_rbs));
        cells.push((dl, split.dl_rbs));
    }

    let mut w = DVector::zeros(2 * k);
    for (links, budget) in &cells {
        for &l in links {
            w[l] = *budget as f64 / (links.len() as f64 * w0 as f64);
        }
    }
    let mut rbs = vec![0usize; 2 * k];
    for _ in 0..rounds {
        let sinr = crate::interference::sinr(&p, &w, &coupling);
        let r = spectral_efficiency(&sinr, sys.rb_bandwidth);
        let gain = r.component_div(&sys.demands);
        for (links, budget) in &cells {
            assign(links, &gain, *budget, &mut rbs);
        }
        w = DVector::from_iterator(2 * k, rbs.iter().map(|&c| c as f64 / w0 as f64));
    }

    let sinr = crate::interference::sinr(&p, &w, &coupling);
    let r = spectral_efficiency(&sinr, sys.rb_bandwidth);
    let q = DVector::from_fn(2 * k, |l, _| w0 as f64 * w[l] * r[l] / sys.demands[l]);
    let lambda_ul = q.rows(0, k).min();
    let lambda_dl = q.rows(k, k).min();
    Ok(PfAllocation {
        allocation: Allocation {
            w,
            p,
            p_bar: None,
            lambda: lambda_ul.min(lambda_dl),
        },
        lambda_ul,
        lambda_dl,
        rbs,
        split,
    })
}
