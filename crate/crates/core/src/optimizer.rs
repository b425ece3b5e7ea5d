//! The three-step joint bandwidth/power optimizer.
//!
//! * S1 finds the minimal bandwidth allocation maximizing the utility for a
//!   fixed PSD.
//! * S2 scales the PSD down while the power budget binds and free RBs
//!   remain, re-running S1 after each scaling.
//! * S3 re-optimizes the PSD for the fixed bandwidth when the band is full
//!   but some transmitter still has power headroom.
//!
//! Every iterate recorded in the trace is a feasible allocation, and its
//! utility `λ = min_l W0 w_l r_l / d_l` never decreases along the run.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use std::fmt;

use crate::association::{associate, Policy};
use crate::error::{Error, Result};
use crate::interference::{Allocation, LinkSystem};
use crate::model::{Direction, OverlapModel, OverlapScheme, Scenario};
use crate::scenario::{estimate_overlap, LoadSnapshot};
use crate::sif::{
    normalized_fixed_point_observed, yates_iteration, FnNorm, FnSif, MonotoneHomogeneous, SifMap,
};
use crate::units::dbm_to_watts;

/// Floor applied to bandwidth shares before power control divides by them.
pub const MIN_SHARE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    #[default]
    PerLink,
    /// One DL PSD per cell, per-UE PSD in UL.
    CellSpecific,
}

/// Open-loop initial PSD: `min{PSD_max, SNR_tar + P_noise + α PL}` in dBm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialPsd {
    pub psd_max_dbm: f64,
    pub snr_target_db: f64,
    pub noise_dbm: f64,
    pub alpha: f64,
}

impl Default for InitialPsd {
    fn default() -> Self {
        Self {
            psd_max_dbm: 12.0,
            snr_target_db: 12.2,
            noise_dbm: -121.45,
            alpha: 1.0,
        }
    }
}

impl InitialPsd {
    /// Per-link PSD in watts per RB from the direct gains.
    pub fn per_link(&self, sys: &LinkSystem) -> DVector<f64> {
        sys.coupling.d_diag.map(|gain| {
            let pl = -10.0 * gain.log10();
            dbm_to_watts(
                self.psd_max_dbm
                    .min(self.snr_target_db + self.noise_dbm + self.alpha * pl),
            )
        })
    }

    /// Per-transmitter PSD `[p^UL ; q^DL]`: each cell takes the largest
    /// per-link value among its downlinks.
    pub fn per_transmitter(&self, sys: &LinkSystem) -> DVector<f64> {
        let k = sys.ue_count();
        let p = self.per_link(sys);
        let mut out = DVector::from_element(k + sys.bs_count(), f64::NEG_INFINITY);
        out.rows_mut(0, k).copy_from(&p.rows(0, k));
        for (i, &b) in sys.assoc.serving_dl().iter().enumerate() {
            out[k + b] = out[k + b].max(p[k + i]);
        }
        let cap = dbm_to_watts(self.psd_max_dbm);
        out.map(|v| if v.is_finite() { v } else { cap })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// ε1: relative λ gain below which the S2 loop stops.
    pub tol_outer: f64,
    /// ε2: bandwidth fixed-point tolerance.
    pub tol_w: f64,
    /// ε3: power fixed-point tolerance, relative to the PSD scale.
    pub tol_p: f64,
    pub max_iter: usize,
    pub max_alternations: usize,
    /// Distance from 1 below which a constraint counts as binding.
    pub tight_tol: f64,
    pub mode: PowerMode,
    /// Power-budget scale applied in S3: `g2 ≤ θ`.
    pub theta: f64,
    pub initial_psd: InitialPsd,
    pub record_trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol_outer: 1e-7,
            tol_w: 1e-7,
            tol_p: 1e-7,
            max_iter: crate::sif::DEFAULT_MAX_ITER,
            max_alternations: 500,
            tight_tol: 1e-6,
            mode: PowerMode::PerLink,
            theta: 1.0,
            initial_psd: InitialPsd::default(),
            record_trace: true,
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<()> {
        let positive = [
            self.tol_outer,
            self.tol_w,
            self.tol_p,
            self.tight_tol,
            self.theta,
        ];
        if positive.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "tolerances and theta must be positive".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }

    fn is_tight(&self, g: f64) -> bool {
        g >= 1.0 - self.tight_tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    S1,
    S2,
    S3,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub step: Step,
    pub lambda: f64,
    pub g1: f64,
    pub g2: f64,
    /// `‖x_t − x_{t−1}‖∞` of the running fixed point; NaN at its start.
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub rows: Vec<TraceRow>,
}

impl SolveTrace {
    pub const CSV_HEADER: &'static str = "iteration,step,lambda,g1,g2,residual";

    fn push(&mut self, step: Step, lambda: f64, g1: f64, g2: f64) {
        self.rows.push(TraceRow {
            iteration: self.rows.len(),
            step,
            lambda,
            g1,
            g2,
            residual: f64::NAN,
        });
    }

    fn set_residuals(&mut self, first: usize, residuals: impl Iterator<Item = f64>) {
        for (row, r) in self.rows[first + 1..].iter_mut().zip(residuals) {
            row.residual = r;
        }
    }

    /// Largest drop of λ between consecutive rows (0 if none).
    pub fn max_lambda_drop(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| w[0].lambda - w[1].lambda)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e}\n",
                r.iteration, r.step, r.lambda, r.g1, r.g2, r.residual
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub allocation: Allocation,
    pub lambda: f64,
    /// Minimum QoS satisfaction over uplinks and over downlinks.
    pub lambda_ul: f64,
    pub lambda_dl: f64,
    /// Last step executed.
    pub step: Step,
    pub g1: f64,
    pub g2: f64,
    pub converged: bool,
    pub mode: PowerMode,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
    #[serde(default)]
    pub overlap: OverlapScheme,
    #[serde(skip)]
    pub trace: SolveTrace,
}

fn min_ratio(x: &DVector<f64>, fx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(fx.iter())
        .map(|(a, b)| a / b)
        .fold(f64::INFINITY, f64::min)
}

/// Per-direction minima of the QoS satisfaction levels.
pub fn direction_minima(sys: &LinkSystem, w: &DVector<f64>, p: &DVector<f64>) -> (f64, f64) {
    let q = sys.qos_levels(w, p);
    let k = sys.ue_count();
    (q.rows(0, k).min(), q.rows(k, k).min())
}

/// Result of one S1 solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthUpdate {
    pub w: DVector<f64>,
    /// `1 / g(f(w′))` with `g = max{g1, g2}`.
    pub lambda: f64,
    pub g1: f64,
    pub g2: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// S1: normalized fixed point `w ← f_p(w) / max{g1, g2,p}(f_p(w))` from `w0`.
pub fn step1_update_bandwidth(
    sys: &LinkSystem,
    p: &DVector<f64>,
    w0: &DVector<f64>,
    opts: &SolveOptions,
    trace: &mut SolveTrace,
) -> Result<BandwidthUpdate> {
    bandwidth_fixed_point(sys, p, w0, opts, trace, Step::S1)
}

fn bandwidth_fixed_point(
    sys: &LinkSystem,
    p: &DVector<f64>,
    w0: &DVector<f64>,
    opts: &SolveOptions,
    trace: &mut SolveTrace,
    label: Step,
) -> Result<BandwidthUpdate> {
    if let Some(l) = p.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "bandwidth update needs positive PSD, p[{l}] = {}",
            p[l]
        )));
    }
    let n = sys.link_count();
    let f = FnSif::new(n, |w: &DVector<f64>| {
        sys.f_load(w, p).expect("PSD checked positive")
    });
    let g = FnNorm::new(n, |w: &DVector<f64>| sys.g1(w).max(sys.g2(w, p)));
    let first = trace.rows.len();
    let fp = normalized_fixed_point_observed(
        &f,
        &g,
        1.0,
        w0,
        opts.tol_w,
        opts.max_iter,
        &mut |_, w, fw| {
            if opts.record_trace {
                trace.push(label, min_ratio(w, fw), sys.g1(w), sys.g2(w, p));
            }
        },
    );
    if opts.record_trace {
        trace.set_residuals(first, fp.trace.iter().map(|t| t.residual));
    }
    if !fp.converged {
        log::warn!(
            "bandwidth update stopped after {} iterations (residual {:e})",
            fp.iterations,
            fp.residual
        );
    }
    Ok(BandwidthUpdate {
        lambda: fp
            .eigenvalue
            .expect("normalized iteration sets the eigenvalue"),
        g1: sys.g1(&fp.x_star),
        g2: sys.g2(&fp.x_star, p),
        iterations: fp.iterations,
        converged: fp.converged,
        w: fp.x_star,
    })
}

/// Result of the S2 loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerScaling {
    pub p: DVector<f64>,
    pub w: DVector<f64>,
    pub lambda: f64,
    /// Product of all scaling factors applied to the PSD.
    pub total_scale: f64,
    pub alternations: usize,
    pub converged: bool,
}

/// S2: alternate `p ← g1(w) p` with an S1 re-solve until the band is full.
///
/// Each re-solve starts from `w / g1(w)`, which is feasible for the scaled
/// PSD and no worse in utility, so λ never drops between alternations.
pub fn step2_power_scaling(
    sys: &LinkSystem,
    p0: &DVector<f64>,
    w0: &DVector<f64>,
    lambda0: f64,
    opts: &SolveOptions,
    trace: &mut SolveTrace,
) -> Result<PowerScaling> {
    let mut out = PowerScaling {
        p: p0.clone(),
        w: w0.clone(),
        lambda: lambda0,
        total_scale: 1.0,
        alternations: 0,
        converged: true,
    };
    let mut settled = false;
    while out.alternations < opts.max_alternations {
        let a = sys.g1(&out.w);
        if opts.is_tight(a) {
            settled = true;
            break;
        }
        let p = &out.p * a;
        let s1 = bandwidth_fixed_point(sys, &p, &(&out.w / a), opts, trace, Step::S2)?;
        out.alternations += 1;
        out.converged &= s1.converged;
        let gain = s1.lambda - out.lambda;
        out.p = p;
        out.w = s1.w;
        out.total_scale *= a;
        out.lambda = s1.lambda;
        if gain <= opts.tol_outer * out.lambda {
            settled = true;
            break;
        }
    }
    if !settled {
        out.converged = false;
        log::warn!(
            "power scaling hit the cap of {} alternations",
            opts.max_alternations
        );
    }
    Ok(out)
}

/// Result of S3.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerUpdate {
    pub p: DVector<f64>,
    /// Per-transmitter PSD in cell-specific mode.
    pub p_bar: Option<DVector<f64>>,
    /// Bandwidth after the per-cell DL re-split (cell-specific mode only).
    pub w: DVector<f64>,
    pub lambda: f64,
    pub g2: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs `x ← θ f(x) / g(f(x))` in coordinates scaled by the magnitude of
/// the first iterate, so that `tol` acts as a relative tolerance.
#[allow(clippy::too_many_arguments)]
fn scaled_normalized(
    f: &dyn SifMap,
    g: &dyn MonotoneHomogeneous,
    theta: f64,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    observe: &mut dyn FnMut(&DVector<f64>, &DVector<f64>),
) -> crate::sif::FixedPointResult {
    let fx0 = f.eval(x0);
    let s = (&fx0 * (theta / g.eval(&fx0))).amax();
    let s = if s > 0.0 && s.is_finite() { s } else { 1.0 };
    let fs = FnSif::new(f.dim(), |q: &DVector<f64>| f.eval(&(q * s)) / s);
    let gs = FnNorm::new(g.dim(), |q: &DVector<f64>| g.eval(&(q * s)));
    let mut r = normalized_fixed_point_observed(
        &fs,
        &gs,
        theta,
        &(x0 / s),
        tol,
        max_iter,
        &mut |_, q, fq| observe(q, fq),
    );
    r.x_star *= s;
    r
}

fn clamp_shares(w: &DVector<f64>) -> DVector<f64> {
    w.map(|v| v.max(MIN_SHARE))
}

/// S3 with per-link PSD: `p ← θ f′_w(p) / g2,w(f′_w(p))` from `p0`.
pub fn step3_update_power(
    sys: &LinkSystem,
    w_fixed: &DVector<f64>,
    p0: &DVector<f64>,
    opts: &SolveOptions,
    trace: &mut SolveTrace,
) -> Result<PowerUpdate> {
    let w = clamp_shares(w_fixed);
    let n = sys.link_count();
    let f = FnSif::new(n, |p: &DVector<f64>| {
        sys.f_power(p, &w).expect("shares clamped positive")
    });
    let g = FnNorm::new(n, |p: &DVector<f64>| sys.g2(&w, p));
    let g1 = sys.g1(&w);
    let first = trace.rows.len();
    let fp = scaled_normalized(
        &f,
        &g,
        opts.theta,
        p0,
        opts.tol_p,
        opts.max_iter,
        &mut |q, fq| {
            if opts.record_trace {
                // g2 is homogeneous, so its value is read off the normalized iterate
                trace.push(Step::S3, min_ratio(q, fq), g1, opts.theta);
            }
        },
    );
    if opts.record_trace {
        trace.set_residuals(first, fp.trace.iter().map(|t| t.residual));
        if let Some(row) = trace.rows.get_mut(first) {
            row.g2 = sys.g2(&w, p0);
        }
    }
    Ok(PowerUpdate {
        lambda: fp
            .eigenvalue
            .expect("normalized iteration sets the eigenvalue"),
        g2: sys.g2(&w, &fp.x_star),
        p: fp.x_star,
        p_bar: None,
        w,
        iterations: fp.iterations,
        converged: fp.converged,
    })
}

/// S3 with cell-specific DL PSD over `p̄ = [p^UL ; q^DL]`, followed by a
/// per-cell re-split of the DL shares.
pub fn step3_update_power_cell(
    sys: &LinkSystem,
    w_fixed: &DVector<f64>,
    p_bar0: &DVector<f64>,
    opts: &SolveOptions,
    trace: &mut SolveTrace,
) -> Result<PowerUpdate> {
    let w = clamp_shares(w_fixed);
    let m = sys.ue_count() + sys.bs_count();
    let f = FnSif::new(m, |pb: &DVector<f64>| {
        sys.f_power_cell(pb, &w).expect("shares clamped positive")
    });
    let g = FnNorm::new(m, |pb: &DVector<f64>| sys.g2_bar(&w, pb));
    let g1 = sys.g1(&w);
    let k = sys.ue_count();
    // cells without downlinks carry a placeholder entry that is not a QoS level
    let active: Vec<usize> = (0..k)
        .chain(
            sys.assoc
                .dl_counts()
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(n, _)| k + n),
        )
        .collect();
    let first = trace.rows.len();
    let fp = scaled_normalized(
        &f,
        &g,
        opts.theta,
        p_bar0,
        opts.tol_p,
        opts.max_iter,
        &mut |q, fq| {
            if opts.record_trace {
                let lambda = active
                    .iter()
                    .map(|&i| q[i] / fq[i])
                    .fold(f64::INFINITY, f64::min);
                trace.push(Step::S3, lambda, g1, opts.theta);
            }
        },
    );
    if opts.record_trace {
        trace.set_residuals(first, fp.trace.iter().map(|t| t.residual));
        if let Some(row) = trace.rows.get_mut(first) {
            row.g2 = sys.g2_bar(&w, p_bar0);
        }
    }
    let p = sys.assoc.expand_transmitter_psd(&fp.x_star);
    let w = resplit_downlinks(sys, &w, &p);
    Ok(PowerUpdate {
        lambda: fp
            .eigenvalue
            .expect("normalized iteration sets the eigenvalue"),
        g2: sys.g2(&w, &p),
        p,
        p_bar: Some(fp.x_star),
        w,
        iterations: fp.iterations,
        converged: fp.converged,
    })
}

/// Redistributes each cell's DL load `ν′_n` over its downlinks in proportion
/// to their needs `d_l / (W0 r_l)`. Under a common cell PSD the interference
/// a cell emits depends only on `ν′_n`, so SINRs, g1 and g2 are unchanged
/// while every DL of the cell reaches the same QoS level.
pub fn resplit_downlinks(sys: &LinkSystem, w: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
    let k = sys.ue_count();
    let need = sys.f_load(w, p).expect("cell PSDs are positive");
    let (_, nu) = sys.assoc.cell_loads(w);
    let mut need_sum = vec![0.0; sys.bs_count()];
    for (i, &b) in sys.assoc.serving_dl().iter().enumerate() {
        need_sum[b] += need[k + i];
    }
    let mut out = w.clone();
    for (i, &b) in sys.assoc.serving_dl().iter().enumerate() {
        out[k + i] = nu[b] * need[k + i] / need_sum[b];
    }
    out
}

/// State after S1 and (if entered) S2.
#[derive(Debug, Clone)]
struct Prefix {
    w: DVector<f64>,
    p: DVector<f64>,
    p_bar: Option<DVector<f64>>,
    step: Step,
    converged: bool,
}

fn run_prefix(sys: &LinkSystem, opts: &SolveOptions, trace: &mut SolveTrace) -> Result<Prefix> {
    let (p, p_bar) = match opts.mode {
        PowerMode::PerLink => (opts.initial_psd.per_link(sys), None),
        PowerMode::CellSpecific => {
            let pb = opts.initial_psd.per_transmitter(sys);
            (sys.assoc.expand_transmitter_psd(&pb), Some(pb))
        }
    };
    let s1 = step1_update_bandwidth(sys, &p, &DVector::zeros(sys.link_count()), opts, trace)
        .map_err(|e| e.in_step("S1"))?;
    let mut out = Prefix {
        w: s1.w,
        p,
        p_bar,
        step: Step::S1,
        converged: s1.converged,
    };
    if !opts.is_tight(s1.g1) && opts.is_tight(s1.g2) {
        let s2 = step2_power_scaling(sys, &out.p, &out.w, s1.lambda, opts, trace)
            .map_err(|e| e.in_step("S2"))?;
        out.p = s2.p;
        out.w = s2.w;
        out.p_bar = out.p_bar.map(|pb| pb * s2.total_scale);
        out.step = Step::S2;
        out.converged &= s2.converged;
    }
    Ok(out)
}

fn run_s3(
    sys: &LinkSystem,
    prefix: &Prefix,
    opts: &SolveOptions,
    trace: &mut SolveTrace,
) -> Result<PowerUpdate> {
    match &prefix.p_bar {
        None => step3_update_power(sys, &prefix.w, &prefix.p, opts, trace),
        Some(pb) => step3_update_power_cell(sys, &prefix.w, pb, opts, trace),
    }
    .map_err(|e| e.in_step("S3"))
}

fn finish(
    sys: &LinkSystem,
    w: DVector<f64>,
    p: DVector<f64>,
    p_bar: Option<DVector<f64>>,
    step: Step,
    converged: bool,
    opts: &SolveOptions,
    trace: SolveTrace,
) -> Solution {
    let lambda = sys.utility(&w, &p);
    let (lambda_ul, lambda_dl) = direction_minima(sys, &w, &p);
    Solution {
        g1: sys.g1(&w),
        g2: sys.g2(&w, &p),
        allocation: Allocation {
            w,
            p,
            p_bar,
            lambda,
        },
        lambda,
        lambda_ul,
        lambda_dl,
        step,
        converged,
        mode: opts.mode,
        theta: opts.theta,
        policy: None,
        overlap: OverlapScheme::None,
        trace,
    }
}

/// Runs S1, then S2 if the power budget binds with free RBs left, then S3
/// if the band is full with power headroom left. With `θ ≠ 1` S3 always
/// runs, re-targeting the power budget to `g2 = θ`.
pub fn solve(sys: &LinkSystem, opts: &SolveOptions) -> Result<Solution> {
    opts.validate()?;
    let mut trace = SolveTrace::default();
    let prefix = run_prefix(sys, opts, &mut trace)?;
    let g1 = sys.g1(&prefix.w);
    let g2 = sys.g2(&prefix.w, &prefix.p);
    let enter_s3 = opts.theta != 1.0 || (opts.is_tight(g1) && !opts.is_tight(g2));
    if !enter_s3 {
        let Prefix {
            w,
            p,
            p_bar,
            step,
            converged,
        } = prefix;
        return Ok(finish(sys, w, p, p_bar, step, converged, opts, trace));
    }
    let s3 = run_s3(sys, &prefix, opts, &mut trace)?;
    Ok(finish(
        sys,
        s3.w,
        s3.p,
        s3.p_bar,
        Step::S3,
        prefix.converged && s3.converged,
        opts,
        trace,
    ))
}

/// Associates under `policy` and optimizes with full UL/DL overlap.
pub fn optimize(policy: &Policy, scenario: &Scenario, opts: &SolveOptions) -> Result<Solution> {
    optimize_with_overlap(policy, scenario, &OverlapModel::none(), opts)
}

pub fn optimize_with_overlap(
    policy: &Policy,
    scenario: &Scenario,
    overlap: &OverlapModel,
    opts: &SolveOptions,
) -> Result<Solution> {
    let assoc = associate(policy, scenario);
    let (sys, _) = LinkSystem::new(scenario, &assoc, overlap)?;
    let mut sol = solve(&sys, opts)?;
    sol.policy = Some(*policy);
    sol.overlap = overlap.scheme;
    Ok(sol)
}

/// Solves under full overlap, estimates overlap factors of `scheme` from the
/// resulting cell loads, and solves again under those factors. Returns the
/// full-overlap solution, the re-solve and the estimated model.
pub fn optimize_estimated_overlap(
    policy: &Policy,
    scenario: &Scenario,
    scheme: OverlapScheme,
    opts: &SolveOptions,
) -> Result<(Solution, Solution, OverlapModel)> {
    let assoc = associate(policy, scenario);
    let (sys, _) = LinkSystem::new(scenario, &assoc, &OverlapModel::none())?;
    let mut full = solve(&sys, opts)?;
    full.policy = Some(*policy);
    let history = [LoadSnapshot::from_allocation(&assoc, &full.allocation.w)];
    let overlap = estimate_overlap(&history, scheme)?;
    let (psys, diags) = LinkSystem::new(scenario, &assoc, &overlap)?;
    if !diags.is_empty() {
        log::debug!("{} overlap factors adjusted", diags.len());
    }
    let mut partial = solve(&psys, opts)?;
    partial.policy = Some(*policy);
    partial.overlap = overlap.scheme;
    Ok((full, partial, overlap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaPoint {
    pub theta: f64,
    pub lambda: f64,
    pub g1: f64,
    pub g2: f64,
}

/// Utility as a function of the S3 power-budget scale θ. S1 and S2 do not
/// depend on θ and run once; S3 is re-run from their output for every θ.
pub fn theta_sweep(
    sys: &LinkSystem,
    thetas: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<ThetaPoint>> {
    let base = SolveOptions {
        theta: 1.0,
        record_trace: false,
        ..opts.clone()
    };
    base.validate()?;
    let prefix = run_prefix(sys, &base, &mut SolveTrace::default())?;
    thetas
        .iter()
        .map(|&theta| {
            let o = SolveOptions {
                theta,
                ..base.clone()
            };
            o.validate()?;
            let s3 = run_s3(sys, &prefix, &o, &mut SolveTrace::default())?;
            Ok(ThetaPoint {
                theta,
                lambda: sys.utility(&s3.w, &s3.p),
                g1: sys.g1(&s3.w),
                g2: sys.g2(&s3.w, &s3.p),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerMinimization {
    pub p: DVector<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_bar: Option<DVector<f64>>,
    pub w: DVector<f64>,
    /// Utility at the minimized PSD; 1 up to the iteration tolerance.
    pub lambda: f64,
    pub lambda_star: f64,
    /// `ψ(p) = ‖diag(w) p‖₁`.
    pub psi_min: f64,
    pub psi_star: f64,
    pub saving_ratio: f64,
    pub g2: f64,
    pub iterations: usize,
}

/// Relative tolerance of the power-minimization iteration.
pub const MIN_POWER_TOL: f64 = 1e-12;

/// Smallest PSD that still meets every demand (`λ = 1`) for the bandwidth of
/// `solution`, by the Yates iteration `p ← f′_w(p)` from zero. Requires the
/// solution's utility to exceed 1.
pub fn minimize_power(
    sys: &LinkSystem,
    allocation: &Allocation,
    opts: &SolveOptions,
) -> Result<PowerMinimization> {
    let w = clamp_shares(&allocation.w);
    let lambda_star = sys.utility(&w, &allocation.p);
    if !(lambda_star > 1.0) {
        return Err(Error::Infeasible(format!(
            "power minimization needs utility above 1, got {lambda_star}"
        )));
    }
    let psi = |w: &DVector<f64>, p: &DVector<f64>| w.dot(p);
    let (p, p_bar, w_out, iterations) = match &allocation.p_bar {
        None => {
            let s = allocation.p.map(|v| v.max(f64::MIN_POSITIVE));
            let f = FnSif::new(sys.link_count(), |q: &DVector<f64>| {
                sys.f_power(&q.component_mul(&s), &w)
                    .expect("shares clamped positive")
                    .component_div(&s)
            });
            let r = yates_iteration(
                &f,
                &DVector::zeros(sys.link_count()),
                MIN_POWER_TOL,
                opts.max_iter,
            )
            .into_result("power minimization")?;
            (r.x_star.component_mul(&s), None, w.clone(), r.iterations)
        }
        Some(pb_star) => {
            let s = pb_star.map(|v| v.max(f64::MIN_POSITIVE));
            let m = s.len();
            let f = FnSif::new(m, |q: &DVector<f64>| {
                sys.f_power_cell(&q.component_mul(&s), &w)
                    .expect("shares clamped positive")
                    .component_div(&s)
            });
            let r = yates_iteration(&f, &DVector::zeros(m), MIN_POWER_TOL, opts.max_iter)
                .into_result("power minimization")?;
            let pb = r.x_star.component_mul(&s);
            let p = sys.assoc.expand_transmitter_psd(&pb);
            let w2 = resplit_downlinks(sys, &w, &p);
            (p, Some(pb), w2, r.iterations)
        }
    };
    let psi_min = psi(&w_out, &p);
    let psi_star = psi(&w, &allocation.p);
    Ok(PowerMinimization {
        lambda: sys.utility(&w_out, &p),
        g2: sys.g2(&w_out, &p),
        lambda_star,
        psi_min,
        psi_star,
        saving_ratio: psi_min / psi_star,
        p,
        p_bar,
        w: w_out,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearCheck {
    /// Largest λ for which the SINR targets `η_l(λ)` are jointly feasible
    /// under `g2 ≤ θ`.
    pub lambda_linear: f64,
    pub lambda_reference: f64,
    pub relative_difference: f64,
    pub agrees: bool,
    pub p: DVector<f64>,
}

pub const LINEAR_CHECK_TOL: f64 = 1e-4;

/// Cross-checks a power-control utility via SINR targets. For a trial λ the
/// per-link targets `η_l(λ) = 2^{λ d_l / (W0 B w_l)} − 1` turn the rate
/// constraints into the affine map `p ↦ diag(η) D⁻¹(Ṽ diag(w) p + σ)`; its
/// conditional eigenvalue under `g2 = θ` is at least 1 exactly when λ is
/// achievable. Bisection on λ recovers the optimum independently of S3.
pub fn linear_reformulation_check(
    sys: &LinkSystem,
    w_fixed: &DVector<f64>,
    lambda_reference: f64,
    theta: f64,
) -> Result<LinearCheck> {
    if !(lambda_reference > 0.0) {
        return Err(Error::Domain("reference utility must be positive".into()));
    }
    let w = clamp_shares(w_fixed);
    let n = sys.link_count();
    let w0 = sys.rb_count as f64;
    let exponent = DVector::from_fn(n, |l, _| {
        sys.demands[l] * LN_2 / (w0 * sys.rb_bandwidth * w[l])
    });
    let g = FnNorm::new(n, |p: &DVector<f64>| sys.g2(&w, p));
    let eigen = |lambda: f64| -> Result<(f64, DVector<f64>)> {
        let eta = exponent.map(|e| (lambda * e).exp_m1());
        let f = FnSif::new(n, |p: &DVector<f64>| {
            sys.coupling
                .normalized_interference(&w.component_mul(p))
                .component_mul(&eta)
        });
        let x0 = DVector::from_element(n, 1.0);
        let r = scaled_normalized(&f, &g, theta, &x0, 1e-11, 200_000, &mut |_, _| {});
        let r = r.into_result("linear reformulation")?;
        Ok((r.eigenvalue.expect("set"), r.x_star))
    };
    let (mut lo, mut hi) = (lambda_reference * 0.5, lambda_reference * 2.0);
    while eigen(lo)?.0 < 1.0 {
        lo *= 0.5;
    }
    while eigen(hi)?.0 >= 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eigen(mid)?.0 >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (_, p) = eigen(lo)?;
    let rel = (lo - lambda_reference).abs() / lambda_reference;
    Ok(LinearCheck {
        lambda_linear: lo,
        lambda_reference,
        relative_difference: rel,
        agrees: rel <= LINEAR_CHECK_TOL,
        p,
    })
}

/// Direction of a link index; handy when printing per-link tables.
pub fn link_direction(sys: &LinkSystem, l: usize) -> Direction {
    sys.assoc.link_direction(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Association, BaseStation, BsKind, UserTerminal};
    use crate::scenario::{generate, ScenarioConfig};
    use nalgebra::DMatrix;

    fn ue(ul: f64, dl: f64, dbm: f64) -> UserTerminal {
        UserTerminal {
            x: 0.0,
            y: 0.0,
            service_class: 0,
            max_power_dbm: dbm,
            ul_demand_mbps: ul,
            dl_demand_mbps: dl,
        }
    }

    fn bs(kind: BsKind, dbm: f64) -> BaseStation {
        BaseStation {
            x: 0.0,
            y: 0.0,
            kind,
            max_power_dbm: dbm,
        }
    }

    const NOISE: f64 = 7.16e-16;

    /// One BS, one UE: UL and DL share the serving BS, so there is no
    /// interference at all.
    fn single(pl_db: f64, ul: f64, dl: f64, ue_dbm: f64) -> LinkSystem {
        let h0 = DMatrix::from_element(1, 1, 10f64.powf(-pl_db / 10.0));
        let one = DMatrix::from_element(1, 1, 1.0);
        let s = Scenario::from_gains(
            vec![bs(BsKind::Macro, 43.0)],
            vec![ue(ul, dl, ue_dbm)],
            &h0,
            &one,
            &one,
            25,
            180e3,
            NOISE,
        )
        .unwrap();
        let a = Association::new(1, vec![0], vec![0]).unwrap();
        LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap().0
    }

    fn two_cell() -> LinkSystem {
        let h0 = DMatrix::from_row_slice(2, 3, &[1e-9, 3e-12, 2e-13, 4e-13, 5e-10, 2e-11]);
        let h1 = DMatrix::from_row_slice(2, 2, &[1.0, 1e-12, 1e-12, 1.0]);
        let h2 =
            DMatrix::from_row_slice(3, 3, &[1.0, 1e-8, 1e-9, 1e-8, 1.0, 3e-9, 1e-9, 3e-9, 1.0]);
        let s = Scenario::from_gains(
            vec![bs(BsKind::Macro, 43.0), bs(BsKind::Pico, 30.0)],
            vec![ue(1.0, 4.0, 22.0), ue(0.5, 2.0, 22.0), ue(0.5, 1.0, 22.0)],
            &h0,
            &h1,
            &h2,
            25,
            180e3,
            NOISE,
        )
        .unwrap();
        // UE 2 decoupled: UL to the pico, DL from the macro
        let a = Association::new(2, vec![0, 1, 1], vec![0, 1, 0]).unwrap();
        LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap().0
    }

    fn generated(seed: u64) -> LinkSystem {
        let s = generate(&ScenarioConfig::new(1, 1, 2, 12), seed).unwrap();
        let a = associate(&Policy::DeudP, &s);
        LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap().0
    }

    /// Largest utility of a lone link when its transmitter spends the whole
    /// budget on share `w`.
    fn full_budget_level(sys: &LinkSystem, l: usize, w: f64, p_max: f64) -> f64 {
        let w0 = sys.rb_count as f64;
        let snr = p_max / (w0 * w) * sys.coupling.d_diag[l] / NOISE;
        w0 * w * sys.rb_bandwidth * (1.0 + snr).log2() / sys.demands[l]
    }

    #[test]
    fn initial_psd_follows_open_loop_rule() {
        let sys = single(100.0, 1.0, 4.0, 22.0);
        let p = InitialPsd::default().per_link(&sys);
        assert!((crate::units::watts_to_dbm(p[0]) - (12.2 - 121.45 + 100.0)).abs() < 1e-9);
        let far = single(140.0, 1.0, 4.0, 22.0);
        assert!(
            (crate::units::watts_to_dbm(InitialPsd::default().per_link(&far)[0]) - 12.0).abs()
                < 1e-9
        );
    }

    #[test]
    fn step1_single_cell_closed_form() {
        let sys = single(100.0, 1.0, 4.0, 22.0);
        let p = InitialPsd::default().per_link(&sys);
        let opts = SolveOptions::default();
        let u = step1_update_bandwidth(
            &sys,
            &p,
            &DVector::zeros(2),
            &opts,
            &mut SolveTrace::default(),
        )
        .unwrap();
        // rates do not depend on w, so w* = f / max(g1(f), g2(f))
        let w0 = 25.0;
        let r = |l: usize| 180e3 * (1.0 + p[l] * sys.coupling.d_diag[l] / NOISE).log2();
        let f = [1e6 / (w0 * r(0)), 4e6 / (w0 * r(1))];
        let g = (f[0] + f[1])
            .max(w0 * f[0] * p[0] / 10f64.powf(-0.8))
            .max(w0 * f[1] * p[1] / 10f64.powf(1.3));
        assert!((u.lambda - 1.0 / g).abs() < 1e-6 / g);
        assert!((u.w[0] - f[0] / g).abs() < 1e-9);
        assert!((u.w[1] - f[1] / g).abs() < 1e-9);
        assert!((u.g1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn step3_reaches_budget_limited_optimum() {
        let sys = single(100.0, 1.0, 4.0, 22.0);
        let sol = solve(&sys, &SolveOptions::default()).unwrap();
        assert_eq!(sol.step, Step::S3);
        assert!((sol.g1 - 1.0).abs() < 1e-6);
        assert!((sol.g2 - 1.0).abs() < 1e-6);
        let w = &sol.allocation.w;
        let expect = full_budget_level(&sys, 0, w[0], 10f64.powf(-0.8)).min(full_budget_level(
            &sys,
            1,
            w[1],
            10f64.powf(1.3),
        ));
        assert!(
            (sol.lambda - expect).abs() < 1e-6 * expect,
            "{} vs {expect}",
            sol.lambda
        );
    }

    #[test]
    fn demand_scaling_scales_utility() {
        let base = solve(&two_cell(), &SolveOptions::default()).unwrap();
        let mut sys = two_cell();
        sys.demands *= 3.0;
        let scaled = solve(&sys, &SolveOptions::default()).unwrap();
        assert!((scaled.lambda * 3.0 - base.lambda).abs() < 1e-5 * base.lambda);
    }

    #[test]
    fn trace_is_monotone_and_feasible() {
        for seed in 0..4 {
            let sys = generated(seed);
            for mode in [PowerMode::PerLink, PowerMode::CellSpecific] {
                let sol = solve(
                    &sys,
                    &SolveOptions {
                        mode,
                        ..Default::default()
                    },
                )
                .unwrap();
                assert!(sol.converged);
                let t = &sol.trace;
                assert!(
                    t.max_lambda_drop() <= 1e-9 * sol.lambda,
                    "seed {seed} {mode:?}: drop {}",
                    t.max_lambda_drop()
                );
                assert!(t
                    .rows
                    .iter()
                    .all(|r| r.g1 <= 1.0 + 1e-9 && r.g2 <= 1.0 + 1e-9));
                let last = t.rows.last().unwrap();
                assert!((last.lambda - sol.lambda).abs() < 1e-5 * sol.lambda);
                assert!(sol.g1 <= 1.0 + 1e-9 && sol.g2 <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn step3_keeps_a_power_tight_fixed_point() {
        // far UE with a weak amplifier: S1 ends power limited
        let sys = single(135.0, 2.0, 0.5, 10.0);
        let opts = SolveOptions::default();
        let p = InitialPsd::default().per_link(&sys);
        let s1 = step1_update_bandwidth(
            &sys,
            &p,
            &DVector::zeros(2),
            &opts,
            &mut SolveTrace::default(),
        )
        .unwrap();
        assert!((s1.g2 - 1.0).abs() < 1e-9);
        let s3 = step3_update_power(&sys, &s1.w, &p, &opts, &mut SolveTrace::default()).unwrap();
        assert!((s3.lambda - s1.lambda).abs() < 1e-6 * s1.lambda);
    }

    #[test]
    fn step3_improves_when_band_is_full() {
        let sys = two_cell();
        let opts = SolveOptions::default();
        let p = InitialPsd::default().per_link(&sys);
        let s1 = step1_update_bandwidth(
            &sys,
            &p,
            &DVector::zeros(6),
            &opts,
            &mut SolveTrace::default(),
        )
        .unwrap();
        assert!((s1.g1 - 1.0).abs() < 1e-9 && s1.g2 < 1.0);
        let s3 = step3_update_power(&sys, &s1.w, &p, &opts, &mut SolveTrace::default()).unwrap();
        assert!(s3.lambda > s1.lambda * (1.0 + 1e-6));
        assert!((s3.g2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cell_resplit_keeps_constraints_and_equalizes_cells() {
        let sys = two_cell();
        let sol = solve(
            &sys,
            &SolveOptions {
                mode: PowerMode::CellSpecific,
                ..Default::default()
            },
        )
        .unwrap();
        let (w, p) = (&sol.allocation.w, &sol.allocation.p);
        // both DLs of the macro cell share one PSD and one QoS level
        assert_eq!(p[3], p[5]);
        let q = sys.qos_levels(w, p);
        assert!((q[3] - q[5]).abs() < 1e-9 * q[3]);
        let skew = w.map(|v| v) + DVector::from_column_slice(&[0.0, 0.0, 0.0, 0.01, 0.0, -0.01]);
        assert!((sys.g1(&skew) - sys.g1(w)).abs() < 1e-12);
        assert!((sys.g2(&skew, p) - sys.g2(w, p)).abs() < 1e-12);
        let re = resplit_downlinks(&sys, &skew, p);
        assert!((&re - w).amax() < 1e-9);
    }

    #[test]
    fn theta_sweep_is_monotone_in_theta() {
        let sys = two_cell();
        let pts = theta_sweep(&sys, &[0.25, 0.5, 1.0, 2.0], &SolveOptions::default()).unwrap();
        for w in pts.windows(2) {
            assert!(w[1].lambda >= w[0].lambda);
        }
        for pt in &pts {
            assert!((pt.g2 - pt.theta).abs() < 1e-6 * pt.theta);
        }
        let direct = solve(&sys, &SolveOptions::default()).unwrap();
        assert!((pts[2].lambda - direct.lambda).abs() < 1e-6 * direct.lambda);
    }

    #[test]
    fn minimum_power_single_cell_closed_form() {
        let sys = single(100.0, 1.0, 4.0, 22.0);
        let sol = solve(&sys, &SolveOptions::default()).unwrap();
        let m = minimize_power(&sys, &sol.allocation, &SolveOptions::default()).unwrap();
        let w = &sol.allocation.w;
        for l in 0..2 {
            let expect = NOISE * (2f64.powf(sys.demands[l] / (25.0 * 180e3 * w[l])) - 1.0)
                / sys.coupling.d_diag[l];
            assert!((m.p[l] - expect).abs() < 1e-9 * expect);
        }
        assert!((m.lambda - 1.0).abs() < 1e-9);
        assert!(m.psi_min < m.psi_star);
    }

    #[test]
    fn minimum_power_needs_slack() {
        let sys = single(100.0, 1.0, 4.0, 22.0);
        let mut sol = solve(&sys, &SolveOptions::default()).unwrap();
        sol.allocation.w /= sol.lambda * 1.5;
        assert!(matches!(
            minimize_power(&sys, &sol.allocation, &SolveOptions::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn linear_check_matches_step3() {
        let sys = two_cell();
        let sol = solve(&sys, &SolveOptions::default()).unwrap();
        assert_eq!(sol.step, Step::S3);
        let c = linear_reformulation_check(&sys, &sol.allocation.w, sol.lambda, 1.0).unwrap();
        assert!(c.agrees, "{c:?}");
    }

    #[test]
    fn bad_options_are_rejected() {
        let sys = two_cell();
        let opts = SolveOptions {
            theta: 0.0,
            ..Default::default()
        };
        assert!(matches!(solve(&sys, &opts), Err(Error::Config(_))));
    }
}
