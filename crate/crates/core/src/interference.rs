//! SINR, rates, demand functions and the load/power constraint functionals.
//!
//! Units: PSD in watts per RB, rates in bit/s per RB, demands in bit/s.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::model::{
    apply_overlap, build_coupling, Association, CouplingModel, OverlapDiagnostic, OverlapModel,
    Scenario,
};

/// Demand entry used for cells that serve no downlink.
pub const EMPTY_CELL_DEMAND: f64 = 1e-15;

/// Per-transmitter power budgets `[p_max^UL ; q_max^DL]` in watts over the
/// whole band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLimits {
    p_ext_max: DVector<f64>,
}

impl PowerLimits {
    pub fn new(p_ext_max: DVector<f64>) -> Result<Self> {
        if p_ext_max.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Model(
                "power limits must be strictly positive".into(),
            ));
        }
        Ok(Self { p_ext_max })
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.p_ext_max
    }

    pub fn ue(&self, k: usize) -> f64 {
        self.p_ext_max[k]
    }

    /// Budget of base station `n`, given `K` users.
    pub fn bs(&self, k_count: usize, n: usize) -> f64 {
        self.p_ext_max[k_count + n]
    }
}

/// A bandwidth and power allocation together with its utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub w: DVector<f64>,
    pub p: DVector<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_bar: Option<DVector<f64>>,
    pub lambda: f64,
}

/// `SINR_l = p_l / [D⁻¹(Ṽ diag(w) p + σ)]_l`.
pub fn sinr(p: &DVector<f64>, w: &DVector<f64>, model: &CouplingModel) -> DVector<f64> {
    let interference = model.normalized_interference(&w.component_mul(p));
    p.component_div(&interference)
}

/// `r_l = B log2(1 + SINR_l)` in bit/s per RB.
pub fn spectral_efficiency(sinr: &DVector<f64>, rb_bandwidth: f64) -> DVector<f64> {
    sinr.map(|s| rb_bandwidth * s.ln_1p() / LN_2)
}

/// `f_l = d_l / (W0 r_l)`: RB fraction link `l` needs at the current
/// interference.
pub fn f_load(
    w: &DVector<f64>,
    p_fixed: &DVector<f64>,
    model: &CouplingModel,
    demands: &DVector<f64>,
    rb_count: usize,
    rb_bandwidth: f64,
) -> Result<DVector<f64>> {
    if let Some(l) = p_fixed.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "f_load needs positive power, p[{l}] = {}",
            p_fixed[l]
        )));
    }
    let r = spectral_efficiency(&sinr(p_fixed, w, model), rb_bandwidth);
    let w0 = rb_count as f64;
    Ok(demands.zip_map(&r, |d, r| d / (w0 * r)))
}

/// Maximum cell load `‖A w‖∞`.
pub fn g1(w: &DVector<f64>, assoc: &Association) -> f64 {
    let (ul, dl) = assoc.cell_loads(w);
    ul.iter().zip(&dl).fold(0.0, |m, (a, b)| m.max(a + b))
}

/// Per-transmitter power use relative to budget:
/// `W0 ‖diag(p_ext_max)⁻¹ A_ext diag(w) p‖∞`.
pub fn g2(
    w: &DVector<f64>,
    p: &DVector<f64>,
    assoc: &Association,
    limits: &PowerLimits,
    rb_count: usize,
) -> f64 {
    transmitter_powers(w, p, assoc, rb_count)
        .iter()
        .zip(limits.as_vector().iter())
        .fold(0.0, |m, (used, max)| m.max(used / max))
}

/// Total transmit power per transmitter `W0 A_ext diag(w) p` in watts.
pub fn transmitter_powers(
    w: &DVector<f64>,
    p: &DVector<f64>,
    assoc: &Association,
    rb_count: usize,
) -> DVector<f64> {
    let k = assoc.ue_count();
    let w0 = rb_count as f64;
    let mut out = DVector::zeros(k + assoc.bs_count());
    for i in 0..k {
        out[i] = w0 * w[i] * p[i];
        out[k + assoc.serving_dl()[i]] += w0 * w[k + i] * p[k + i];
    }
    out
}

/// Power demand map for fixed bandwidth:
/// `f′_l = (p_l / w_l) d_l / (W0 r_l)` for `p_l ≠ 0`, and its low-SINR limit
/// `d_l ln2 / (W0 B w_l) · I_l(p)` for `p_l = 0`.
pub fn f_power(
    p: &DVector<f64>,
    w_fixed: &DVector<f64>,
    model: &CouplingModel,
    demands: &DVector<f64>,
    rb_count: usize,
    rb_bandwidth: f64,
) -> Result<DVector<f64>> {
    if let Some(l) = w_fixed.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "f_power needs positive bandwidth, w[{l}] = {}",
            w_fixed[l]
        )));
    }
    let interference = model.normalized_interference(&w_fixed.component_mul(p));
    let w0 = rb_count as f64;
    Ok(DVector::from_fn(p.len(), |l, _| {
        power_entry(
            p[l],
            interference[l],
            demands[l],
            w0 * w_fixed[l],
            rb_bandwidth,
        )
    }))
}

/// `(p / w) d / (W0 r)` with `W0 w` passed as `band`; `I ln2 d / (B band)` at `p = 0`.
fn power_entry(p: f64, interference: f64, demand: f64, band: f64, rb_bandwidth: f64) -> f64 {
    if p == 0.0 {
        demand * LN_2 / (band * rb_bandwidth) * interference
    } else {
        let r = rb_bandwidth * (p / interference).ln_1p() / LN_2;
        p * demand / (band * r)
    }
}

/// Power demand map over per-transmitter PSDs `p̄ = [p^UL ; q^DL]`: UL
/// entries as in [`f_power`]; DL entry of cell `n` from the per-cell sum-rate
/// constraint `ν′_n ≥ Σ_{l∈n} d_l / (W0 r_l)`.
#[allow(clippy::too_many_arguments)]
pub fn f_power_cell(
    p_bar: &DVector<f64>,
    w_fixed: &DVector<f64>,
    model: &CouplingModel,
    assoc: &Association,
    demands: &DVector<f64>,
    rb_count: usize,
    rb_bandwidth: f64,
) -> Result<DVector<f64>> {
    let k = assoc.ue_count();
    let n = assoc.bs_count();
    if let Some(l) = w_fixed.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "f_power_cell needs positive bandwidth, w[{l}] = {}",
            w_fixed[l]
        )));
    }
    let p = assoc.expand_transmitter_psd(p_bar);
    let interference = model.normalized_interference(&w_fixed.component_mul(&p));
    let w0 = rb_count as f64;
    let mut out = DVector::from_element(k + n, 0.0);
    for j in 0..k {
        out[j] = power_entry(
            p[j],
            interference[j],
            demands[j],
            w0 * w_fixed[j],
            rb_bandwidth,
        );
    }
    let (_, nu) = assoc.cell_loads(w_fixed);
    let mut has_dl = vec![false; n];
    for i in 0..k {
        let cell = assoc.serving_dl()[i];
        has_dl[cell] = true;
        let l = k + i;
        // each DL term uses the whole cell load as its band
        out[k + cell] += power_entry(
            p[l],
            interference[l],
            demands[l],
            w0 * nu[cell],
            rb_bandwidth,
        );
    }
    for cell in 0..n {
        if !has_dl[cell] {
            out[k + cell] = EMPTY_CELL_DEMAND;
        }
    }
    Ok(out)
}

/// `g2(w, Λ p̄)`.
pub fn g2_bar(
    w: &DVector<f64>,
    p_bar: &DVector<f64>,
    assoc: &Association,
    limits: &PowerLimits,
    rb_count: usize,
) -> f64 {
    g2(
        w,
        &assoc.expand_transmitter_psd(p_bar),
        assoc,
        limits,
        rb_count,
    )
}

/// Per-link QoS satisfaction `W0 w_l r_l / d_l`.
pub fn qos_levels(
    w: &DVector<f64>,
    p: &DVector<f64>,
    model: &CouplingModel,
    demands: &DVector<f64>,
    rb_count: usize,
    rb_bandwidth: f64,
) -> DVector<f64> {
    let r = spectral_efficiency(&sinr(p, w, model), rb_bandwidth);
    let w0 = rb_count as f64;
    DVector::from_fn(w.len(), |l, _| w0 * w[l] * r[l] / demands[l])
}

/// Achieved utility `λ = min_l W0 w_l r_l / d_l`.
pub fn utility(
    w: &DVector<f64>,
    p: &DVector<f64>,
    model: &CouplingModel,
    demands: &DVector<f64>,
    rb_count: usize,
    rb_bandwidth: f64,
) -> f64 {
    qos_levels(w, p, model, demands, rb_count, rb_bandwidth).min()
}

/// Everything the demand functions need for one association, bundled.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSystem {
    pub coupling: CouplingModel,
    pub assoc: Association,
    pub demands: DVector<f64>,
    pub limits: PowerLimits,
    pub rb_count: usize,
    pub rb_bandwidth: f64,
}

impl LinkSystem {
    pub fn new(
        scenario: &Scenario,
        assoc: &Association,
        overlap: &OverlapModel,
    ) -> Result<(Self, Vec<OverlapDiagnostic>)> {
        let full = build_coupling(scenario, assoc)?;
        let (coupling, diagnostics) = apply_overlap(&full, overlap, assoc)?;
        Ok((
            Self {
                coupling,
                assoc: assoc.clone(),
                demands: scenario.demands().clone(),
                limits: scenario.power_limits(),
                rb_count: scenario.rb_count(),
                rb_bandwidth: scenario.rb_bandwidth(),
            },
            diagnostics,
        ))
    }

    pub fn ue_count(&self) -> usize {
        self.assoc.ue_count()
    }

    pub fn bs_count(&self) -> usize {
        self.assoc.bs_count()
    }

    pub fn link_count(&self) -> usize {
        2 * self.ue_count()
    }

    pub fn sinr(&self, w: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        sinr(p, w, &self.coupling)
    }

    pub fn f_load(&self, w: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        f_load(
            w,
            p,
            &self.coupling,
            &self.demands,
            self.rb_count,
            self.rb_bandwidth,
        )
    }

    pub fn f_power(&self, p: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        f_power(
            p,
            w,
            &self.coupling,
            &self.demands,
            self.rb_count,
            self.rb_bandwidth,
        )
    }

    pub fn f_power_cell(&self, p_bar: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        f_power_cell(
            p_bar,
            w,
            &self.coupling,
            &self.assoc,
            &self.demands,
            self.rb_count,
            self.rb_bandwidth,
        )
    }

    pub fn g1(&self, w: &DVector<f64>) -> f64 {
        g1(w, &self.assoc)
    }

    pub fn g2(&self, w: &DVector<f64>, p: &DVector<f64>) -> f64 {
        g2(w, p, &self.assoc, &self.limits, self.rb_count)
    }

    pub fn g2_bar(&self, w: &DVector<f64>, p_bar: &DVector<f64>) -> f64 {
        g2_bar(w, p_bar, &self.assoc, &self.limits, self.rb_count)
    }

    pub fn qos_levels(&self, w: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        qos_levels(
            w,
            p,
            &self.coupling,
            &self.demands,
            self.rb_count,
            self.rb_bandwidth,
        )
    }

    pub fn utility(&self, w: &DVector<f64>, p: &DVector<f64>) -> f64 {
        utility(
            w,
            p,
            &self.coupling,
            &self.demands,
            self.rb_count,
            self.rb_bandwidth,
        )
    }

    pub fn with_noise(&self, noise: f64) -> Self {
        Self {
            coupling: self.coupling.with_noise(noise),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaseStation, BsKind, UserTerminal};
    use nalgebra::{dvector, DMatrix};

    fn ue(ul: f64, dl: f64) -> UserTerminal {
        UserTerminal {
            x: 0.0,
            y: 0.0,
            service_class: 0,
            max_power_dbm: 22.0,
            ul_demand_mbps: ul,
            dl_demand_mbps: dl,
        }
    }

    fn bs(dbm: f64) -> BaseStation {
        BaseStation {
            x: 0.0,
            y: 0.0,
            kind: BsKind::Macro,
            max_power_dbm: dbm,
        }
    }

    fn two_cell() -> (Scenario, Association) {
        let h0 = DMatrix::from_row_slice(2, 2, &[1e-7, 2e-10, 3e-10, 4e-8]);
        let h1 = DMatrix::from_row_slice(2, 2, &[1.0, 1e-11, 1e-11, 1.0]);
        let h2 = DMatrix::from_row_slice(2, 2, &[1.0, 5e-9, 5e-9, 1.0]);
        let s = Scenario::from_gains(
            vec![bs(43.0), bs(30.0)],
            vec![ue(1.0, 4.0), ue(2.0, 3.0)],
            &h0,
            &h1,
            &h2,
            25,
            180e3,
            7e-16,
        )
        .unwrap();
        let a = Association::new(2, vec![0, 1], vec![0, 1]).unwrap();
        (s, a)
    }

    #[test]
    fn zero_load_is_noise_limited() {
        let (s, a) = two_cell();
        let (sys, _) = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap();
        let p = dvector![1e-3, 2e-3, 3e-3, 4e-3];
        let snr = sys.sinr(&DVector::zeros(4), &p);
        for l in 0..4 {
            let expected = p[l] * sys.coupling.d_diag[l] / s.noise_psd();
            assert!((snr[l] - expected).abs() <= 1e-12 * expected);
        }
    }

    #[test]
    fn two_cell_sinr_by_hand() {
        let (s, a) = two_cell();
        let (sys, _) = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap();
        let (h0, h1, h2) = (s.h0(), s.h1(), s.h2());
        let w = dvector![0.2, 0.3, 0.5, 0.4];
        let p = dvector![1e-2, 2e-2, 5e-2, 1e-3];
        let n = s.noise_psd();
        // UL of user 0 at BS 0: interfered by UL1 (h0[0,1]) and DL1 from BS 1 (h1[0,1])
        let ul0 = p[0] * h0[(0, 0)] / (w[1] * p[1] * h0[(0, 1)] + w[3] * p[3] * h1[(0, 1)] + n);
        // DL of user 1 from BS 1: interfered by UL0 (h2[1,0]) and DL0 from BS 0 (h0[0,1])
        let dl1 = p[3] * h0[(1, 1)] / (w[0] * p[0] * h2[(1, 0)] + w[2] * p[2] * h0[(0, 1)] + n);
        let got = sys.sinr(&w, &p);
        assert!((got[0] - ul0).abs() <= 1e-12 * ul0);
        assert!((got[3] - dl1).abs() <= 1e-12 * dl1);
    }

    #[test]
    fn spectral_efficiency_reference_points() {
        let r = spectral_efficiency(&dvector![0.0, 1.0, 3.0], 180e3);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 180e3).abs() < 1e-9);
        assert!((r[2] - 360e3).abs() < 1e-9);
    }

    #[test]
    fn f_load_whole_band_identity() {
        // one noise-only link at SINR 1 demanding W0 * B
        let g = 1e-8;
        let noise = 1e-15;
        let s = Scenario::from_gains(
            vec![bs(43.0)],
            vec![ue(4.5, 4.5)],
            &DMatrix::from_element(1, 1, g),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            25,
            180e3,
            noise,
        )
        .unwrap();
        let a = Association::new(1, vec![0], vec![0]).unwrap();
        let (sys, _) = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap();
        let gain = sys.coupling.d_diag[0];
        let p = DVector::from_element(2, s.noise_psd() / gain);
        let f = sys.f_load(&dvector![0.3, 0.3], &p).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-9);
        assert!((f[1] - 1.0).abs() < 1e-9);
        assert!(matches!(
            sys.f_load(&dvector![0.3, 0.3], &dvector![0.0, 1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn constraint_functionals() {
        let a = Association::new(2, vec![0, 1, 1], vec![0, 0, 1]).unwrap();
        assert_eq!(g1(&DVector::zeros(6), &a), 0.0);
        let w = dvector![0.1, 0.2, 0.2, 0.3, 0.0, 0.5];
        assert!((g1(&w, &a) - 0.9).abs() < 1e-15);
        let limits = PowerLimits::new(dvector![0.1, 0.1, 0.1, 20.0, 1.0]).unwrap();
        assert_eq!(g2(&w, &DVector::zeros(6), &a, &limits, 25), 0.0);
        // UE 0 uses half the band at p_max / W0
        let mut p = DVector::from_element(6, 1e-9);
        let mut w = DVector::from_element(6, 1e-3);
        w[0] = 0.5;
        p[0] = 0.1 / 25.0;
        assert!((g2(&w, &p, &a, &limits, 25) - 0.5).abs() < 1e-9);
        // BS 1 serves DL 2 alone; filling the band at q_max / W0 gives g2 = 1
        w[5] = 1.0;
        p[5] = 1.0 / 25.0;
        assert!((g2(&w, &p, &a, &limits, 25) - 1.0).abs() < 1e-12);
        assert_eq!(g2(&w, &p, &a, &limits, 25), g2(&p, &w, &a, &limits, 25));
    }

    #[test]
    fn f_power_is_continuous_at_zero() {
        let (s, a) = two_cell();
        let (sys, _) = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap();
        let w = dvector![0.2, 0.3, 0.5, 0.4];
        let mut p = dvector![1e-2, 2e-2, 0.0, 1e-3];
        let at_zero = sys.f_power(&p, &w).unwrap()[2];
        p[2] = 1e-12;
        let near = sys.f_power(&p, &w).unwrap()[2];
        assert!(((near - at_zero) / at_zero).abs() < 1e-6);
    }

    #[test]
    fn f_power_single_link_closed_form() {
        let g = 1e-9;
        let noise = 1e-15;
        let s = Scenario::from_gains(
            vec![bs(43.0)],
            vec![ue(5.0, 9.0)],
            &DMatrix::from_element(1, 1, g),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            25,
            180e3,
            noise,
        )
        .unwrap();
        let a = Association::new(1, vec![0], vec![0]).unwrap();
        let (sys, _) = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap();
        let w = dvector![0.3, 0.6];
        let r = crate::sif::yates_iteration(
            &crate::sif::FnSif::new(2, |p: &DVector<f64>| sys.f_power(p, &w).unwrap()),
            &DVector::zeros(2),
            1e-20,
            100_000,
        );
        assert!(r.converged);
        for l in 0..2 {
            let exact = (2f64.powf(sys.demands[l] / (25.0 * w[l] * 180e3)) - 1.0) * s.noise_psd()
                / sys.coupling.d_diag[l];
            assert!(
                (r.x_star[l] - exact).abs() <= 1e-8 * exact,
                "{} vs {exact}",
                r.x_star[l]
            );
        }
    }

    #[test]
    fn reducing_interference_lowers_power_demand() {
        let (s, a) = two_cell();
        let (sys, _) = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap();
        let w = dvector![0.2, 0.3, 0.5, 0.4];
        let p = dvector![1e-2, 2e-2, 5e-2, 1e-3];
        let base = sys.f_power(&p, &w).unwrap();
        for l in 0..4 {
            let mut q = &p * 0.5;
            q[l] = p[l];
            let lower = sys.f_power(&q, &w).unwrap();
            assert!(lower[l] < base[l]);
        }
    }

    #[test]
    fn cell_power_single_dl_reduces_to_link_form() {
        let (s, _) = two_cell();
        let a = Association::new(2, vec![0, 1], vec![0, 1]).unwrap();
        let (sys, _) = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap();
        let w = dvector![0.2, 0.3, 0.5, 0.4];
        let p_bar = dvector![1e-2, 2e-2, 5e-2, 1e-3];
        let p = a.expand_transmitter_psd(&p_bar);
        let fl = sys.f_power(&p, &w).unwrap();
        let fc = sys.f_power_cell(&p_bar, &w).unwrap();
        for j in 0..4 {
            assert!((fl[j] - fc[j]).abs() <= 1e-14 * fl[j]);
        }
        assert_eq!(sys.g2_bar(&w, &p_bar), sys.g2(&w, &p));
    }

    #[test]
    fn cell_power_sums_per_cell_constraints() {
        let (s, _) = two_cell();
        let a = Association::new(2, vec![0, 1], vec![1, 1]).unwrap();
        let (sys, _) = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap();
        let w = dvector![0.2, 0.3, 0.25, 0.15];
        let p_bar = dvector![1e-2, 2e-2, 5e-2, 3e-3];
        let fc = sys.f_power_cell(&p_bar, &w).unwrap();
        let p = a.expand_transmitter_psd(&p_bar);
        let fload = sys.f_load(&w, &p).unwrap();
        // cell 1 carries both DLs: p̄ Σ f_l / ν′
        let expected = p_bar[3] * (fload[2] + fload[3]) / (w[2] + w[3]);
        assert!((fc[3] - expected).abs() <= 1e-12 * expected);
        assert_eq!(fc[2], EMPTY_CELL_DEMAND);
        // both zero-branch forms agree with the small-power limit
        let mut z = p_bar.clone();
        z[3] = 0.0;
        let at_zero = sys.f_power_cell(&z, &w).unwrap()[3];
        z[3] = 1e-13;
        let near = sys.f_power_cell(&z, &w).unwrap()[3];
        assert!(((near - at_zero) / at_zero).abs() < 1e-6);
    }
}
