//! Network topology, channel gains and the link gain coupling matrices.
//!
//! Links are indexed `0..2K`: uplinks first (`l = k`), downlinks second
//! (`l = K + k`), for user `k`. Gains are kept linear internally; the
//! serialized scenario carries pathloss in dB, powers in dBm and demands in
//! Mbit/s.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{dbm_to_watts, gain_to_pathloss, pathloss_to_gain, watts_to_dbm};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BsKind {
    Macro,
    Pico,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub x: f64,
    pub y: f64,
    pub kind: BsKind,
    /// Maximum total transmit power over the whole band.
    pub max_power_dbm: f64,
}

impl BaseStation {
    pub fn max_power_w(&self) -> f64 {
        dbm_to_watts(self.max_power_dbm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTerminal {
    pub x: f64,
    pub y: f64,
    pub service_class: usize,
    /// Maximum uplink transmit power over the whole band.
    pub max_power_dbm: f64,
    pub ul_demand_mbps: f64,
    pub dl_demand_mbps: f64,
}

impl UserTerminal {
    pub fn max_power_w(&self) -> f64 {
        dbm_to_watts(self.max_power_dbm)
    }
}

/// Reproducibility record embedded in generated artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(seed: Option<u64>, config_hash: Option<String>) -> Self {
        Self {
            seed,
            config_hash,
            tool_version: crate::VERSION.to_string(),
        }
    }
}

/// Pathloss tables in dB, row-major. Self entries of the square tables are
/// stored (as 0 dB) but never read by the interference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathlossTables {
    /// N rows (base stations) by K columns (users).
    pub bs_ue: Vec<Vec<f64>>,
    pub bs_bs: Vec<Vec<f64>>,
    pub ue_ue: Vec<Vec<f64>>,
}

/// On-disk form of a [`Scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub rb_count: usize,
    pub rb_bandwidth_hz: f64,
    pub noise_dbm_per_rb: f64,
    pub base_stations: Vec<BaseStation>,
    pub users: Vec<UserTerminal>,
    pub pathloss_db: PathlossTables,
}

/// A validated network snapshot with derived linear-scale quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioFile", into = "ScenarioFile")]
pub struct Scenario {
    file: ScenarioFile,
    h0: DMatrix<f64>,
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    demands: DVector<f64>,
    noise_psd: f64,
}

fn table_to_gains(name: &str, t: &[Vec<f64>], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if t.len() != rows || t.iter().any(|r| r.len() != cols) {
        return Err(Error::Model(format!(
            "pathloss table {name} must be {rows}x{cols}"
        )));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, row) in t.iter().enumerate() {
        for (j, &pl) in row.iter().enumerate() {
            if !pl.is_finite() || pl < 0.0 {
                return Err(Error::Model(format!(
                    "pathloss {name}[{i}][{j}] = {pl} dB; gains must lie in (0, 1]"
                )));
            }
            m[(i, j)] = pathloss_to_gain(pl);
        }
    }
    Ok(m)
}

fn check_symmetric(name: &str, t: &[Vec<f64>]) -> Result<()> {
    for i in 0..t.len() {
        for j in (i + 1)..t.len() {
            if t[i][j] != t[j][i] {
                return Err(Error::Model(format!(
                    "pathloss table {name} is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

impl TryFrom<ScenarioFile> for Scenario {
    type Error = Error;

    fn try_from(file: ScenarioFile) -> Result<Self> {
        if file.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Model(format!(
                "unsupported scenario schema version {} (expected {SCENARIO_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let n = file.base_stations.len();
        let k = file.users.len();
        if n == 0 || k == 0 {
            return Err(Error::Model(
                "need at least one base station and one user".into(),
            ));
        }
        if file.rb_count == 0 {
            return Err(Error::Model("rb_count must be positive".into()));
        }
        if !(file.rb_bandwidth_hz > 0.0) || !file.rb_bandwidth_hz.is_finite() {
            return Err(Error::Model("rb_bandwidth_hz must be positive".into()));
        }
        if !file.noise_dbm_per_rb.is_finite() {
            return Err(Error::Model("noise_dbm_per_rb must be finite".into()));
        }
        for (i, bs) in file.base_stations.iter().enumerate() {
            if !bs.max_power_dbm.is_finite() {
                return Err(Error::Model(format!(
                    "base station {i} has non-finite power"
                )));
            }
        }
        let mut demands = DVector::zeros(2 * k);
        for (i, ue) in file.users.iter().enumerate() {
            if !ue.max_power_dbm.is_finite() {
                return Err(Error::Model(format!("user {i} has non-finite power")));
            }
            for d in [ue.ul_demand_mbps, ue.dl_demand_mbps] {
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::Model(format!(
                        "user {i}: demands must be strictly positive"
                    )));
                }
            }
            demands[i] = ue.ul_demand_mbps * 1e6;
            demands[k + i] = ue.dl_demand_mbps * 1e6;
        }
        let pl = &file.pathloss_db;
        let h0 = table_to_gains("bs_ue", &pl.bs_ue, n, k)?;
        let h1 = table_to_gains("bs_bs", &pl.bs_bs, n, n)?;
        let h2 = table_to_gains("ue_ue", &pl.ue_ue, k, k)?;
        check_symmetric("bs_bs", &pl.bs_bs)?;
        check_symmetric("ue_ue", &pl.ue_ue)?;
        let noise_psd = dbm_to_watts(file.noise_dbm_per_rb);
        Ok(Self {
            file,
            h0,
            h1,
            h2,
            demands,
            noise_psd,
        })
    }
}

impl From<Scenario> for ScenarioFile {
    fn from(s: Scenario) -> Self {
        s.file
    }
}

fn gains_to_table(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| gain_to_pathloss(m[(i, j)]))
                .collect()
        })
        .collect()
}

impl Scenario {
    /// Builds a scenario from linear gains, as used by hand-constructed
    /// instances. Self entries of `h1`/`h2` are ignored and stored as unit gain.
    #[allow(clippy::too_many_arguments)]
    pub fn from_gains(
        base_stations: Vec<BaseStation>,
        users: Vec<UserTerminal>,
        h0: &DMatrix<f64>,
        h1: &DMatrix<f64>,
        h2: &DMatrix<f64>,
        rb_count: usize,
        rb_bandwidth_hz: f64,
        noise_psd_w: f64,
    ) -> Result<Self> {
        let mut h1 = h1.clone();
        let mut h2 = h2.clone();
        h1.fill_diagonal(1.0);
        h2.fill_diagonal(1.0);
        for m in [h0, &h1, &h2] {
            if m.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
                return Err(Error::Model("channel gains must lie in (0, 1]".into()));
            }
        }
        let file = ScenarioFile {
            schema_version: SCENARIO_SCHEMA_VERSION,
            provenance: None,
            rb_count,
            rb_bandwidth_hz,
            noise_dbm_per_rb: watts_to_dbm(noise_psd_w),
            base_stations,
            users,
            pathloss_db: PathlossTables {
                bs_ue: gains_to_table(h0),
                bs_bs: gains_to_table(&h1),
                ue_ue: gains_to_table(&h2),
            },
        };
        Self::try_from(file)
    }

    pub fn file(&self) -> &ScenarioFile {
        &self.file
    }

    pub fn base_stations(&self) -> &[BaseStation] {
        &self.file.base_stations
    }

    pub fn users(&self) -> &[UserTerminal] {
        &self.file.users
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.file.provenance.as_ref()
    }

    pub fn bs_count(&self) -> usize {
        self.file.base_stations.len()
    }

    pub fn ue_count(&self) -> usize {
        self.file.users.len()
    }

    pub fn link_count(&self) -> usize {
        2 * self.ue_count()
    }

    /// BS-to-UE gains, N x K.
    pub fn h0(&self) -> &DMatrix<f64> {
        &self.h0
    }

    /// BS-to-BS gains, N x N.
    pub fn h1(&self) -> &DMatrix<f64> {
        &self.h1
    }

    /// UE-to-UE gains, K x K.
    pub fn h2(&self) -> &DMatrix<f64> {
        &self.h2
    }

    /// Required bit rates in bit/s, uplink block first.
    pub fn demands(&self) -> &DVector<f64> {
        &self.demands
    }

    pub fn rb_count(&self) -> usize {
        self.file.rb_count
    }

    pub fn rb_bandwidth(&self) -> f64 {
        self.file.rb_bandwidth_hz
    }

    /// Noise power per RB in watts.
    pub fn noise_psd(&self) -> f64 {
        self.noise_psd
    }

    pub fn with_noise_dbm(&self, noise_dbm_per_rb: f64) -> Result<Self> {
        let mut file = self.file.clone();
        file.noise_dbm_per_rb = noise_dbm_per_rb;
        Self::try_from(file)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.file.provenance = Some(provenance);
        self
    }

    /// Per-transmitter power limits `[p_max^UL ; q_max^DL]` in watts.
    pub fn power_limits(&self) -> crate::interference::PowerLimits {
        let v = self
            .users()
            .iter()
            .map(UserTerminal::max_power_w)
            .chain(self.base_stations().iter().map(BaseStation::max_power_w));
        crate::interference::PowerLimits::new(DVector::from_iterator(
            self.ue_count() + self.bs_count(),
            v,
        ))
        .expect("validated powers are finite")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ul,
    Dl,
}

/// Serving base station of every uplink and downlink.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    bs_count: usize,
    ul: Vec<usize>,
    dl: Vec<usize>,
}

impl Association {
    pub fn new(bs_count: usize, ul: Vec<usize>, dl: Vec<usize>) -> Result<Self> {
        if ul.len() != dl.len() || ul.is_empty() {
            return Err(Error::Model(
                "UL and DL serving maps must have equal, nonzero length".into(),
            ));
        }
        if let Some(&b) = ul.iter().chain(dl.iter()).find(|&&b| b >= bs_count) {
            return Err(Error::Model(format!(
                "serving BS index {b} out of range (N = {bs_count})"
            )));
        }
        Ok(Self { bs_count, ul, dl })
    }

    pub fn bs_count(&self) -> usize {
        self.bs_count
    }

    pub fn ue_count(&self) -> usize {
        self.ul.len()
    }

    pub fn serving_ul(&self) -> &[usize] {
        &self.ul
    }

    pub fn serving_dl(&self) -> &[usize] {
        &self.dl
    }

    /// Serving BS of link `l` in the stacked `[UL ; DL]` indexing.
    pub fn link_bs(&self, l: usize) -> usize {
        let k = self.ue_count();
        if l < k {
            self.ul[l]
        } else {
            self.dl[l - k]
        }
    }

    pub fn link_direction(&self, l: usize) -> Direction {
        if l < self.ue_count() {
            Direction::Ul
        } else {
            Direction::Dl
        }
    }

    pub fn is_decoupled(&self) -> bool {
        self.ul != self.dl
    }

    fn one_hot(&self, serving: &[usize]) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.bs_count, serving.len());
        for (k, &b) in serving.iter().enumerate() {
            a[(b, k)] = 1.0;
        }
        a
    }

    pub fn a_ul(&self) -> DMatrix<f64> {
        self.one_hot(&self.ul)
    }

    pub fn a_dl(&self) -> DMatrix<f64> {
        self.one_hot(&self.dl)
    }

    /// `[A_UL | A_DL]`, N x 2K.
    pub fn a(&self) -> DMatrix<f64> {
        let k = self.ue_count();
        let mut a = DMatrix::zeros(self.bs_count, 2 * k);
        a.columns_mut(0, k).copy_from(&self.a_ul());
        a.columns_mut(k, k).copy_from(&self.a_dl());
        a
    }

    /// Transmitter-to-link map `[I_K | 0 ; 0 | A_DL]`, (K+N) x 2K.
    pub fn a_ext(&self) -> DMatrix<f64> {
        let k = self.ue_count();
        let mut a = DMatrix::zeros(k + self.bs_count, 2 * k);
        a.view_mut((0, 0), (k, k)).fill_with_identity();
        a.view_mut((k, k), (self.bs_count, k))
            .copy_from(&self.a_dl());
        a
    }

    /// Per-transmitter to per-link PSD map `p = Λ p̄`, 2K x (K+N).
    pub fn lambda_map(&self) -> DMatrix<f64> {
        self.a_ext().transpose()
    }

    /// `Λ p̄` without forming the matrix.
    pub fn expand_transmitter_psd(&self, p_bar: &DVector<f64>) -> DVector<f64> {
        let k = self.ue_count();
        DVector::from_fn(2 * k, |l, _| {
            if l < k {
                p_bar[l]
            } else {
                p_bar[k + self.dl[l - k]]
            }
        })
    }

    /// Per-cell loads in each direction, `(A_UL w_UL, A_DL w_DL)`.
    pub fn cell_loads(&self, w: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let k = self.ue_count();
        let mut ul = vec![0.0; self.bs_count];
        let mut dl = vec![0.0; self.bs_count];
        for i in 0..k {
            ul[self.ul[i]] += w[i];
            dl[self.dl[i]] += w[k + i];
        }
        (ul, dl)
    }

    /// Number of downlinks served by each cell.
    pub fn dl_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.bs_count];
        for &b in &self.dl {
            c[b] += 1;
        }
        c
    }
}

/// Link gain coupling between all `2K` links.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingModel {
    /// Full coupling `[A_UL' H0, A_UL' H1 A_DL ; H2, H0' A_DL]`.
    pub v: DMatrix<f64>,
    /// `v` with intra-cell entries removed, optionally overlap-adjusted.
    pub v_tilde: DMatrix<f64>,
    /// Direct gains `v[l, l]`.
    pub d_diag: DVector<f64>,
    /// Noise power per RB, identical at every receiver.
    pub noise: f64,
}

impl CouplingModel {
    pub fn link_count(&self) -> usize {
        self.d_diag.len()
    }

    pub fn sigma_vec(&self) -> DVector<f64> {
        DVector::from_element(self.link_count(), self.noise)
    }

    /// `D⁻¹ (Ṽ x + σ)` for a per-link transmit vector `x = diag(w) p`.
    pub fn normalized_interference(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut i = &self.v_tilde * x;
        for l in 0..i.len() {
            i[l] = (i[l] + self.noise) / self.d_diag[l];
        }
        i
    }

    pub fn with_noise(&self, noise: f64) -> Self {
        Self {
            noise,
            ..self.clone()
        }
    }
}

/// Assembles `V`, `Ṽ` and `D` for a scenario under an association.
pub fn build_coupling(scenario: &Scenario, assoc: &Association) -> Result<CouplingModel> {
    let k = scenario.ue_count();
    if assoc.ue_count() != k || assoc.bs_count() != scenario.bs_count() {
        return Err(Error::Model(format!(
            "association is {}x{} but scenario has N = {}, K = {}",
            assoc.bs_count(),
            assoc.ue_count(),
            scenario.bs_count(),
            k
        )));
    }
    let (h0, h1, h2) = (scenario.h0(), scenario.h1(), scenario.h2());
    let (bu, bd) = (assoc.serving_ul(), assoc.serving_dl());
    let mut v = DMatrix::zeros(2 * k, 2 * k);
    for r in 0..k {
        for c in 0..k {
            // receiver of UL r is BS bu[r]; receiver of DL r is UE r
            v[(r, c)] = h0[(bu[r], c)];
            v[(r, k + c)] = h1[(bu[r], bd[c])];
            v[(k + r, c)] = h2[(r, c)];
            v[(k + r, k + c)] = h0[(bd[c], r)];
        }
    }
    let mut v_tilde = v.clone();
    for r in 0..2 * k {
        for c in 0..2 * k {
            if assoc.link_bs(r) == assoc.link_bs(c) {
                v_tilde[(r, c)] = 0.0;
            }
        }
    }
    // A user's own uplink and downlink are scheduled orthogonally.
    for r in 0..k {
        v_tilde[(k + r, r)] = 0.0;
    }
    let d_diag = v.diagonal();
    Ok(CouplingModel {
        v,
        v_tilde,
        d_diag,
        noise: scenario.noise_psd(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlapScheme {
    /// Full overlap: every factor is 1.
    #[default]
    None,
    CellPairwise,
    CellSpecific,
}

/// Historical per-cell loads and the scheme used to turn them into
/// UL/DL overlap factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapModel {
    pub scheme: OverlapScheme,
    pub nu_ul: Vec<f64>,
    pub nu_dl: Vec<f64>,
}

/// An overlap factor whose raw value fell outside `[0, 1]` or whose
/// denominator vanished.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapDiagnostic {
    pub victim: Direction,
    pub aggressor: Direction,
    pub victim_cell: usize,
    pub aggressor_cell: usize,
    pub raw: f64,
    pub applied: f64,
    pub reason: &'static str,
}

impl OverlapModel {
    pub fn none() -> Self {
        Self {
            scheme: OverlapScheme::None,
            nu_ul: Vec::new(),
            nu_dl: Vec::new(),
        }
    }

    pub fn new(scheme: OverlapScheme, nu_ul: Vec<f64>, nu_dl: Vec<f64>) -> Result<Self> {
        if nu_ul.len() != nu_dl.len() {
            return Err(Error::Model(
                "UL and DL load histories differ in length".into(),
            ));
        }
        if nu_ul
            .iter()
            .chain(&nu_dl)
            .any(|&x| !(0.0..=1.0).contains(&x))
        {
            return Err(Error::Model("historical loads must lie in [0, 1]".into()));
        }
        Ok(Self {
            scheme,
            nu_ul,
            nu_dl,
        })
    }

    fn nu(&self, d: Direction, cell: usize) -> f64 {
        match d {
            Direction::Ul => self.nu_ul[cell],
            Direction::Dl => self.nu_dl[cell],
        }
    }

    /// Raw cell-pairwise factor: probability that an RB of cell `i` in
    /// direction `x` sees a transmission of cell `j` in direction `y`.
    /// `None` when the victim load is zero.
    pub fn pairwise_raw(&self, x: Direction, y: Direction, i: usize, j: usize) -> Option<f64> {
        let nu_i = self.nu(x, i);
        let nu_j = self.nu(y, j);
        if nu_i <= 0.0 {
            return None;
        }
        Some(if x != y {
            ((nu_j + nu_i - 1.0) / nu_i).max(0.0)
        } else {
            // as published this is >= 1; the clamp below makes it 1
            (nu_j / nu_i).max(1.0)
        })
    }

    /// Factor actually applied, clamped to `[0, 1]`, plus a diagnostic when
    /// clamping or a zero denominator occurred.
    pub fn factor(
        &self,
        x: Direction,
        y: Direction,
        i: usize,
        j: usize,
    ) -> (f64, Option<OverlapDiagnostic>) {
        let diag = |raw: f64, applied: f64, reason| OverlapDiagnostic {
            victim: x,
            aggressor: y,
            victim_cell: i,
            aggressor_cell: j,
            raw,
            applied,
            reason,
        };
        match self.scheme {
            OverlapScheme::None => (1.0, None),
            OverlapScheme::CellSpecific if x != y => (self.nu(x, i) * self.nu(y, j), None),
            _ => match self.pairwise_raw(x, y, i, j) {
                None => (0.0, Some(diag(f64::NAN, 0.0, "zero victim load"))),
                Some(raw) if raw > 1.0 => (1.0, Some(diag(raw, 1.0, "clamped to 1"))),
                Some(raw) => (raw, None),
            },
        }
    }
}

/// Scales the inter-cell entries of `Ṽ` by the overlap factors of the
/// selected scheme. Returns the adjusted model and any clamping diagnostics.
pub fn apply_overlap(
    coupling: &CouplingModel,
    overlap: &OverlapModel,
    assoc: &Association,
) -> Result<(CouplingModel, Vec<OverlapDiagnostic>)> {
    if overlap.scheme == OverlapScheme::None {
        return Ok((coupling.clone(), Vec::new()));
    }
    let n = assoc.bs_count();
    if overlap.nu_ul.len() != n {
        return Err(Error::Model(format!(
            "overlap model covers {} cells, association has {n}",
            overlap.nu_ul.len()
        )));
    }
    let dirs = [Direction::Ul, Direction::Dl];
    // factor[x][y][i * n + j]
    let mut table = vec![vec![vec![1.0; n * n]; 2]; 2];
    let mut diagnostics = Vec::new();
    for (xi, &x) in dirs.iter().enumerate() {
        for (yi, &y) in dirs.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let (f, d) = overlap.factor(x, y, i, j);
                    table[xi][yi][i * n + j] = f;
                    if let Some(d) = d {
                        log::debug!("overlap factor {:?}<-{:?} ({i},{j}): {}", x, y, d.reason);
                        diagnostics.push(d);
                    }
                }
            }
        }
    }
    let mut out = coupling.clone();
    let links = coupling.link_count();
    let dir_index = |l: usize| usize::from(assoc.link_direction(l) == Direction::Dl);
    for r in 0..links {
        for c in 0..links {
            let (i, j) = (assoc.link_bs(r), assoc.link_bs(c));
            if i != j {
                out.v_tilde[(r, c)] *= table[dir_index(r)][dir_index(c)][i * n + j];
            }
        }
    }
    Ok((out, diagnostics))
}
