//! Synthetic scenario generation and historical-load bookkeeping.
//!
//! Macros sit on a rectangular grid; picos are dropped near the edge of a
//! randomly chosen macro cell; users are uniform over the covered area.
//! Pathloss follows log-distance models with optional Rayleigh fading.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    Association, BaseStation, BsKind, OverlapModel, OverlapScheme, PathlossTables, Provenance,
    Scenario, ScenarioFile, UserTerminal, SCENARIO_SCHEMA_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceClass {
    pub dl_mbps: f64,
    pub ul_mbps: f64,
}

fn default_service_classes() -> Vec<ServiceClass> {
    [
        (300.0, 50.0),
        (25.0, 50.0),
        (50.0, 25.0),
        (10.0, 10.0),
        (0.01, 0.01),
    ]
    .into_iter()
    .map(|(dl_mbps, ul_mbps)| ServiceClass { dl_mbps, ul_mbps })
    .collect()
}

fn default_class_mix() -> Vec<f64> {
    vec![1.0; 5]
}

fn default_annulus() -> [f64; 2] {
    [0.7, 0.9]
}

fn default_rb_count() -> usize {
    25
}

fn default_rb_bandwidth() -> f64 {
    180e3
}

fn default_noise() -> f64 {
    -121.45
}

fn default_macro_power() -> f64 {
    43.0
}

fn default_pico_power() -> f64 {
    30.0
}

fn default_ue_power() -> f64 {
    22.0
}

fn default_true() -> bool {
    true
}

/// Generator configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub macro_rows: usize,
    pub macro_cols: usize,
    pub inter_site_distance_m: f64,
    pub pico_count: usize,
    pub ue_count: usize,
    /// Pico distance from its macro as fractions of the macro cell radius.
    #[serde(default = "default_annulus")]
    pub pico_annulus: [f64; 2],
    #[serde(default = "default_rb_count")]
    pub rb_count: usize,
    #[serde(default = "default_rb_bandwidth")]
    pub rb_bandwidth_hz: f64,
    #[serde(default = "default_noise")]
    pub noise_dbm_per_rb: f64,
    #[serde(default = "default_macro_power")]
    pub macro_power_dbm: f64,
    #[serde(default = "default_pico_power")]
    pub pico_power_dbm: f64,
    #[serde(default = "default_ue_power")]
    pub ue_power_dbm: f64,
    #[serde(default = "default_service_classes")]
    pub service_classes: Vec<ServiceClass>,
    /// Relative sampling weights of the service classes.
    #[serde(default = "default_class_mix")]
    pub class_mix: Vec<f64>,
    #[serde(default = "default_true")]
    pub rayleigh_fading: bool,
}

impl ScenarioConfig {
    /// Defaults for every optional key.
    pub fn new(macro_rows: usize, macro_cols: usize, pico_count: usize, ue_count: usize) -> Self {
        Self {
            macro_rows,
            macro_cols,
            inter_site_distance_m: 500.0,
            pico_count,
            ue_count,
            pico_annulus: default_annulus(),
            rb_count: default_rb_count(),
            rb_bandwidth_hz: default_rb_bandwidth(),
            noise_dbm_per_rb: default_noise(),
            macro_power_dbm: default_macro_power(),
            pico_power_dbm: default_pico_power(),
            ue_power_dbm: default_ue_power(),
            service_classes: default_service_classes(),
            class_mix: default_class_mix(),
            rayleigh_fading: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.macro_rows == 0 || self.macro_cols == 0 {
            return bad("macro_rows and macro_cols must be at least 1");
        }
        if self.ue_count == 0 {
            return bad("ue_count must be at least 1");
        }
        if !(self.inter_site_distance_m > 0.0) || !self.inter_site_distance_m.is_finite() {
            return bad("inter_site_distance_m must be positive");
        }
        let [lo, hi] = self.pico_annulus;
        if !(0.0..=hi).contains(&lo) || !hi.is_finite() || hi <= 0.0 {
            return bad("pico_annulus must satisfy 0 <= lo <= hi, hi > 0");
        }
        if self.rb_count == 0 || !(self.rb_bandwidth_hz > 0.0) {
            return bad("rb_count and rb_bandwidth_hz must be positive");
        }
        if self.service_classes.is_empty() || self.service_classes.len() != self.class_mix.len() {
            return bad("class_mix needs one weight per service class");
        }
        if self
            .service_classes
            .iter()
            .any(|c| !(c.dl_mbps > 0.0) || !(c.ul_mbps > 0.0))
        {
            return bad("service class demands must be positive");
        }
        if self
            .class_mix
            .iter()
            .any(|&w| !(w >= 0.0) || !w.is_finite())
            || self.class_mix.iter().sum::<f64>() <= 0.0
        {
            return bad("class_mix weights must be nonnegative with a positive sum");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (defaults filled in).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn macro_count(&self) -> usize {
        self.macro_rows * self.macro_cols
    }
}

/// Macro BS-to-UE pathloss in dB at `d_m` meters.
pub fn macro_pathloss_db(d_m: f64) -> f64 {
    128.1 + 37.6 * (d_m.max(MIN_BS_UE_DISTANCE_M) / 1000.0).log10()
}

pub fn pico_pathloss_db(d_m: f64) -> f64 {
    140.7 + 36.7 * (d_m.max(MIN_BS_UE_DISTANCE_M) / 1000.0).log10()
}

/// BS-to-BS and UE-to-UE pathloss: free space at 1 m plus exponent 3.
pub fn peer_pathloss_db(d_m: f64) -> f64 {
    38.46 + 30.0 * d_m.max(MIN_PEER_DISTANCE_M).log10()
}

pub const MIN_BS_UE_DISTANCE_M: f64 = 10.0;
pub const MIN_PEER_DISTANCE_M: f64 = 1.0;

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Applies an exponential power-fading draw to a pathloss, keeping gain ≤ 1.
fn faded(pl_db: f64, rng: &mut ChaCha8Rng, fading: bool) -> f64 {
    if !fading {
        return pl_db;
    }
    let power: f64 = rng.sample(Exp1);
    (pl_db - 10.0 * power.log10()).max(0.0)
}

/// Draws a scenario. Identical `(config, seed)` give bit-identical output.
pub fn generate(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let isd = config.inter_site_distance_m;
    let radius = isd / 2.0;

    let mut bss = Vec::with_capacity(config.macro_count() + config.pico_count);
    for r in 0..config.macro_rows {
        for c in 0..config.macro_cols {
            bss.push(BaseStation {
                x: c as f64 * isd,
                y: r as f64 * isd,
                kind: BsKind::Macro,
                max_power_dbm: config.macro_power_dbm,
            });
        }
    }
    let [lo, hi] = config.pico_annulus;
    for _ in 0..config.pico_count {
        let m = rng.random_range(0..config.macro_count());
        let rho = radius * rng.random_range(lo..=hi);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        bss.push(BaseStation {
            x: bss[m].x + rho * phi.cos(),
            y: bss[m].y + rho * phi.sin(),
            kind: BsKind::Pico,
            max_power_dbm: config.pico_power_dbm,
        });
    }

    let x_max = (config.macro_cols - 1) as f64 * isd + radius;
    let y_max = (config.macro_rows - 1) as f64 * isd + radius;
    let classes =
        WeightedIndex::new(&config.class_mix).map_err(|e| Error::Config(e.to_string()))?;
    let mut ues = Vec::with_capacity(config.ue_count);
    for _ in 0..config.ue_count {
        let x = rng.random_range(-radius..=x_max);
        let y = rng.random_range(-radius..=y_max);
        let class = classes.sample(&mut rng);
        let sc = &config.service_classes[class];
        ues.push(UserTerminal {
            x,
            y,
            service_class: class,
            max_power_dbm: config.ue_power_dbm,
            ul_demand_mbps: sc.ul_mbps,
            dl_demand_mbps: sc.dl_mbps,
        });
    }

    let fading = config.rayleigh_fading;
    let bs_ue = bss
        .iter()
        .map(|b| {
            ues.iter()
                .map(|u| {
                    let d = dist((b.x, b.y), (u.x, u.y));
                    let pl = match b.kind {
                        BsKind::Macro => macro_pathloss_db(d),
                        BsKind::Pico => pico_pathloss_db(d),
                    };
                    faded(pl, &mut rng, fading)
                })
                .collect()
        })
        .collect();
    let pos_bs: Vec<_> = bss.iter().map(|b| (b.x, b.y)).collect();
    let pos_ue: Vec<_> = ues.iter().map(|u| (u.x, u.y)).collect();
    let bs_bs = symmetric_table(&pos_bs, &mut rng, fading);
    let ue_ue = symmetric_table(&pos_ue, &mut rng, fading);

    let file = ScenarioFile {
        schema_version: SCENARIO_SCHEMA_VERSION,
        provenance: Some(Provenance::new(Some(seed), Some(config.hash()))),
        rb_count: config.rb_count,
        rb_bandwidth_hz: config.rb_bandwidth_hz,
        noise_dbm_per_rb: config.noise_dbm_per_rb,
        base_stations: bss,
        users: ues,
        pathloss_db: PathlossTables {
            bs_ue,
            bs_bs,
            ue_ue,
        },
    };
    Scenario::try_from(file)
}

fn symmetric_table(pos: &[(f64, f64)], rng: &mut ChaCha8Rng, fading: bool) -> Vec<Vec<f64>> {
    let n = pos.len();
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let pl = faded(peer_pathloss_db(dist(pos[i], pos[j])), rng, fading);
            t[i][j] = pl;
            t[j][i] = pl;
        }
    }
    t
}

/// Per-cell UL and DL loads observed at one point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSnapshot {
    pub nu_ul: Vec<f64>,
    pub nu_dl: Vec<f64>,
}

impl LoadSnapshot {
    pub fn from_allocation(assoc: &Association, w: &nalgebra::DVector<f64>) -> Self {
        let (nu_ul, nu_dl) = assoc.cell_loads(w);
        Self { nu_ul, nu_dl }
    }
}

/// Time-averages a load history into an overlap model of the given scheme.
pub fn estimate_overlap(history: &[LoadSnapshot], scheme: OverlapScheme) -> Result<OverlapModel> {
    if scheme == OverlapScheme::None {
        return Ok(OverlapModel::none());
    }
    if history.is_empty() {
        log::warn!("empty load history; falling back to full overlap");
        return Ok(OverlapModel::none());
    }
    let n = history[0].nu_ul.len();
    if history
        .iter()
        .any(|s| s.nu_ul.len() != n || s.nu_dl.len() != n)
    {
        return Err(Error::Model(
            "load snapshots cover different numbers of cells".into(),
        ));
    }
    let t = history.len() as f64;
    let avg = |get: fn(&LoadSnapshot) -> &Vec<f64>| -> Vec<f64> {
        (0..n)
            .map(|i| (history.iter().map(|s| get(s)[i]).sum::<f64>() / t).clamp(0.0, 1.0))
            .collect()
    };
    OverlapModel::new(scheme, avg(|s| &s.nu_ul), avg(|s| &s.nu_dl))
}
