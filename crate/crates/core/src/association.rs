//! Link association policies: coupled access (CoUD) and the two decoupled
//! variants, by cell-selection offset (DeUD_O) and by pathloss (DeUD_P).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Association, BsKind, Scenario};

/// UL offsets of the policy sweep, in dB.
pub const SWEEP_OFFSETS_DB: [f64; 27] = [
    0.0, 1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0, 19.0, 21.0, 23.0, 25.0, 27.0, 29.0, 31.0,
    33.0, 35.0, 37.0, 39.0, 41.0, 43.0, 45.0, 47.0, 49.0, 51.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Policy {
    Coud,
    /// UL offset added to the RSRP of every pico cell; macros and DL get none.
    DeudO {
        offset_db: f64,
    },
    DeudP,
}

impl Policy {
    /// Label of the policy this sweep entry coincides with under the default
    /// 13 dB macro/pico power gap.
    pub fn equivalent_tag(&self) -> Option<&'static str> {
        match *self {
            Policy::DeudO { offset_db } if offset_db == 0.0 => Some("coud"),
            Policy::DeudO { offset_db } if offset_db == 13.0 => Some("deud-p"),
            _ => None,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Coud => f.write_str("coud"),
            Policy::DeudO { offset_db } => write!(f, "deud-o:{offset_db}"),
            Policy::DeudP => f.write_str("deud-p"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "coud" => Ok(Policy::Coud),
            "deud-p" | "deud_p" => Ok(Policy::DeudP),
            other => {
                let offset = other
                    .strip_prefix("deud-o:")
                    .or_else(|| other.strip_prefix("deud_o:"))
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown policy '{s}' (expected coud, deud-p or deud-o:OFFSET)"
                        ))
                    })?;
                let offset_db: f64 = offset
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid DeUD_O offset '{offset}'")))?;
                if !offset_db.is_finite() {
                    return Err(Error::Config(format!("invalid DeUD_O offset '{offset}'")));
                }
                Ok(Policy::DeudO { offset_db })
            }
        }
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for Policy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Per-RB reference signal power in dBm of every base station.
fn reference_power_dbm(scenario: &Scenario) -> Vec<f64> {
    let per_rb = 10.0 * (scenario.rb_count() as f64).log10();
    scenario
        .base_stations()
        .iter()
        .map(|b| b.max_power_dbm - per_rb)
        .collect()
}

/// RSRP in dBm, N x K: per-RB reference power minus pathloss.
pub fn rsrp(scenario: &Scenario) -> DMatrix<f64> {
    let reference = reference_power_dbm(scenario);
    let pl = &scenario.file().pathloss_db.bs_ue;
    DMatrix::from_fn(scenario.bs_count(), scenario.ue_count(), |n, k| {
        reference[n] - pl[n][k]
    })
}

/// Index of the largest metric; ties go to the lowest index.
fn argmax(n: usize, metric: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = metric(0);
    for i in 1..n {
        let v = metric(i);
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn associate(policy: &Policy, scenario: &Scenario) -> Association {
    let n = scenario.bs_count();
    let k = scenario.ue_count();
    let pl = &scenario.file().pathloss_db.bs_ue;
    let rsrp = rsrp(scenario);
    let dl: Vec<usize> = (0..k).map(|u| argmax(n, |b| rsrp[(b, u)])).collect();
    let ul = match *policy {
        Policy::Coud => dl.clone(),
        Policy::DeudO { offset_db } => {
            let per_rb = 10.0 * (scenario.rb_count() as f64).log10();
            // offset folded into the reference power so that a pico offset
            // equal to the power gap reproduces the macro metric bit-exactly
            let biased: Vec<f64> = scenario
                .base_stations()
                .iter()
                .map(|b| match b.kind {
                    BsKind::Pico => b.max_power_dbm + offset_db - per_rb,
                    BsKind::Macro => b.max_power_dbm - per_rb,
                })
                .collect();
            (0..k)
                .map(|u| argmax(n, |b| biased[b] - pl[b][u]))
                .collect()
        }
        Policy::DeudP => (0..k).map(|u| argmax(n, |b| -pl[b][u])).collect(),
    };
    Association::new(n, ul, dl).expect("argmax indices are in range")
}

/// The DeUD_O policies of the offset sweep, in order.
pub fn policy_sweep() -> Vec<Policy> {
    SWEEP_OFFSETS_DB
        .iter()
        .map(|&offset_db| Policy::DeudO { offset_db })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaseStation, UserTerminal};

    fn scenario(kinds: &[(BsKind, f64)], pl: Vec<Vec<f64>>) -> Scenario {
        let n = kinds.len();
        let k = pl[0].len();
        let h0 = DMatrix::from_fn(n, k, |i, j| crate::units::pathloss_to_gain(pl[i][j]));
        let bss = kinds
            .iter()
            .map(|&(kind, dbm)| BaseStation {
                x: 0.0,
                y: 0.0,
                kind,
                max_power_dbm: dbm,
            })
            .collect();
        let ues = (0..k)
            .map(|_| UserTerminal {
                x: 0.0,
                y: 0.0,
                service_class: 0,
                max_power_dbm: 22.0,
                ul_demand_mbps: 1.0,
                dl_demand_mbps: 1.0,
            })
            .collect();
        let mut s = Scenario::from_gains(
            bss,
            ues,
            &h0,
            &DMatrix::from_element(n, n, 1e-10),
            &DMatrix::from_element(k, k, 1e-10),
            25,
            180e3,
            1e-15,
        )
        .unwrap();
        // keep the exact dB values for metric comparisons
        let mut f = s.file().clone();
        f.pathloss_db.bs_ue = pl;
        s = Scenario::try_from(f).unwrap();
        s
    }

    #[test]
    fn macro_wins_by_power_gap_at_equal_gain() {
        let s = scenario(
            &[(BsKind::Macro, 43.0), (BsKind::Pico, 30.0)],
            vec![vec![100.0], vec![100.0]],
        );
        let r = rsrp(&s);
        assert!((r[(0, 0)] - r[(1, 0)] - 13.0).abs() < 1e-12);
        // reference power per RB
        assert!((r[(0, 0)] - (43.0 - 10.0 * 25f64.log10() - 100.0)).abs() < 1e-12);
    }

    #[test]
    fn doubling_gain_adds_three_db() {
        let mut s = scenario(&[(BsKind::Macro, 43.0)], vec![vec![100.0]]);
        let before = rsrp(&s)[(0, 0)];
        let mut f = s.file().clone();
        f.pathloss_db.bs_ue[0][0] =
            crate::units::gain_to_pathloss(2.0 * crate::units::pathloss_to_gain(100.0));
        s = Scenario::try_from(f).unwrap();
        assert!((rsrp(&s)[(0, 0)] - before - 3.0103).abs() < 1e-4);
    }

    #[test]
    fn single_bs_serves_everyone() {
        let s = scenario(&[(BsKind::Pico, 30.0)], vec![vec![90.0, 120.0, 140.0]]);
        for p in [
            Policy::Coud,
            Policy::DeudP,
            Policy::DeudO { offset_db: 7.0 },
        ] {
            let a = associate(&p, &s);
            assert!(a.serving_ul().iter().chain(a.serving_dl()).all(|&b| b == 0));
        }
    }

    #[test]
    fn policy_identities() {
        let s = scenario(
            &[
                (BsKind::Macro, 43.0),
                (BsKind::Pico, 30.0),
                (BsKind::Pico, 30.0),
            ],
            vec![
                vec![110.0, 95.0, 120.0, 101.0],
                vec![100.0, 99.0, 118.0, 130.0],
                vec![104.0, 115.0, 113.0, 100.5],
            ],
        );
        assert_eq!(
            associate(&Policy::DeudO { offset_db: 0.0 }, &s),
            associate(&Policy::Coud, &s)
        );
        assert_eq!(
            associate(&Policy::DeudO { offset_db: 13.0 }, &s),
            associate(&Policy::DeudP, &s)
        );
        assert!(associate(&Policy::DeudP, &s).is_decoupled());
        assert_eq!(
            associate(&Policy::DeudP, &s).serving_dl(),
            associate(&Policy::Coud, &s).serving_dl()
        );
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let s = scenario(
            &[(BsKind::Pico, 30.0), (BsKind::Pico, 30.0)],
            vec![vec![100.0], vec![100.0]],
        );
        for p in [
            Policy::Coud,
            Policy::DeudP,
            Policy::DeudO { offset_db: 5.0 },
        ] {
            let a = associate(&p, &s);
            assert_eq!(a.serving_ul(), &[0]);
            assert_eq!(a.serving_dl(), &[0]);
        }
    }

    #[test]
    fn sweep_offsets() {
        let sweep = policy_sweep();
        assert_eq!(sweep.len(), 27);
        assert_eq!(sweep[0], Policy::DeudO { offset_db: 0.0 });
        assert_eq!(sweep[0].equivalent_tag(), Some("coud"));
        assert!(sweep.iter().any(|p| p.equivalent_tag() == Some("deud-p")));
        assert_eq!(sweep[26], Policy::DeudO { offset_db: 51.0 });
    }

    #[test]
    fn policy_strings_round_trip() {
        for s in ["coud", "deud-p", "deud-o:13", "deud-o:0.5"] {
            let p: Policy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("deud-x".parse::<Policy>().is_err());
        assert!("deud-o:abc".parse::<Policy>().is_err());
    }
}
