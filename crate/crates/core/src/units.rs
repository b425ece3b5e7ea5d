//! Conversions between the logarithmic units used at I/O boundaries and the
//! linear SI units used everywhere else.

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    linear_to_db(w) + 30.0
}

/// Pathloss in dB to linear channel gain.
pub fn pathloss_to_gain(pl_db: f64) -> f64 {
    db_to_linear(-pl_db)
}

pub fn gain_to_pathloss(gain: f64) -> f64 {
    -linear_to_db(gain)
}
