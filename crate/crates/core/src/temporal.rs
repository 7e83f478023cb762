//! Temporal context encoding for a single staypoint.

use std::f64::consts::TAU;

use chrono::{DateTime, Datelike, Timelike};

use crate::data::StayPoint;

pub const TEMPORAL_DIM: usize = 42;

pub const HOUR_OFFSET: usize = 0;
pub const DOW_OFFSET: usize = 24;
pub const PERIOD_OFFSET: usize = 31;
pub const WEEKEND_INDEX: usize = 35;
pub const DURATION_INDEX: usize = 36;
pub const SEASON_INDEX: usize = 37;
pub const HOUR_SIN: usize = 38;
pub const HOUR_COS: usize = 39;
pub const DOW_SIN: usize = 40;
pub const DOW_COS: usize = 41;

/// Night, morning, afternoon, evening.
pub const PERIOD_BOUNDARIES: [u32; 4] = [0, 6, 12, 18];

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalVector(pub [f64; TEMPORAL_DIM]);

impl TemporalVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn hour_index(&self) -> usize {
        one_hot_index(&self.0[HOUR_OFFSET..HOUR_OFFSET + 24])
    }

    pub fn dow_index(&self) -> usize {
        one_hot_index(&self.0[DOW_OFFSET..DOW_OFFSET + 7])
    }

    pub fn period_index(&self) -> usize {
        one_hot_index(&self.0[PERIOD_OFFSET..PERIOD_OFFSET + 4])
    }
}

fn one_hot_index(block: &[f64]) -> usize {
    block.iter().position(|&v| v == 1.0).expect("one-hot block has a hot entry")
}

/// Encodes the local start time and dwell of a staypoint. Local time is
/// `t_start + tz_offset_hours` with a fixed offset.
pub fn encode_temporal(sp: &StayPoint, tz_offset_hours: f64) -> TemporalVector {
    let offset = (tz_offset_hours * 3600.0).round() as i64;
    let local = DateTime::from_timestamp(sp.t_start + offset, 0)
        .expect("timestamp within chrono range")
        .naive_utc();

    let mut v = [0.0; TEMPORAL_DIM];
    let hour = local.hour() as usize;
    let dow = local.weekday().num_days_from_monday() as usize;
    v[HOUR_OFFSET + hour] = 1.0;
    v[DOW_OFFSET + dow] = 1.0;
    let period = PERIOD_BOUNDARIES.iter().rposition(|&b| hour as u32 >= b).unwrap_or(0);
    v[PERIOD_OFFSET + period] = 1.0;
    v[WEEKEND_INDEX] = if dow >= 5 { 1.0 } else { 0.0 };
    v[DURATION_INDEX] = (sp.duration().max(0) as f64 / 86_400.0).min(1.0);
    v[SEASON_INDEX] = season(local.month());

    let hour_frac = hour as f64 + local.minute() as f64 / 60.0 + local.second() as f64 / 3600.0;
    let (s, c) = (TAU * hour_frac / 24.0).sin_cos();
    v[HOUR_SIN] = s;
    v[HOUR_COS] = c;
    let (s, c) = (TAU * dow as f64 / 7.0).sin_cos();
    v[DOW_SIN] = s;
    v[DOW_COS] = c;
    TemporalVector(v)
}

/// Meteorological season scaled to {0, 1/3, 2/3, 1} for winter..autumn.
fn season(month: u32) -> f64 {
    match month {
        12 | 1 | 2 => 0.0,
        3..=5 => 1.0 / 3.0,
        6..=8 => 2.0 / 3.0,
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn at(y: i32, m: u32, d: u32, h: u32, min: u32, dur: i64) -> StayPoint {
        let t = NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, min, 0).unwrap().and_utc().timestamp();
        StayPoint { individual_id: "x".into(), lat: 0.0, lon: 0.0, t_start: t, t_end: t + dur }
    }

    #[test]
    fn monday_midnight() {
        // 2024-01-01 is a Monday
        let v = encode_temporal(&at(2024, 1, 1, 0, 0, 0), 0.0);
        assert_eq!(v.hour_index(), 0);
        assert_eq!(v.dow_index(), 0);
        assert_eq!(v.period_index(), 0);
        assert_eq!(v.0[WEEKEND_INDEX], 0.0);
        assert_eq!(v.0[DURATION_INDEX], 0.0);
        assert_eq!(v.0[HOUR_SIN], 0.0);
        assert_eq!(v.0[HOUR_COS], 1.0);
    }

    #[test]
    fn saturday_noon() {
        let v = encode_temporal(&at(2024, 1, 6, 12, 0, 0), 0.0);
        assert_eq!(v.0[WEEKEND_INDEX], 1.0);
        assert!(v.0[HOUR_SIN].abs() < 1e-12);
        assert!((v.0[HOUR_COS] + 1.0).abs() < 1e-12);
        assert_eq!(v.period_index(), 2);
    }

    #[test]
    fn wednesday_evening_in_july() {
        // 2024-07-17 is a Wednesday
        let v = encode_temporal(&at(2024, 7, 17, 18, 30, 6 * 3600), 0.0);
        assert_eq!(v.hour_index(), 18);
        assert_eq!(v.dow_index(), 2);
        assert_eq!(v.period_index(), 3);
        assert_eq!(v.0[DURATION_INDEX], 0.25);
        assert_eq!(v.0[SEASON_INDEX], 2.0 / 3.0);
        assert_eq!(v.0[WEEKEND_INDEX], 0.0);
    }

    #[test]
    fn offset_shifts_local_clock() {
        // 08:00 UTC is 00:00 at UTC-8
        let v = encode_temporal(&at(2024, 1, 2, 8, 0, 0), -8.0);
        assert_eq!(v.hour_index(), 0);
        assert_eq!(v.dow_index(), 1);
    }

    #[test]
    fn duration_clips_at_one() {
        let v = encode_temporal(&at(2024, 3, 1, 0, 0, 3 * 86_400), 0.0);
        assert_eq!(v.0[DURATION_INDEX], 1.0);
        assert_eq!(v.0[SEASON_INDEX], 1.0 / 3.0);
    }

    proptest! {
        #[test]
        fn invariants_hold(t in 0i64..2_000_000_000, dur in 0i64..200_000, tz in -12i32..14) {
            let sp = StayPoint { individual_id: "p".into(), lat: 0.0, lon: 0.0, t_start: t, t_end: t + dur };
            let v = encode_temporal(&sp, tz as f64);
            for (lo, len) in [(HOUR_OFFSET, 24), (DOW_OFFSET, 7), (PERIOD_OFFSET, 4)] {
                let block = &v.0[lo..lo + len];
                prop_assert_eq!(block.iter().filter(|&&x| x == 1.0).count(), 1);
                prop_assert_eq!(block.iter().filter(|&&x| x == 0.0).count(), len - 1);
            }
            prop_assert!((0.0..=1.0).contains(&v.0[DURATION_INDEX]));
            prop_assert!([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].contains(&v.0[SEASON_INDEX]));
            prop_assert!((v.0[HOUR_SIN].powi(2) + v.0[HOUR_COS].powi(2) - 1.0).abs() < 1e-9);
            prop_assert!((v.0[DOW_SIN].powi(2) + v.0[DOW_COS].powi(2) - 1.0).abs() < 1e-9);

            // the cyclic pair points into the one-hot hour bucket
            let angle = v.0[HOUR_SIN].atan2(v.0[HOUR_COS]).rem_euclid(TAU);
            let hour_frac = angle / TAU * 24.0;
            let recovered = (hour_frac + 1e-9).floor() as usize % 24;
            prop_assert_eq!(recovered, v.hour_index());

            prop_assert_eq!(encode_temporal(&sp, tz as f64), v);
        }

        #[test]
        fn weekly_periodicity_within_a_season(day in 0i64..60, secs in 0i64..86_400, dur in 0i64..10_000) {
            // June 1st 2024 onward: the +7 day shift stays inside summer
            let base = NaiveDate::from_ymd_opt(2024, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
            let t = base + day * 86_400 + secs;
            let a = StayPoint { individual_id: "p".into(), lat: 0.0, lon: 0.0, t_start: t, t_end: t + dur };
            let b = StayPoint { t_start: t + 7 * 86_400, t_end: t + 7 * 86_400 + dur, ..a.clone() };
            prop_assert_eq!(encode_temporal(&a, 0.0), encode_temporal(&b, 0.0));
        }
    }
}
