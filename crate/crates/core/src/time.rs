//! Hour-resolution timestamps.

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{CoreError, Result};

/// An instant truncated to the hour. Serializes as `YYYY-MM-DDTHH`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HourStamp(NaiveDateTime);

impl HourStamp {
    pub fn new(year: i32, month: u32, day: u32, hour: u32) -> Result<Self> {
        let date = NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| CoreError::InvalidArgument(format!("bad date {year}-{month}-{day}")))?;
        let dt = date
            .and_hms_opt(hour, 0, 0)
            .ok_or_else(|| CoreError::InvalidArgument(format!("bad hour {hour}")))?;
        Ok(Self(dt))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let dt = NaiveDateTime::parse_from_str(&format!("{s}:00:00"), "%Y-%m-%dT%H:%M:%S")
            .map_err(|e| CoreError::InvalidArgument(format!("bad timestamp {s:?}: {e}")))?;
        Ok(Self(dt))
    }

    pub fn plus_hours(self, hours: i64) -> Self {
        Self(self.0 + chrono::Duration::hours(hours))
    }

    /// Whole hours from `earlier` to `self`.
    pub fn hours_since(self, earlier: HourStamp) -> i64 {
        (self.0 - earlier.0).num_hours()
    }

    pub fn year(self) -> i32 {
        self.0.year()
    }

    /// Month in 1..=12.
    pub fn month(self) -> u32 {
        self.0.month()
    }

    /// Hour of day in 0..=23.
    pub fn hour(self) -> u32 {
        self.0.hour()
    }
}

impl fmt::Display for HourStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%dT%H"))
    }
}

impl Serialize for HourStamp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for HourStamp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        HourStamp::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        let t = HourStamp::parse("2020-01-03T07").unwrap();
        assert_eq!(t.to_string(), "2020-01-03T07");
        assert_eq!(t.year(), 2020);
        assert_eq!(t.month(), 1);
        assert_eq!(t.hour(), 7);
    }

    #[test]
    fn hour_arithmetic_crosses_days() {
        let t = HourStamp::new(2019, 12, 31, 23).unwrap();
        let u = t.plus_hours(2);
        assert_eq!(u.to_string(), "2020-01-01T01");
        assert_eq!(u.hours_since(t), 2);
    }
}
