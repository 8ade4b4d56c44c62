//! Spatiotemporal candidate pairing.
//!
//! A pair (A, B) is a candidate when B strictly follows A in time on the same
//! route and both the distance and the time gap fall within the thresholds of
//! B's roadway class. Comparisons are inclusive.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{CrashRecord, Direction, RoadwayClass};

/// Mean earth radius in statute miles.
pub const EARTH_RADIUS_MI: f64 = 3958.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub max_distance_mi: f64,
    pub max_gap_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub access_controlled: Threshold,
    pub other_roads: Threshold,
    pub include_opposite_direction: bool,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            access_controlled: Threshold {
                max_distance_mi: 2.0,
                max_gap_min: 100.0,
            },
            other_roads: Threshold {
                max_distance_mi: 0.5,
                max_gap_min: 40.0,
            },
            include_opposite_direction: true,
        }
    }
}

impl ThresholdConfig {
    pub fn for_class(&self, class: RoadwayClass) -> Threshold {
        match class {
            RoadwayClass::AccessControlled => self.access_controlled,
            RoadwayClass::Other => self.other_roads,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, t) in [
            ("access_controlled", self.access_controlled),
            ("other_roads", self.other_roads),
        ] {
            if !(t.max_distance_mi > 0.0) || !(t.max_gap_min > 0.0) {
                return Err(format!("{name} thresholds must be positive"));
            }
        }
        Ok(())
    }

    fn widest_gap_min(&self) -> f64 {
        self.access_controlled
            .max_gap_min
            .max(self.other_roads.max_gap_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirectionRelation {
    Same,
    Opposite,
    Unknown,
}

impl DirectionRelation {
    pub fn between(a: Direction, b: Direction) -> Self {
        if a == Direction::Unknown || b == Direction::Unknown {
            DirectionRelation::Unknown
        } else if a == b {
            DirectionRelation::Same
        } else if a.opposite() == Some(b) {
            DirectionRelation::Opposite
        } else {
            // perpendicular headings on one route: no usable relation
            DirectionRelation::Unknown
        }
    }
}

impl std::fmt::Display for DirectionRelation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DirectionRelation::Same => "Same",
            DirectionRelation::Opposite => "Opposite",
            DirectionRelation::Unknown => "Unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub primary_id: String,
    pub secondary_id: String,
    pub distance_mi: f64,
    pub gap_min: f64,
    pub direction_relation: DirectionRelation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub records: usize,
    pub unfilterable: usize,
    /// Pairs within the time window whose coordinates could not be compared
    /// (one side has only a milepoint, the other only lat/lon).
    pub incomparable: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DistanceError {
    #[error("records {0} and {1} share no usable coordinates")]
    NoUsableCoordinates(String, String),
}

/// Great-circle distance in miles between two lat/lon points.
pub fn haversine_mi(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MI * h.sqrt().min(1.0).asin()
}

/// Milepoint difference when both records carry one, else great-circle distance.
pub fn distance_between(a: &CrashRecord, b: &CrashRecord) -> Result<f64, DistanceError> {
    if let (Some(ma), Some(mb)) = (a.milepoint, b.milepoint) {
        return Ok((ma - mb).abs());
    }
    match (a.lat_lon(), b.lat_lon()) {
        (Some(pa), Some(pb)) => Ok(haversine_mi(pa, pb)),
        _ => Err(DistanceError::NoUsableCoordinates(
            a.record_id.clone(),
            b.record_id.clone(),
        )),
    }
}

fn gap_minutes(a: &CrashRecord, b: &CrashRecord) -> f64 {
    (b.occurred_at - a.occurred_at).num_seconds() as f64 / 60.0
}

/// Tests one ordered pair against the thresholds. `None` means not a candidate.
pub fn evaluate_pair(
    primary: &CrashRecord,
    secondary: &CrashRecord,
    config: &ThresholdConfig,
) -> Option<Result<CandidatePair, DistanceError>> {
    if primary.route_id != secondary.route_id || primary.record_id == secondary.record_id {
        return None;
    }
    let gap = gap_minutes(primary, secondary);
    let limit = config.for_class(secondary.roadway_class);
    if !(gap > 0.0) || gap > limit.max_gap_min {
        return None;
    }
    let relation = DirectionRelation::between(primary.direction, secondary.direction);
    if relation == DirectionRelation::Opposite && !config.include_opposite_direction {
        return None;
    }
    let distance = match distance_between(primary, secondary) {
        Ok(d) => d,
        Err(e) => return Some(Err(e)),
    };
    (distance <= limit.max_distance_mi).then(|| {
        Ok(CandidatePair {
            primary_id: primary.record_id.clone(),
            secondary_id: secondary.record_id.clone(),
            distance_mi: distance,
            gap_min: gap,
            direction_relation: relation,
        })
    })
}

/// Builds every candidate pair using a time-sorted sweep per route.
///
/// Output is sorted by (primary_id, secondary_id).
pub fn pair_candidates(
    records: &[CrashRecord],
    config: &ThresholdConfig,
) -> (Vec<CandidatePair>, PairReport) {
    let mut report = PairReport {
        records: records.len(),
        ..Default::default()
    };
    let mut routes: BTreeMap<&str, Vec<&CrashRecord>> = BTreeMap::new();
    for r in records {
        if r.is_filterable() {
            routes.entry(r.route_id.as_str()).or_default().push(r);
        } else {
            report.unfilterable += 1;
        }
    }
    let window = config.widest_gap_min();
    let mut pairs = Vec::new();
    for group in routes.values_mut() {
        group.sort_by(|a, b| {
            a.occurred_at
                .cmp(&b.occurred_at)
                .then_with(|| a.record_id.cmp(&b.record_id))
        });
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                if gap_minutes(a, b) > window {
                    break;
                }
                match evaluate_pair(a, b, config) {
                    Some(Ok(p)) => pairs.push(p),
                    Some(Err(_)) => report.incomparable += 1,
                    None => {}
                }
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.primary_id
            .cmp(&b.primary_id)
            .then_with(|| a.secondary_id.cmp(&b.secondary_id))
    });
    report.pairs = pairs.len();
    (pairs, report)
}

pub fn write_pairs_csv<W: Write>(pairs: &[CandidatePair], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "primary_id",
        "secondary_id",
        "distance_mi",
        "gap_min",
        "direction_relation",
    ])?;
    for p in pairs {
        w.write_record([
            p.primary_id.clone(),
            p.secondary_id.clone(),
            format!("{:.4}", p.distance_mi),
            format!("{:.2}", p.gap_min),
            p.direction_relation.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
