//! Reference implementations written directly from the rules, without the
//! library's sweep or sparse shortcuts.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crashqc_core::corpus::{CrashRecord, Direction, RoadwayClass};

pub fn base_time() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2021, 3, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
}

/// Dense corpus: few routes, a short time span and coarse milepoints so
/// many pairs sit on exact threshold boundaries.
pub fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<CrashRecord> {
    let routes = ["I-64", "I-75", "US-60", "KY-9"];
    let dirs = [
        Direction::N,
        Direction::S,
        Direction::E,
        Direction::W,
        Direction::Unknown,
    ];
    let span_min = rng.random_range(200..5000);
    (0..n)
        .map(|i| {
            let mp = (rng.random_range(0..400) as f64) * 0.05;
            let lat = 37.0 + rng.random_range(0..200) as f64 * 0.0025;
            let lon = -85.0 + rng.random_range(0..200) as f64 * 0.0025;
            let (milepoint, latitude, longitude) = match rng.random_range(0..10) {
                0 => (None, None, None),
                1 | 2 => (None, Some(lat), Some(lon)),
                3 => (Some(mp), None, None),
                _ => (Some(mp), Some(lat), Some(lon)),
            };
            CrashRecord {
                record_id: format!("R{i:05}"),
                occurred_at: base_time() + Duration::minutes(rng.random_range(0..span_min)),
                route_id: routes[rng.random_range(0..routes.len())].to_string(),
                milepoint,
                latitude,
                longitude,
                roadway_class: if rng.random_bool(0.5) {
                    RoadwayClass::AccessControlled
                } else {
                    RoadwayClass::Other
                },
                direction: dirs[rng.random_range(0..dirs.len())],
                coded_secondary: false,
                narrative: String::new(),
            }
        })
        .collect()
}

fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let r = 3958.8_f64;
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().min(1.0).asin()
}

fn opposite(a: Direction, b: Direction) -> bool {
    matches!(
        (a, b),
        (Direction::N, Direction::S)
            | (Direction::S, Direction::N)
            | (Direction::E, Direction::W)
            | (Direction::W, Direction::E)
    )
}

/// Every ordered (primary, secondary) pair meeting the rules, with distance.
pub fn brute_force_pairs(
    records: &[CrashRecord],
    access: (f64, f64),
    other: (f64, f64),
    include_opposite: bool,
) -> BTreeMap<(String, String), f64> {
    let mut out = BTreeMap::new();
    for p in records {
        for s in records {
            if p.record_id == s.record_id || p.route_id != s.route_id {
                continue;
            }
            let gap = (s.occurred_at - p.occurred_at).num_seconds() as f64 / 60.0;
            let (max_d, max_t) = match s.roadway_class {
                RoadwayClass::AccessControlled => access,
                RoadwayClass::Other => other,
            };
            if gap <= 0.0 || gap > max_t {
                continue;
            }
            if !include_opposite && opposite(p.direction, s.direction) {
                continue;
            }
            let d = match (
                p.milepoint,
                s.milepoint,
                p.latitude,
                p.longitude,
                s.latitude,
                s.longitude,
            ) {
                (Some(a), Some(b), ..) => (a - b).abs(),
                (_, _, Some(la), Some(lo), Some(lb), Some(lob)) => haversine((la, lo), (lb, lob)),
                _ => continue,
            };
            if d <= max_d {
                out.insert((p.record_id.clone(), s.record_id.clone()), d);
            }
        }
    }
    out
}

/// Random documents over a small alphabet of words.
pub fn random_docs(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let words = [
        "unit", "struck", "queue", "traffic", "crash", "debris", "deer", "rear", "ahead", "lane",
        "10-46", "wet", "injury", "shoulder", "barrier", "slowed", "truck", "median",
    ];
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..30);
            (0..len)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
