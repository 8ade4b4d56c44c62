//! Seeded synthetic crash corpus for desk-scale runs.
//!
//! Each positive is placed on the same route as an earlier negative, inside
//! that route's pairing thresholds, and its narrative carries a causal cue
//! (queue, debris, rubbernecking, emergency response). Negatives are spread
//! uniformly and use distractor wording, some of it indicator-bearing.

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CrashRecord, Direction, Label, LabelSource, RoadwayClass};
use crate::stfilter::ThresholdConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub positive_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_first_year")]
    pub first_year: i32,
    #[serde(default = "default_last_year")]
    pub last_year: i32,
}

fn default_first_year() -> i32 {
    2015
}

fn default_last_year() -> i32 {
    2022
}

impl SynthSpec {
    pub fn new(n: usize, positive_fraction: f64, seed: u64) -> Self {
        SynthSpec {
            n,
            positive_fraction,
            seed,
            first_year: default_first_year(),
            last_year: default_last_year(),
        }
    }

    pub fn positives(&self) -> usize {
        let k = (self.n as f64 * self.positive_fraction).round() as usize;
        // every positive needs an earlier negative to follow
        if self.n > 1 {
            k.min(self.n - 1)
        } else {
            k
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("n must be > 0")]
    Empty,
    #[error("positive_fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("first_year {0} is after last_year {1}")]
    BadYears(i32, i32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<CrashRecord>,
    pub labels: Vec<Label>,
}

#[derive(Clone, Copy)]
enum Axis {
    NorthSouth,
    EastWest,
}

struct Route {
    id: &'static str,
    class: RoadwayClass,
    axis: Axis,
    origin: (f64, f64),
    length_mi: f64,
}

const ROUTES: [Route; 7] = [
    Route {
        id: "I-64",
        class: RoadwayClass::AccessControlled,
        axis: Axis::EastWest,
        origin: (38.05, -85.90),
        length_mi: 190.0,
    },
    Route {
        id: "I-75",
        class: RoadwayClass::AccessControlled,
        axis: Axis::NorthSouth,
        origin: (36.60, -84.10),
        length_mi: 190.0,
    },
    Route {
        id: "I-65",
        class: RoadwayClass::AccessControlled,
        axis: Axis::NorthSouth,
        origin: (36.60, -86.00),
        length_mi: 135.0,
    },
    Route {
        id: "US-60",
        class: RoadwayClass::Other,
        axis: Axis::EastWest,
        origin: (37.90, -87.50),
        length_mi: 150.0,
    },
    Route {
        id: "US-27",
        class: RoadwayClass::Other,
        axis: Axis::NorthSouth,
        origin: (36.60, -84.60),
        length_mi: 120.0,
    },
    Route {
        id: "KY-80",
        class: RoadwayClass::Other,
        axis: Axis::EastWest,
        origin: (37.10, -86.80),
        length_mi: 100.0,
    },
    Route {
        id: "KY-9",
        class: RoadwayClass::Other,
        axis: Axis::NorthSouth,
        origin: (38.50, -84.20),
        length_mi: 60.0,
    },
];

impl Route {
    fn position(&self, milepoint: f64) -> (f64, f64) {
        let (lat, lon) = self.origin;
        match self.axis {
            Axis::NorthSouth => (lat + milepoint / 69.0, lon),
            Axis::EastWest => (lat, lon + milepoint / (69.17 * lat.to_radians().cos())),
        }
    }

    fn directions(&self) -> [Direction; 2] {
        match self.axis {
            Axis::NorthSouth => [Direction::N, Direction::S],
            Axis::EastWest => [Direction::E, Direction::W],
        }
    }
}

/// Causal-cue narratives. `{mm}` is a mile marker; every template carries a
/// crash-reference indicator. The bool marks rubbernecking (opposite lanes).
const POSITIVE: [(&str, bool); 8] = [
    ("Unit 1 was stopped in traffic due to an injury accident ahead when Unit 2 failed to stop and struck Unit 1 in the rear.", false),
    ("Traffic was backed up from a previous crash near mile marker {mm}. Unit 2 did not see the queue and rear-ended Unit 1.", false),
    ("Unit 1 struck debris left in the roadway from an earlier collision and lost control, striking the barrier wall.", false),
    ("Driver of Unit 1 stated they slowed to look at the wreck in the opposite lanes and Unit 2 struck Unit 1 from behind.", true),
    ("Unit 1 swerved to avoid emergency vehicles responding to a 10-46 ahead and left the roadway.", false),
    ("Vehicles were slowing for a prior crash scene at mile marker {mm}. Unit 2 braked hard and Unit 3 struck Unit 2 in the queue.", false),
    ("Unit 1 was in stopped traffic caused by an accident at mile marker {mm} and was struck by Unit 2.", false),
    ("Unit 2 was distracted by the crash response on the shoulder and drifted into Unit 1, which was slowing in traffic ahead.", true),
];

/// Distractors: `{rn}` is a report number. Some carry indicators without
/// describing a crash caused by an earlier one.
const NEGATIVE: [&str; 9] = [
    "Unit 1 struck a deer that entered the roadway and came to rest on the shoulder.",
    "Unit 1 was traveling behind a construction truck. The truck slowed to turn into a driveway and Unit 1 struck it in the rear.",
    "Unit 1 sideswiped Unit 2 while changing lanes, then had a secondary collision with the guardrail.",
    "Unit 1 left the roadway and struck a utility pole. Driver stated they fell asleep. Crash report # {rn} completed.",
    "Unit 1 hydroplaned on the wet pavement and spun into the median cable barrier.",
    "Unit 2 failed to yield from the stop sign and struck Unit 1 broadside at the intersection.",
    "Unit 1 was backing out of a private drive and struck Unit 2. Minor accident, no injuries.",
    "Unit 1 blew a tire and ran off the road into a ditch. Wrecker called for removal.",
    "Unit 1 crossed the center line on a curve and struck Unit 2 head on. Case # {rn}.",
];

const FILLER: [&str; 8] = [
    "Roadway was dry.",
    "Roadway was wet.",
    "Weather was clear.",
    "Weather was overcast with light rain.",
    "Unit 1 was towed from the scene.",
    "No injuries were reported.",
    "Driver of Unit 1 was transported to the hospital.",
    "Both drivers were wearing seat belts.",
];

struct Draft {
    route: usize,
    at: NaiveDateTime,
    milepoint: f64,
    direction: Direction,
    positive: bool,
    narrative: String,
}

fn fill(template: &str, rng: &mut ChaCha8Rng, milepoint: f64) -> String {
    template
        .replace("{mm}", &format!("{:.0}", milepoint.max(1.0)))
        .replace(
            "{rn}",
            &format!("{}", rng.random_range(20_000_000u64..99_999_999)),
        )
}

fn narrative(core: String, rng: &mut ChaCha8Rng) -> String {
    let mut parts = vec![core];
    let extra = rng.random_range(1..=2);
    for _ in 0..extra {
        parts.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
    }
    parts.join(" ")
}

/// Generates a deterministic corpus; ids are assigned in time order.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<SyntheticCorpus, SynthError> {
    if spec.n == 0 {
        return Err(SynthError::Empty);
    }
    if !(spec.positive_fraction > 0.0 && spec.positive_fraction < 1.0) {
        return Err(SynthError::BadFraction(spec.positive_fraction));
    }
    if spec.first_year > spec.last_year {
        return Err(SynthError::BadYears(spec.first_year, spec.last_year));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let thresholds = ThresholdConfig::default();
    let start = NaiveDate::from_ymd_opt(spec.first_year, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let end = NaiveDate::from_ymd_opt(spec.last_year + 1, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let span_min = (end - start).num_minutes();

    let mut is_positive = vec![false; spec.n];
    let k = spec.positives();
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(k) {
        is_positive[i] = true;
    }

    let mut drafts: Vec<Draft> = Vec::with_capacity(spec.n);
    for &positive in is_positive.iter().filter(|p| !**p) {
        let route = rng.random_range(0..ROUTES.len());
        let r = &ROUTES[route];
        // leave room after the end of the span for a following positive
        let at = start + Duration::minutes(rng.random_range(0..span_min - 24 * 60));
        let milepoint = rng.random_range(0.0..r.length_mi);
        let direction = r.directions()[rng.random_range(0..2)];
        let core = fill(
            NEGATIVE[rng.random_range(0..NEGATIVE.len())],
            &mut rng,
            milepoint,
        );
        drafts.push(Draft {
            route,
            at,
            milepoint,
            direction,
            positive,
            narrative: narrative(core, &mut rng),
        });
    }
    let negatives = drafts.len();
    for _ in 0..k {
        let (route, at, milepoint, direction, opposite, core) = if negatives == 0 {
            let route = rng.random_range(0..ROUTES.len());
            let (t, opp) = POSITIVE[rng.random_range(0..POSITIVE.len())];
            let mp = rng.random_range(0.0..ROUTES[route].length_mi);
            let at = start + Duration::minutes(rng.random_range(0..span_min));
            (
                route,
                at,
                mp,
                ROUTES[route].directions()[0],
                opp,
                fill(t, &mut rng, mp),
            )
        } else {
            let primary = &drafts[rng.random_range(0..negatives)];
            let r = &ROUTES[primary.route];
            let limit = thresholds.for_class(r.class);
            let gap = rng.random_range(5.0..0.8 * limit.max_gap_min);
            let offset =
                rng.random_range(-0.8 * limit.max_distance_mi..0.8 * limit.max_distance_mi);
            let mp = (primary.milepoint + offset).clamp(0.0, r.length_mi);
            let (t, opp) = POSITIVE[rng.random_range(0..POSITIVE.len())];
            let core = fill(t, &mut rng, primary.milepoint);
            (
                primary.route,
                primary.at + Duration::seconds((gap * 60.0) as i64),
                mp,
                primary.direction,
                opp,
                core,
            )
        };
        let direction = if opposite {
            direction.opposite().unwrap_or(direction)
        } else {
            direction
        };
        drafts.push(Draft {
            route,
            at,
            milepoint,
            direction,
            positive: true,
            narrative: narrative(core, &mut rng),
        });
    }

    let mut idx: Vec<usize> = (0..drafts.len()).collect();
    idx.sort_by(|&a, &b| drafts[a].at.cmp(&drafts[b].at).then(a.cmp(&b)));
    let labeled_at: DateTime<Utc> = end.and_utc();
    let mut records = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for (seq, &i) in idx.iter().enumerate() {
        let d = &drafts[i];
        let r = &ROUTES[d.route];
        let record_id = format!("S{:06}", seq + 1);
        // about 1% arrive without any location
        let located = rng.random_range(0.0..1.0) >= 0.01;
        let (lat, lon) = r.position(d.milepoint);
        let round6 = |x: f64| (x * 1e6).round() / 1e6;
        records.push(CrashRecord {
            record_id: record_id.clone(),
            occurred_at: d.at,
            route_id: r.id.to_string(),
            milepoint: located.then(|| (d.milepoint * 1000.0).round() / 1000.0),
            latitude: located.then(|| round6(lat)),
            longitude: located.then(|| round6(lon)),
            roadway_class: r.class,
            direction: d.direction,
            // coded field is a noisy copy of the truth
            coded_secondary: d.positive != (rng.random_range(0.0..1.0) < 0.12),
            narrative: d.narrative.clone(),
        });
        labels.push(Label {
            record_id,
            is_secondary: d.positive,
            source: LabelSource::Import,
            note: None,
            labeled_at,
        });
    }
    Ok(SyntheticCorpus { records, labels })
}
