//! Crash-reference indicator filter for candidate narratives.

use std::collections::HashMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::CrashRecord;
use crate::stfilter::CandidatePair;

pub const DEFAULT_TERMS: [&str; 5] = ["crash", "accident", "incident", "collision", "wreck"];
/// Dispatch codes 10-46 through 10-49, optional spaces around the hyphen.
pub const DEFAULT_CODE_PATTERN: &str = r"\b10\s*-\s*4[6-9]\b";
/// A run of 8+ digits, or "case #" / "report #" followed by digits.
pub const DEFAULT_REFERENCE_PATTERN: &str = r"(?i)\b\d{8,}\b|\b(?:case|report)\s*#\s*\d+";

/// Serializable rule configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndicatorRules {
    pub literal_terms: Vec<String>,
    pub code_pattern: String,
    pub reference_pattern: String,
}

impl Default for IndicatorRules {
    fn default() -> Self {
        IndicatorRules {
            literal_terms: DEFAULT_TERMS.iter().map(|s| s.to_string()).collect(),
            code_pattern: DEFAULT_CODE_PATTERN.into(),
            reference_pattern: DEFAULT_REFERENCE_PATTERN.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KwFilterError {
    #[error("literal_terms must not be empty")]
    NoTerms,
    #[error("invalid {which} pattern: {source}")]
    Pattern {
        which: &'static str,
        #[source]
        source: regex::Error,
    },
    #[error("pair references unknown record {0}")]
    DanglingRecord(String),
}

/// Compiled [`IndicatorRules`].
#[derive(Debug, Clone)]
pub struct IndicatorRuleSet {
    literal: Regex,
    code: Regex,
    reference: Regex,
}

impl IndicatorRuleSet {
    pub fn compile(rules: &IndicatorRules) -> Result<Self, KwFilterError> {
        let terms: Vec<String> = rules
            .literal_terms
            .iter()
            .map(|t| t.trim())
            .filter(|t| !t.is_empty())
            .map(regex::escape)
            .collect();
        if terms.is_empty() {
            return Err(KwFilterError::NoTerms);
        }
        // word boundaries on both sides; plural "s"/"es" still counts as the term
        let literal = format!(r"(?i)\b(?:{})(?:e?s)?\b", terms.join("|"));
        let compile = |which, pat: &str| {
            Regex::new(pat).map_err(|source| KwFilterError::Pattern { which, source })
        };
        Ok(IndicatorRuleSet {
            literal: compile("literal", &literal)?,
            code: compile("code", &rules.code_pattern)?,
            reference: compile("reference", &rules.reference_pattern)?,
        })
    }

    /// Every indicator hit in text order, as it appears in the narrative.
    pub fn matches(&self, narrative: &str) -> Vec<String> {
        let mut hits: Vec<(usize, &str)> = Vec::new();
        for re in [&self.literal, &self.code, &self.reference] {
            hits.extend(re.find_iter(narrative).map(|m| (m.start(), m.as_str())));
        }
        hits.sort_by_key(|(start, _)| *start);
        hits.into_iter().map(|(_, s)| s.to_string()).collect()
    }

    pub fn passes(&self, narrative: &str) -> (bool, Vec<String>) {
        let matched = self.matches(narrative);
        (!matched.is_empty(), matched)
    }
}

impl Default for IndicatorRuleSet {
    fn default() -> Self {
        Self::compile(&IndicatorRules::default()).expect("default rules compile")
    }
}

pub fn passes_indicator(narrative: &str, rules: &IndicatorRuleSet) -> (bool, Vec<String>) {
    rules.passes(narrative)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub removed: usize,
}

impl FilterReport {
    pub fn removal_fraction(&self) -> Option<f64> {
        (self.input > 0).then(|| self.removed as f64 / self.input as f64)
    }
}

/// Keeps pairs whose candidate secondary narrative carries an indicator.
pub fn filter_pairs(
    pairs: &[CandidatePair],
    corpus: &HashMap<&str, &CrashRecord>,
    rules: &IndicatorRuleSet,
) -> Result<(Vec<CandidatePair>, FilterReport), KwFilterError> {
    let mut verdict_cache: HashMap<&str, bool> = HashMap::new();
    let mut kept = Vec::new();
    for p in pairs {
        let pass = match verdict_cache.get(p.secondary_id.as_str()) {
            Some(&v) => v,
            None => {
                let rec = corpus
                    .get(p.secondary_id.as_str())
                    .ok_or_else(|| KwFilterError::DanglingRecord(p.secondary_id.clone()))?;
                let v = rules.passes(&rec.narrative).0;
                verdict_cache.insert(p.secondary_id.as_str(), v);
                v
            }
        };
        if pass {
            kept.push(p.clone());
        }
    }
    let report = FilterReport {
        input: pairs.len(),
        kept: kept.len(),
        removed: pairs.len() - kept.len(),
    };
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injury_accident_ahead_passes() {
        let rules = IndicatorRuleSet::default();
        let (ok, hits) = passes_indicator(
            "traffic was moving very slow due to an injury accident ahead",
            &rules,
        );
        assert!(ok);
        assert_eq!(hits, vec!["accident"]);
    }

    #[test]
    fn deer_strike_has_no_indicator() {
        let rules = IndicatorRuleSet::default();
        assert_eq!(
            passes_indicator(
                "vehicle struck a deer and came to rest in the median",
                &rules
            ),
            (false, vec![])
        );
    }

    #[test]
    fn dispatch_codes_match() {
        let rules = IndicatorRuleSet::default();
        assert_eq!(
            passes_indicator("units responded to a 10-46 on I-64", &rules),
            (true, vec!["10-46".to_string()])
        );
        assert!(rules.passes("a 10 - 49 was reported").0);
        assert!(!rules.passes("a 10-45 was reported").0);
        assert!(!rules.passes("a 10-50 was reported").0);
        assert!(!rules.passes("call 110-46").0);
    }

    #[test]
    fn reference_numbers_match() {
        let rules = IndicatorRuleSet::default();
        assert!(rules.passes("see 202200123456 for details").0);
        assert!(rules.passes("refer to report # 4471").0);
        assert!(!rules.passes("unit 1234567 only seven digits").0);
    }

    #[test]
    fn empty_narrative_fails() {
        assert_eq!(IndicatorRuleSet::default().passes(""), (false, vec![]));
    }

    #[test]
    fn accidental_is_not_accident() {
        let rules = IndicatorRuleSet::default();
        assert!(!rules.passes("an accidental discharge").0);
        assert!(rules.passes("two accidents").0);
    }

    #[test]
    fn empty_term_list_is_rejected() {
        let rules = IndicatorRules {
            literal_terms: vec![],
            ..Default::default()
        };
        assert!(matches!(
            IndicatorRuleSet::compile(&rules),
            Err(KwFilterError::NoTerms)
        ));
    }

    #[test]
    fn bad_pattern_is_rejected() {
        let rules = IndicatorRules {
            code_pattern: "(".into(),
            ..Default::default()
        };
        assert!(matches!(
            IndicatorRuleSet::compile(&rules),
            Err(KwFilterError::Pattern { which: "code", .. })
        ));
    }
}
