//! Score averaging across independently trained models.

use std::collections::{BTreeSet, HashMap};

use crate::corpus::PredictionSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub member_predictions: Vec<PredictionSet>,
    pub member_names: Vec<String>,
}

impl EnsembleSpec {
    pub fn new(member_names: Vec<String>, member_predictions: Vec<PredictionSet>) -> Result<Self> {
        if member_names.len() != member_predictions.len() {
            return Err(Error::Contract(format!(
                "{} member names for {} prediction sets",
                member_names.len(),
                member_predictions.len()
            )));
        }
        Ok(Self {
            member_predictions,
            member_names,
        })
    }

    pub fn len(&self) -> usize {
        self.member_predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_predictions.is_empty()
    }
}

/// Unweighted mean per segment id, in the first member's order.
///
/// Each segment's member scores are summed in ascending order, so the
/// result does not depend on member order; it is clamped to the members'
/// range to absorb rounding.
pub fn average_predictions(spec: &EnsembleSpec) -> Result<PredictionSet> {
    let first = spec
        .member_predictions
        .first()
        .ok_or_else(|| Error::Contract("an ensemble needs at least one member".into()))?;
    for set in &spec.member_predictions {
        set.validate()?;
    }
    let reference: BTreeSet<&str> = first.ids().collect();
    let lookups: Vec<HashMap<&str, f64>> = spec
        .member_predictions
        .iter()
        .map(|set| set.entries.iter().map(|(id, s)| (id.as_str(), *s)).collect())
        .collect();

    for (i, set) in spec.member_predictions.iter().enumerate().skip(1) {
        let ids: BTreeSet<&str> = set.ids().collect();
        if ids != reference {
            let diff: Vec<&str> = reference.symmetric_difference(&ids).copied().collect();
            let name = spec.member_names.get(i).map_or("?", String::as_str);
            return Err(Error::Alignment(format!(
                "member {name:?} disagrees with {:?} on segments: {}",
                spec.member_names.first().map_or("?", String::as_str),
                diff.join(", ")
            )));
        }
    }

    let k = lookups.len() as f64;
    let mut scores = Vec::with_capacity(lookups.len());
    let entries = first
        .entries
        .iter()
        .map(|(id, _)| {
            scores.clear();
            scores.extend(lookups.iter().map(|l| l[id.as_str()]));
            scores.sort_by(f64::total_cmp);
            let lo = scores[0];
            let hi = scores[scores.len() - 1];
            let mean = scores.iter().sum::<f64>() / k;
            (id.clone(), mean.clamp(lo, hi))
        })
        .collect();
    PredictionSet::new(entries)
}
