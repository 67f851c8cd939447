//! Synthetic randomized messaging experiments with planted effects, plus
//! the closed-form expectations those effects imply.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cell, EncounterTable, MessageCatalog, StrategyTag, TableBuilder};
use crate::topic::{default_age_bins, IntBin};

/// Table size used by desk-scale tests.
pub const DEFAULT_N: usize = 50_000;
/// Size of the first-stage experiment, for full-scale runs.
pub const LARGE_N: usize = 444_691;

/// Oldest age drawn for an open-ended band.
const AGE_CAP: i64 = 90;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("model has no variants")]
    NoVariants,
    #[error("variant `{0}` is not in the catalog")]
    UnknownVariant(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelConditionals {
    pub p_auth_given_click: f64,
    pub p_redeem_given_auth: f64,
}

impl Default for FunnelConditionals {
    fn default() -> Self {
        Self {
            p_auth_given_click: 0.6,
            p_redeem_given_auth: 0.5,
        }
    }
}

fn default_opt_out() -> f64 {
    0.01
}

/// Logistic engagement model. A row's click logit is the variant's base
/// logit plus the effects of its strategy tags plus its age band's effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub base_logit: BTreeMap<String, f64>,
    #[serde(default)]
    pub strategy_effects: BTreeMap<StrategyTag, f64>,
    /// Logit delta keyed by age band label.
    #[serde(default)]
    pub age_effect: BTreeMap<String, f64>,
    #[serde(default)]
    pub funnel_conditionals: FunnelConditionals,
    #[serde(default = "default_opt_out")]
    pub opt_out_rate: f64,
    pub seed: u64,
}

impl GroundTruthModel {
    /// Every variant of `catalog` at `base` logit, no other effects.
    pub fn uniform(catalog: &MessageCatalog, base: f64, seed: u64) -> Self {
        Self {
            base_logit: catalog.active().map(|e| (e.name.clone(), base)).collect(),
            strategy_effects: BTreeMap::new(),
            age_effect: BTreeMap::new(),
            funnel_conditionals: FunnelConditionals::default(),
            opt_out_rate: default_opt_out(),
            seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self, SimulatorError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimulatorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn variants(&self) -> Vec<&str> {
        self.base_logit.keys().map(String::as_str).collect()
    }

    pub fn validate(&self, catalog: &MessageCatalog) -> Result<(), SimulatorError> {
        if self.base_logit.is_empty() {
            return Err(SimulatorError::NoVariants);
        }
        for v in self.base_logit.keys() {
            if !catalog.contains(v) {
                return Err(SimulatorError::UnknownVariant(v.clone()));
            }
        }
        let probs = [
            ("p_auth_given_click", self.funnel_conditionals.p_auth_given_click),
            ("p_redeem_given_auth", self.funnel_conditionals.p_redeem_given_auth),
            ("opt_out_rate", self.opt_out_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimulatorError::InvalidModel(format!("{name} = {p} outside [0,1]")));
            }
        }
        let finite = self
            .base_logit
            .values()
            .chain(self.strategy_effects.values())
            .chain(self.age_effect.values())
            .all(|x| x.is_finite());
        if !finite {
            return Err(SimulatorError::InvalidModel("non-finite logit".into()));
        }
        Ok(())
    }

    /// Click logit for a variant in an age band.
    pub fn logit(&self, variant: &str, band: &str, catalog: &MessageCatalog) -> f64 {
        let base = self.base_logit.get(variant).copied().unwrap_or(0.0);
        let tags: f64 = catalog
            .get(variant)
            .map(|e| {
                e.strategy_tags
                    .iter()
                    .map(|t| self.strategy_effects.get(t).copied().unwrap_or(0.0))
                    .sum()
            })
            .unwrap_or(0.0);
        base + tags + self.age_effect.get(band).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedBand {
    pub bin: IntBin,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedLabel {
    pub label: String,
    pub weight: f64,
}

fn labels(pairs: &[(&str, f64)]) -> Vec<WeightedLabel> {
    pairs
        .iter()
        .map(|(l, w)| WeightedLabel {
            label: l.to_string(),
            weight: *w,
        })
        .collect()
}

/// Finite population mixture the rows are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsMix {
    pub age_bands: Vec<WeightedBand>,
    pub genders: Vec<WeightedLabel>,
    pub states: Vec<WeightedLabel>,
    pub drug_categories: Vec<WeightedLabel>,
    pub start_date: NaiveDate,
    pub days: u32,
}

impl Default for DemographicsMix {
    fn default() -> Self {
        let weights = [0.4, 0.35, 0.25];
        Self {
            age_bands: default_age_bins()
                .into_iter()
                .zip(weights)
                .map(|(bin, weight)| WeightedBand { bin, weight })
                .collect(),
            genders: labels(&[("F", 0.55), ("M", 0.45)]),
            states: labels(&[("CA", 0.3), ("NY", 0.25), ("TX", 0.25), ("FL", 0.2)]),
            drug_categories: labels(&[("statin", 0.3), ("ssri", 0.25), ("antihypertensive", 0.25), ("diabetes", 0.2)]),
            start_date: NaiveDate::from_ymd_opt(2024, 3, 1).expect("valid date"),
            days: 28,
        }
    }
}

impl DemographicsMix {
    /// A single age band, for closed-form checks.
    pub fn single_band(bin: IntBin) -> Self {
        Self {
            age_bands: vec![WeightedBand { bin, weight: 1.0 }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let groups: [(&str, Vec<f64>); 4] = [
            ("age_bands", self.age_bands.iter().map(|b| b.weight).collect()),
            ("genders", self.genders.iter().map(|b| b.weight).collect()),
            ("states", self.states.iter().map(|b| b.weight).collect()),
            ("drug_categories", self.drug_categories.iter().map(|b| b.weight).collect()),
        ];
        for (name, ws) in groups {
            if ws.is_empty() || ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || ws.iter().sum::<f64>() <= 0.0 {
                return Err(SimulatorError::InvalidModel(format!("{name} weights must be non-negative with a positive sum")));
            }
        }
        for b in &self.age_bands {
            if b.bin.max.is_some_and(|m| m < b.bin.min) {
                return Err(SimulatorError::InvalidModel(format!("age band {} is empty", b.bin.label)));
            }
        }
        if self.days == 0 {
            return Err(SimulatorError::InvalidModel("days must be >= 1".into()));
        }
        Ok(())
    }

    fn band_weights(&self) -> Vec<f64> {
        let total: f64 = self.age_bands.iter().map(|b| b.weight).sum();
        self.age_bands.iter().map(|b| b.weight / total).collect()
    }
}

fn pick<T>(items: &[T], weight: impl Fn(&T) -> f64, u: f64) -> &T {
    let total: f64 = items.iter().map(&weight).sum();
    let mut acc = 0.0;
    for it in items {
        acc += weight(it) / total;
        if u < acc {
            return it;
        }
    }
    items.last().expect("non-empty")
}

fn row(
    model: &GroundTruthModel,
    mix: &DemographicsMix,
    catalog: &MessageCatalog,
    variants: &[&str],
    index: usize,
) -> Vec<Cell> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(index as u64);
    let variant = variants[rng.gen_range(0..variants.len())];
    let band = pick(&mix.age_bands, |b| b.weight, rng.gen());
    let max = band.bin.max.unwrap_or(AGE_CAP.max(band.bin.min));
    let age = rng.gen_range(band.bin.min..=max);
    let gender = &pick(&mix.genders, |l| l.weight, rng.gen()).label;
    let state = &pick(&mix.states, |l| l.weight, rng.gen()).label;
    let drug = &pick(&mix.drug_categories, |l| l.weight, rng.gen()).label;
    let day = rng.gen_range(0..mix.days);
    let p = logistic(model.logit(variant, &band.bin.label, catalog));
    let clicked = rng.gen::<f64>() < p;
    let auth_draw: f64 = rng.gen();
    let redeem_draw: f64 = rng.gen();
    let authenticated = clicked && auth_draw < model.funnel_conditionals.p_auth_given_click;
    let redeemed = authenticated && redeem_draw < model.funnel_conditionals.p_redeem_given_auth;
    let opted_out = rng.gen::<f64>() < model.opt_out_rate;
    vec![
        Cell::Text(format!("p{index:07}")),
        Cell::Text(variant.to_string()),
        Cell::Bool(clicked),
        Cell::Bool(authenticated),
        Cell::Bool(opted_out),
        Cell::Bool(redeemed),
        Cell::Int(age),
        Cell::Text(gender.clone()),
        Cell::Text(state.clone()),
        Cell::Text(drug.clone()),
        Cell::Date(mix.start_date + Duration::days(day as i64)),
    ]
}

/// Draws `n` rows. Each row has its own ChaCha stream, so the output is the
/// same however the rows are scheduled.
pub fn generate(
    model: &GroundTruthModel,
    n: usize,
    mix: &DemographicsMix,
    catalog: &MessageCatalog,
) -> Result<EncounterTable, SimulatorError> {
    if n == 0 {
        return Err(SimulatorError::InvalidModel("n must be >= 1".into()));
    }
    model.validate(catalog)?;
    mix.validate()?;
    let variants = model.variants();
    let rows: Vec<Vec<Cell>> = (0..n)
        .into_par_iter()
        .map(|i| row(model, mix, catalog, &variants, i))
        .collect();
    let mut b = TableBuilder::with_required();
    b.reserve(n);
    for r in rows {
        b.push(r);
    }
    Ok(b.build()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueDirection {
    Greater,
    Less,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDirection {
    pub left: String,
    pub right: String,
    pub direction: TrueDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedFunnel {
    pub clicked: f64,
    pub authenticated: f64,
    pub redeemed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub expected_click_rate: BTreeMap<String, f64>,
    /// Expected click rate per variant within each age band.
    pub expected_by_band: BTreeMap<String, BTreeMap<String, f64>>,
    pub directions: Vec<PairDirection>,
    pub expected_funnel: BTreeMap<String, ExpectedFunnel>,
}

impl OracleReport {
    pub fn direction(&self, left: &str, right: &str) -> Option<TrueDirection> {
        self.directions
            .iter()
            .find(|d| d.left == left && d.right == right)
            .map(|d| d.direction)
    }
}

/// Exact expectations by summing over the finite age mixture.
pub fn oracle(model: &GroundTruthModel, mix: &DemographicsMix, catalog: &MessageCatalog) -> OracleReport {
    let weights = mix.band_weights();
    let mut expected = BTreeMap::new();
    let mut by_band = BTreeMap::new();
    for v in model.variants() {
        let mut total = 0.0;
        let mut bands = BTreeMap::new();
        for (b, w) in mix.age_bands.iter().zip(&weights) {
            let p = logistic(model.logit(v, &b.bin.label, catalog));
            bands.insert(b.bin.label.clone(), p);
            total += w * p;
        }
        expected.insert(v.to_string(), total);
        by_band.insert(v.to_string(), bands);
    }
    let mut directions = Vec::new();
    for (l, pl) in &expected {
        for (r, pr) in &expected {
            if l == r {
                continue;
            }
            let direction = if pl > pr {
                TrueDirection::Greater
            } else if pl < pr {
                TrueDirection::Less
            } else {
                TrueDirection::Equal
            };
            directions.push(PairDirection {
                left: l.clone(),
                right: r.clone(),
                direction,
            });
        }
    }
    let f = &model.funnel_conditionals;
    let expected_funnel = expected
        .iter()
        .map(|(v, p)| {
            (
                v.clone(),
                ExpectedFunnel {
                    clicked: *p,
                    authenticated: p * f.p_auth_given_click,
                    redeemed: p * f.p_auth_given_click * f.p_redeem_given_auth,
                },
            )
        })
        .collect();
    OracleReport {
        expected_click_rate: expected,
        expected_by_band: by_band,
        directions,
        expected_funnel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logit_is_half() {
        let cat = MessageCatalog::stage1();
        let model = GroundTruthModel::uniform(&cat, 0.0, 1);
        let o = oracle(&model, &DemographicsMix::default(), &cat);
        assert!(o.expected_click_rate.values().all(|p| *p == 0.5));
        assert!(o.directions.iter().all(|d| d.direction == TrueDirection::Equal));
    }

    #[test]
    fn funnel_is_monotone() {
        let cat = MessageCatalog::stage1();
        let model = GroundTruthModel::uniform(&cat, 0.4, 9);
        let t = generate(&model, 2000, &DemographicsMix::default(), &cat).unwrap();
        let c = t.bool_column("clicked");
        let a = t.bool_column("authenticated");
        let r = t.bool_column("redeemed");
        for i in 0..t.row_count() {
            assert!(!a[i] || c[i]);
            assert!(!r[i] || a[i]);
        }
    }

    #[test]
    fn rejects_unknown_variant() {
        let cat = MessageCatalog::stage1();
        let mut model = GroundTruthModel::uniform(&cat, 0.0, 1);
        model.base_logit.insert("ghost".into(), 0.0);
        assert!(matches!(
            generate(&model, 10, &DemographicsMix::default(), &cat),
            Err(SimulatorError::UnknownVariant(_))
        ));
    }
}
