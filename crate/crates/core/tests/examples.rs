//! Worked numeric examples, each checked against an independent evaluation.

mod support;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use dikw_core::artifact::{validate_artifact, Violation};
use dikw_core::data_agent::{check_format_compliance, check_missingness, check_randomization_balance, run_data_topic, DataFindings};
use dikw_core::knowledge::{ConfidenceBand, Rationale, RationaleSource};
use dikw_core::simulator::{self, logistic, DemographicsMix, GroundTruthModel, TrueDirection, WeightedBand};
use dikw_core::stats::{pearson, two_proportion_test, wilson_interval};
use dikw_core::topic::{canonical_hash, DataTopic, IntBin, DataTopicKind, Descriptor, KnowledgeTopic, Relation, WisdomTopic};
use dikw_core::wisdom::{generate_portfolio, select_claims, CandidateGeneration, TextSource};
use dikw_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::tables;

const EXACT: f64 = 1e-12;

fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// Statistics

#[test]
fn wilson_six_of_ten() {
    let (lo, hi) = wilson_interval(6, 10, 0.95).unwrap();
    assert!(near(lo, 0.31267376973365824, EXACT), "{lo}");
    assert!(near(hi, 0.8318196702937638, EXACT), "{hi}");
}

#[test]
fn wilson_large_sample() {
    let (lo, hi) = wilson_interval(6876, 10000, 0.95).unwrap();
    assert!(near(lo, 0.6784455373583167, EXACT), "{lo}");
    assert!(near(hi, 0.6966103864530053, EXACT), "{hi}");
}

#[test]
fn two_proportion_sixty_vs_fifty() {
    let t = two_proportion_test(60, 100, 50, 100, 0.95).unwrap();
    assert!(near(t.difference, 0.1, EXACT));
    assert!(near(t.z.unwrap(), 1.4213381090374024, EXACT), "{:?}", t.z);
    assert!(near(t.p_value.unwrap(), 0.1552184896846842, 1e-10), "{:?}", t.p_value);
}

#[test]
fn pearson_eight_points() {
    let xs: Vec<f64> = (1..=8).map(f64::from).collect();
    let ys = [2.1, 3.9, 6.2, 7.8, 10.1, 12.2, 13.8, 16.4];
    let c = pearson(&xs, &ys, 0.95).unwrap();
    assert!(near(c.r, 0.9991360895774591, EXACT), "{}", c.r);
    assert_eq!(c.df, 6.0);
}

// ---------------------------------------------------------------------------
// Data checks

#[test]
fn format_compliance_longest_message() {
    let cat = MessageCatalog::stage2();
    let DataFindings::FormatCompliance { max_char_count, longest, messages, .. } = check_format_compliance(&cat, 160)
    else {
        panic!("wrong findings kind");
    };
    let by_scan = cat.entries.iter().map(|e| e.text.chars().count()).max().unwrap();
    assert_eq!(max_char_count, 84);
    assert_eq!(by_scan, 84);
    assert_eq!(longest, "salience");
    assert!(messages.iter().all(|m| m.within_limit));
}

#[test]
fn missingness_matches_cell_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let rows = tables::random_rows(&mut rng, 400);
    let ds = tables::dataset(&rows);
    let report = check_missingness(&ds.table);
    let scan: BTreeMap<&str, Vec<usize>> = [
        ("age", rows.iter().enumerate().filter(|(_, r)| r.age.is_none()).map(|(i, _)| i).collect()),
        ("gender", rows.iter().enumerate().filter(|(_, r)| r.gender.is_none()).map(|(i, _)| i).collect()),
        ("state", rows.iter().enumerate().filter(|(_, r)| r.state.is_none()).map(|(i, _)| i).collect()),
        ("sent_at", rows.iter().enumerate().filter(|(_, r)| r.sent_at.is_none()).map(|(i, _)| i).collect()),
    ]
    .into_iter()
    .collect();
    assert_eq!(report.row_count, 400);
    for col in &report.columns {
        let want = scan.get(col.column.as_str()).cloned().unwrap_or_default();
        assert_eq!(col.null_rows, want, "{}", col.column);
        assert_eq!(col.null_count + col.non_null_count, 400);
        assert!(near(col.null_fraction, want.len() as f64 / 400.0, EXACT));
    }
}

#[test]
fn balance_thirteen_variants() {
    let cat = MessageCatalog::stage1();
    assert_eq!(cat.len(), 13);
    let model = GroundTruthModel::uniform(&cat, 0.0, 11);
    let t = simulator::generate(&model, 10_000, &DemographicsMix::default(), &cat).unwrap();
    let report = check_randomization_balance(&t, 0.02).unwrap();
    assert_eq!(report.variant_count, 13);
    assert!(near(report.expected_share, 1.0 / 13.0, EXACT));
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in t.variants() {
        *counts.entry(c.as_str().unwrap().to_string()).or_default() += 1;
    }
    for (v, n) in &counts {
        assert!(near(report.shares[v], *n as f64 / 10_000.0, EXACT));
    }
    let worst = counts.values().map(|n| (*n as f64 / 10_000.0 - 1.0 / 13.0).abs()).fold(0.0, f64::max);
    assert!(near(report.max_abs_deviation, worst, EXACT));
    assert!(report.passed);
}

// ---------------------------------------------------------------------------
// Simulator

fn band_rates(t: &EncounterTable) -> BTreeMap<&'static str, (usize, usize)> {
    let ages = t.column("age").unwrap();
    let clicked = t.bool_column("clicked");
    let mut out: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    for (a, c) in ages.iter().zip(clicked) {
        let e = out.entry(tables::age_band(a.as_i64().unwrap())).or_default();
        e.0 += usize::from(c);
        e.1 += 1;
    }
    out
}

#[test]
fn older_band_twelve_percent_lift() {
    let logit = (0.56f64 / 0.44).ln();
    assert!(near(logistic(logit) / 0.5, 1.12, 1e-12));
    let cat = MessageCatalog::stage1();
    let mut model = GroundTruthModel::uniform(&cat, 0.0, 2024);
    model.age_effect.insert("65+".into(), logit);
    let mix = DemographicsMix::default();
    let oracle = simulator::oracle(&model, &mix, &cat);
    let expect_old = oracle.expected_by_band["default"]["65+"];
    let expect_young = oracle.expected_by_band["default"]["18-44"];
    assert!(near(expect_old, 0.56, EXACT) && near(expect_young, 0.5, EXACT));

    let t = simulator::generate(&model, 60_000, &mix, &cat).unwrap();
    let rates = band_rates(&t);
    let (ko, no) = rates["65+"];
    let (ky, ny) = rates["18-44"];
    let (po, py) = (ko as f64 / no as f64, ky as f64 / ny as f64);
    let se = (po * (1.0 - po) / no as f64 + py * (1.0 - py) / ny as f64).sqrt();
    assert!(((po - py) - (expect_old - expect_young)).abs() <= 3.0 * se, "old {po} young {py} se {se}");
}

#[test]
fn two_band_expected_rate() {
    let cat = MessageCatalog::stage1();
    let mut model = GroundTruthModel::uniform(&cat, 0.0, 1);
    model.age_effect.insert("45+".into(), 0.487);
    let mix = DemographicsMix {
        age_bands: vec![
            WeightedBand { bin: IntBin { label: "18-44".into(), min: 18, max: Some(44) }, weight: 1.0 },
            WeightedBand { bin: IntBin { label: "45+".into(), min: 45, max: None }, weight: 1.0 },
        ],
        ..DemographicsMix::default()
    };
    let oracle = simulator::oracle(&model, &mix, &cat);
    for rate in oracle.expected_click_rate.values() {
        assert!(near(*rate, 0.5596997274004714, EXACT), "{rate}");
    }
    let ratio = oracle.expected_by_band["default"]["45+"] / 0.5;
    assert!(near(ratio, 1.2388, 5e-5), "{ratio}");
}

#[test]
fn three_variant_directions_by_brute_force() {
    let cat = MessageCatalog::stage1();
    let model = GroundTruthModel {
        base_logit: [("default", 0.1), ("salience", -0.2), ("timeliness", 0.3)]
            .into_iter()
            .map(|(v, x)| (v.to_string(), x))
            .collect(),
        strategy_effects: [(StrategyTag::Urgency, 0.2), (StrategyTag::Clarity, -0.5)].into_iter().collect(),
        age_effect: [("45-64".to_string(), 0.3), ("65+".to_string(), -0.4)].into_iter().collect(),
        funnel_conditionals: Default::default(),
        opt_out_rate: 0.0,
        seed: 5,
    };
    let mix = DemographicsMix::default();
    // salience carries clarity + urgency, timeliness urgency only.
    let tag_effect = [("default", 0.0), ("salience", 0.2 - 0.5), ("timeliness", 0.2)];
    let bands = [("18-44", 0.4, 0.0), ("45-64", 0.35, 0.3), ("65+", 0.25, -0.4)];
    let base: BTreeMap<&str, f64> = [("default", 0.1), ("salience", -0.2), ("timeliness", 0.3)].into_iter().collect();
    let brute: BTreeMap<&str, f64> = tag_effect
        .iter()
        .map(|(v, fx)| {
            let p: f64 = bands.iter().map(|(_, w, a)| w / (1.0 + (-(base[v] + fx + a)).exp())).sum();
            (*v, p)
        })
        .collect();
    let oracle = simulator::oracle(&model, &mix, &cat);
    for (v, p) in &brute {
        assert!(near(oracle.expected_click_rate[*v], *p, EXACT), "{v}");
    }
    for (l, pl) in &brute {
        for (r, pr) in &brute {
            if l == r {
                continue;
            }
            let want = if pl > pr { TrueDirection::Greater } else { TrueDirection::Less };
            assert_eq!(oracle.direction(l, r), Some(want), "{l} vs {r}");
        }
    }
}

#[test]
fn zero_logits_give_even_odds() {
    let cat = MessageCatalog::stage1();
    let model = GroundTruthModel::uniform(&cat, 0.0, 99);
    let mix = DemographicsMix::default();
    let oracle = simulator::oracle(&model, &mix, &cat);
    assert!(oracle.expected_click_rate.values().all(|p| near(*p, 0.5, EXACT)));
    let t = simulator::generate(&model, 26_000, &mix, &cat).unwrap();
    let clicked = t.bool_column("clicked");
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (v, c) in t.variants().iter().zip(clicked) {
        let e = per.entry(v.as_str().unwrap().to_string()).or_default();
        e.0 += usize::from(c);
        e.1 += 1;
    }
    for (v, (k, n)) in per {
        let se = (0.25 / n as f64).sqrt();
        assert!((k as f64 / n as f64 - 0.5).abs() <= 4.0 * se, "{v}: {k}/{n}");
    }
}

#[test]
fn funnel_recount_matches_expectation() {
    let cat = MessageCatalog::stage1();
    let mut model = GroundTruthModel::uniform(&cat, 0.2, 31);
    model.base_logit.retain(|v, _| v == "default" || v == "timeliness");
    let mix = DemographicsMix::default();
    let oracle = simulator::oracle(&model, &mix, &cat);
    let t = simulator::generate(&model, 40_000, &mix, &cat).unwrap();
    let (clicked, auth, redeemed) = (t.bool_column("clicked"), t.bool_column("authenticated"), t.bool_column("redeemed"));
    let mut per: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for (i, v) in t.variants().iter().enumerate() {
        assert!(!auth[i] || clicked[i], "row {i} authenticated without click");
        assert!(!redeemed[i] || auth[i], "row {i} redeemed without authentication");
        let e = per.entry(v.as_str().unwrap().to_string()).or_default();
        e[0] += usize::from(clicked[i]);
        e[1] += usize::from(auth[i]);
        e[2] += usize::from(redeemed[i]);
        e[3] += 1;
    }
    for (v, [c, a, r, n]) in per {
        let f = &oracle.expected_funnel[&v];
        for (k, p) in [(c, f.clicked), (a, f.authenticated), (r, f.redeemed)] {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((k as f64 / n as f64 - p).abs() <= 4.0 * se, "{v}: {k}/{n} vs {p}");
        }
    }
}

// ---------------------------------------------------------------------------
// Claim selection

fn claim(left: StrategyTag, score: f64) -> (TopicId, KnowledgeClaim) {
    let topic = KnowledgeTopic::new(Descriptor::tag(left), Relation::Outperforms, Descriptor::variant("default"));
    let id = canonical_hash(&Topic::Knowledge(topic.clone())).unwrap();
    let c = KnowledgeClaim {
        topic,
        theoretical_rationale: Rationale { text: "r".into(), source: RationaleSource::Manual },
        evidence: vec![],
        support_score: score,
        neutral: false,
        confidence_band: ConfidenceBand::from_score(score),
        generalizability_notes: String::new(),
    };
    (id, c)
}

fn ids(v: &[&(TopicId, KnowledgeClaim)]) -> Vec<TopicId> {
    v.iter().map(|(id, _)| id.clone()).collect()
}

#[test]
fn exploitation_keeps_high_band_in_score_order() {
    let cat = MessageCatalog::stage2();
    let claims = vec![
        claim(StrategyTag::Urgency, 0.85),
        claim(StrategyTag::Authority, 0.9),
        claim(StrategyTag::Clarity, 0.7),
    ];
    let got = select_claims(&claims, CandidateGeneration::Exploitation, &cat);
    assert_eq!(ids(&got), vec![claims[1].0.clone(), claims[0].0.clone()]);
    let explore = select_claims(&claims, CandidateGeneration::Exploration, &cat);
    assert_eq!(ids(&explore), vec![claims[2].0.clone()]);
}

#[test]
fn all_low_leaves_exploitation_empty() {
    let cat = MessageCatalog::stage2();
    let claims = vec![claim(StrategyTag::Urgency, 0.3), claim(StrategyTag::Clarity, 0.1)];
    assert!(select_claims(&claims, CandidateGeneration::Exploitation, &cat).is_empty());
    assert_eq!(select_claims(&claims, CandidateGeneration::Exploration, &cat).len(), 2);
}

#[test]
fn selection_matches_manual_filter() {
    let cat = MessageCatalog::stage2();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let claims: Vec<_> = StrategyTag::ALL
        .iter()
        .filter(|t| **t != StrategyTag::Default)
        .take(12)
        .map(|t| claim(*t, (rng.gen_range(0..100) as f64) / 100.0))
        .collect();
    assert_eq!(claims.len(), 12);
    let tag_sets: Vec<BTreeSet<StrategyTag>> = cat.entries.iter().map(|e| e.strategy_tags.clone()).collect();
    let novel = |c: &KnowledgeClaim| {
        let Descriptor::Tag { tag } = c.topic.claim.left else { unreachable!() };
        let set: BTreeSet<StrategyTag> = [tag, StrategyTag::Authority].into_iter().collect();
        !tag_sets.contains(&set)
    };
    let order = |v: &mut Vec<&(TopicId, KnowledgeClaim)>| {
        v.sort_by(|a, b| b.1.support_score.partial_cmp(&a.1.support_score).unwrap().then(a.0.hash.cmp(&b.0.hash)))
    };
    let mut want_exploit: Vec<_> = claims.iter().filter(|(_, c)| c.support_score >= 0.8).collect();
    let mut want_explore: Vec<_> = claims.iter().filter(|(_, c)| c.support_score < 0.8 || novel(c)).collect();
    order(&mut want_exploit);
    order(&mut want_explore);
    assert_eq!(ids(&select_claims(&claims, CandidateGeneration::Exploitation, &cat)), ids(&want_exploit));
    assert_eq!(ids(&select_claims(&claims, CandidateGeneration::Exploration, &cat)), ids(&want_explore));
}

#[test]
fn single_message_portfolio() {
    let cat = MessageCatalog::stage2();
    let claims = vec![claim(StrategyTag::Urgency, 0.92), claim(StrategyTag::Clarity, 0.4)];
    let topic = WisdomTopic::new("Increase refill engagement", 1, 0.75);
    let out = generate_portfolio(&claims, &topic, &cat, TextSource::Template).unwrap();
    let p = &out.payload;
    assert_eq!(p.candidates.len(), 1);
    let c = &p.candidates[0];
    assert_eq!(c.generation, CandidateGeneration::Exploitation);
    assert_eq!(c.traced_claims, vec![claims[0].0.clone()]);
    assert!(c.constraint_report.passed());
    assert!(c.text.chars().count() <= 160);
}

// ---------------------------------------------------------------------------
// Artifact validation

fn data_artifact(report: &str, inputs: Vec<TopicId>) -> Artifact {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ds = tables::dataset(&tables::random_rows(&mut rng, 20));
    let topic = DataTopic::new(DataTopicKind::SchemaVerification);
    let id = canonical_hash(&Topic::Data(topic.clone())).unwrap();
    let (payload, _) = run_data_topic(&ds, &topic).unwrap();
    let mut prov = Provenance::new(&ds.fingerprint.digest);
    prov.input_artifact_ids = inputs;
    Artifact::new(id, Payload::Data(payload), report.into(), prov, DateTime::<Utc>::UNIX_EPOCH)
}

#[test]
fn valid_data_artifact_passes() {
    let a = data_artifact("schema ok", vec![]);
    assert_eq!(validate_artifact(&a, &HashMap::new()), Ok(()));
}

#[test]
fn empty_report_rejected() {
    let a = data_artifact("  ", vec![]);
    assert_eq!(validate_artifact(&a, &HashMap::new()), Err(vec![Violation::EmptyReport]));
}

#[test]
fn dangling_provenance_rejected() {
    let missing = TopicId { layer: Layer::Data, hash: "0".repeat(64) };
    let a = data_artifact("schema ok", vec![missing.clone()]);
    assert_eq!(validate_artifact(&a, &HashMap::new()), Err(vec![Violation::DanglingProvenance(missing.clone())]));
    let store: HashMap<TopicId, Artifact> = [(missing, data_artifact("other", vec![]))].into_iter().collect();
    assert_eq!(validate_artifact(&a, &store), Ok(()));
}

#[test]
fn artifact_round_trips_through_canonical_bytes() {
    let a = data_artifact("schema ok", vec![]);
    let bytes = a.to_canonical_bytes();
    assert_eq!(bytes.last(), Some(&b'\n'));
    let back: Artifact = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_canonical_bytes(), bytes);
}
