//! Small random encounter tables kept alongside a plain-struct copy, so
//! reference evaluations never touch the crate's column accessors.

use chrono::NaiveDate;
use dikw_core::dataset::{Cell, TableBuilder};
use dikw_core::{Dataset, MessageCatalog};
use rand::Rng;

pub const VARIANTS: [&str; 4] = ["default", "salience", "timeliness", "socialNorms"];
pub const GENDERS: [&str; 3] = ["F", "M", "X"];
pub const STATES: [&str; 3] = ["CA", "NY", "TX"];

#[derive(Debug, Clone)]
pub struct Row {
    pub variant: &'static str,
    pub clicked: bool,
    pub authenticated: bool,
    pub opted_out: bool,
    pub redeemed: bool,
    pub age: Option<i64>,
    pub gender: Option<&'static str>,
    pub state: Option<&'static str>,
    pub sent_at: Option<NaiveDate>,
}

pub fn random_rows<R: Rng>(rng: &mut R, n: usize) -> Vec<Row> {
    let start = NaiveDate::from_ymd_opt(2024, 3, 1).unwrap();
    (0..n)
        .map(|_| {
            let clicked = rng.gen_bool(0.55);
            let authenticated = rng.gen_bool(if clicked { 0.6 } else { 0.05 });
            Row {
                variant: VARIANTS[rng.gen_range(0..VARIANTS.len())],
                clicked,
                authenticated,
                opted_out: rng.gen_bool(0.05),
                redeemed: rng.gen_bool(if authenticated { 0.5 } else { 0.05 }),
                age: rng.gen_bool(0.9).then(|| rng.gen_range(18..=90)),
                gender: rng.gen_bool(0.9).then(|| GENDERS[rng.gen_range(0..3)]),
                state: rng.gen_bool(0.95).then(|| STATES[rng.gen_range(0..3)]),
                sent_at: rng.gen_bool(0.95).then(|| start + chrono::Days::new(rng.gen_range(0..28))),
            }
        })
        .collect()
}

fn opt_text(v: Option<&str>) -> Cell {
    v.map_or(Cell::Null, |s| Cell::Text(s.to_string()))
}

pub fn dataset(rows: &[Row]) -> Dataset {
    let mut b = TableBuilder::with_required();
    for (i, r) in rows.iter().enumerate() {
        b.push(vec![
            Cell::Text(format!("p{i:04}")),
            Cell::Text(r.variant.to_string()),
            Cell::Bool(r.clicked),
            Cell::Bool(r.authenticated),
            Cell::Bool(r.opted_out),
            Cell::Bool(r.redeemed),
            r.age.map_or(Cell::Null, Cell::Int),
            opt_text(r.gender),
            opt_text(r.state),
            Cell::Text("statin".into()),
            r.sent_at.map_or(Cell::Null, Cell::Date),
        ]);
    }
    Dataset::new(b.build().unwrap(), MessageCatalog::stage1()).unwrap()
}

pub fn age_band(age: i64) -> &'static str {
    match age {
        a if a < 18 => "",
        18..=44 => "18-44",
        45..=64 => "45-64",
        _ => "65+",
    }
}
