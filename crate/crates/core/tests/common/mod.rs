//! Shared fixtures for the integration suites: a deterministic
//! census-style table generator (offline stand-in for the Adult dataset)
//! and enumeration helpers for small exactly-solvable models.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mpsd::encoding::{EncodedRecord, Schema, Table};

pub const EDUCATION: [&str; 16] = [
    "Preschool",
    "1st-4th",
    "5th-6th",
    "7th-8th",
    "9th",
    "10th",
    "11th",
    "12th",
    "HS-grad",
    "Some-college",
    "Assoc-voc",
    "Assoc-acdm",
    "Bachelors",
    "Masters",
    "Prof-school",
    "Doctorate",
];

pub const WORKCLASS: [&str; 7] = [
    "Private",
    "Self-emp-not-inc",
    "Self-emp-inc",
    "Federal-gov",
    "Local-gov",
    "State-gov",
    "Without-pay",
];

pub const MARITAL: [&str; 7] = [
    "Married-civ-spouse",
    "Divorced",
    "Never-married",
    "Separated",
    "Widowed",
    "Married-spouse-absent",
    "Married-AF-spouse",
];

pub const OCCUPATION: [&str; 14] = [
    "Tech-support",
    "Craft-repair",
    "Other-service",
    "Sales",
    "Exec-managerial",
    "Prof-specialty",
    "Handlers-cleaners",
    "Machine-op-inspct",
    "Adm-clerical",
    "Farming-fishing",
    "Transport-moving",
    "Priv-house-serv",
    "Protective-serv",
    "Armed-Forces",
];

pub const RELATIONSHIP: [&str; 6] = [
    "Wife",
    "Own-child",
    "Husband",
    "Not-in-family",
    "Other-relative",
    "Unmarried",
];

pub const RACE: [&str; 5] = [
    "White",
    "Black",
    "Asian-Pac-Islander",
    "Amer-Indian-Eskimo",
    "Other",
];

pub const COUNTRIES: [&str; 41] = [
    "United-States",
    "Cambodia",
    "England",
    "Puerto-Rico",
    "Canada",
    "Germany",
    "Outlying-US",
    "India",
    "Japan",
    "Greece",
    "South",
    "China",
    "Cuba",
    "Iran",
    "Honduras",
    "Philippines",
    "Italy",
    "Poland",
    "Jamaica",
    "Vietnam",
    "Mexico",
    "Portugal",
    "Ireland",
    "France",
    "Dominican-Republic",
    "Laos",
    "Ecuador",
    "Taiwan",
    "Haiti",
    "Columbia",
    "Hungary",
    "Guatemala",
    "Nicaragua",
    "Scotland",
    "Thailand",
    "Yugoslavia",
    "El-Salvador",
    "Trinadad-Tobago",
    "Peru",
    "Hong",
    "Holand-Netherlands",
];

pub const COLUMNS: [&str; 15] = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
    "income",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str], weights: &[f64]) -> &'a str {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (item, &w) in items.iter().zip(weights) {
        if u < w {
            return item;
        }
        u -= w;
    }
    items[items.len() - 1]
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    // Box-Muller keeps the fixture free of distribution-crate coupling.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic census-style records with the Adult column layout. A
/// latent profile class drives correlated age, education, occupation,
/// hours and income so the joint structure is learnable and the
/// downstream label is predictable.
pub fn adult_like(rows: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<Option<String>>> = Vec::with_capacity(rows);

    for _ in 0..rows {
        // Latent profile: young/mid/senior/executive.
        let z = pick(&mut rng, &["0", "1", "2", "3"], &[0.4, 0.3, 0.2, 0.1])
            .parse::<usize>()
            .unwrap();

        let age = normal(&mut rng, [28.0, 38.0, 48.0, 58.0][z], 9.0)
            .round()
            .clamp(17.0, 90.0) as i64;

        let edu_idx = (normal(&mut rng, [8.0, 9.5, 11.0, 13.0][z], 2.2).round() as i64)
            .clamp(0, 15) as usize;
        let education = EDUCATION[edu_idx];
        let education_num = edu_idx + 1;

        let workclass = pick(
            &mut rng,
            &WORKCLASS,
            &[0.70, 0.08, 0.04, 0.04, 0.07, 0.05, 0.02],
        );

        let fnlwgt = rng.gen_range(100_000..1_000_000u32);

        let marital = match z {
            0 => pick(&mut rng, &MARITAL, &[0.20, 0.08, 0.60, 0.05, 0.01, 0.05, 0.01]),
            1 => pick(&mut rng, &MARITAL, &[0.55, 0.15, 0.18, 0.05, 0.02, 0.04, 0.01]),
            _ => pick(&mut rng, &MARITAL, &[0.65, 0.15, 0.05, 0.04, 0.07, 0.03, 0.01]),
        };

        // Occupation tracks education band with noise.
        let occupation = if rng.gen_bool(0.3) {
            OCCUPATION[rng.gen_range(0..OCCUPATION.len())]
        } else {
            match edu_idx {
                0..=7 => pick(
                    &mut rng,
                    &["Handlers-cleaners", "Machine-op-inspct", "Other-service", "Farming-fishing", "Transport-moving"],
                    &[0.25, 0.25, 0.25, 0.12, 0.13],
                ),
                8..=11 => pick(
                    &mut rng,
                    &["Craft-repair", "Sales", "Adm-clerical", "Tech-support", "Protective-serv"],
                    &[0.3, 0.25, 0.25, 0.12, 0.08],
                ),
                _ => pick(
                    &mut rng,
                    &["Exec-managerial", "Prof-specialty", "Tech-support", "Sales"],
                    &[0.35, 0.40, 0.15, 0.10],
                ),
            }
        };

        let sex = pick(&mut rng, &["Female", "Male"], &[0.33, 0.67]);
        let relationship = if marital == "Married-civ-spouse" {
            if sex == "Male" {
                "Husband"
            } else {
                "Wife"
            }
        } else {
            pick(
                &mut rng,
                &["Own-child", "Not-in-family", "Other-relative", "Unmarried"],
                &[0.25, 0.45, 0.08, 0.22],
            )
        };

        let race = pick(&mut rng, &RACE, &[0.85, 0.07, 0.03, 0.03, 0.02]);

        let capital_gain = if rng.gen_bool(0.92) {
            0
        } else {
            rng.gen_range(1_000..10_000)
        };
        let capital_loss = if rng.gen_bool(0.95) {
            0
        } else {
            rng.gen_range(1_000..3_000)
        };

        let hours = normal(&mut rng, 38.0 + 3.0 * z as f64, 8.0)
            .round()
            .clamp(1.0, 99.0) as i64;

        let country = if rng.gen_bool(0.90) {
            "United-States"
        } else {
            COUNTRIES[rng.gen_range(1..COUNTRIES.len())]
        };

        // Income drivers mirror the Adult dataset's strongest
        // predictors: marriage, professional occupations, capital gains
        // and hours, with a small residual profile effect.
        let married = marital == "Married-civ-spouse";
        let occ_shift = match occupation {
            "Exec-managerial" | "Prof-specialty" => 2.4,
            "Tech-support" | "Sales" | "Protective-serv" | "Craft-repair" => 1.0,
            _ => 0.0,
        };
        let logit = -3.0
            + 2.2 * married as i64 as f64
            + occ_shift
            + 2.0 * (capital_gain > 0) as i64 as f64
            + 0.05 * (hours as f64 - 40.0)
            + 0.4 * z as f64;
        let income = if rng.gen_bool(1.0 / (1.0 + (-logit).exp())) {
            ">50K"
        } else {
            "<=50K"
        };

        out.push(
            [
                age.to_string(),
                workclass.to_string(),
                fnlwgt.to_string(),
                education.to_string(),
                education_num.to_string(),
                marital.to_string(),
                occupation.to_string(),
                relationship.to_string(),
                race.to_string(),
                sex.to_string(),
                capital_gain.to_string(),
                capital_loss.to_string(),
                hours.to_string(),
                country.to_string(),
                income.to_string(),
            ]
            .into_iter()
            .map(Some)
            .collect(),
        );
    }

    Table::new(COLUMNS.iter().map(|c| c.to_string()).collect(), out).unwrap()
}

/// Every assignment of the chain's physical indices, for enumerable
/// models.
pub fn enumerate_records(schema: &Schema) -> Vec<EncodedRecord> {
    let dims = schema.phys_dims();
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(total);
    for mut code in 0..total {
        let mut indices = vec![0usize; dims.len()];
        for (i, &d) in dims.iter().enumerate().rev() {
            indices[i] = code % d;
            code /= d;
        }
        out.push(EncodedRecord { indices });
    }
    out
}

/// Tiny all-categorical schema for enumeration tests.
pub fn small_schema(dims: &[usize]) -> Schema {
    let rows: Vec<Vec<Option<String>>> = {
        // Enough rows that every category value appears at least once.
        let max_dim = *dims.iter().max().unwrap();
        (0..max_dim)
            .map(|r| {
                dims.iter()
                    .map(|&d| Some(format!("c{}", r.min(d - 1))))
                    .collect()
            })
            .collect()
    };
    let columns: Vec<String> = (0..dims.len()).map(|i| format!("f{i}")).collect();
    let table = Table::new(columns, rows).unwrap();
    let schema = mpsd::encoding::infer_schema(&table, &Default::default()).unwrap();
    mpsd::encoding::order_features(&schema)
}
