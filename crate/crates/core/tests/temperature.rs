mod common;

use common::{chi_square_groups, closed_form_q, grouped_corpus};

const SIZES: [(&str, usize); 4] = [("de", 2000), ("fr", 600), ("cs", 90), ("ja", 10)];

#[test]
fn temperature_five_matches_closed_form() {
    let corpus = grouped_corpus(&SIZES);
    let q = closed_form_q(&SIZES, 5.0);
    let r = chi_square_groups(&corpus, 5.0, 100_000, 11, &q, 0.001);
    assert!(r.passes(), "{r:?}");
    // The low-resource group is pushed well above its raw share.
    assert!(q["ja"] > 10.0 * 10.0 / 2700.0);
}

#[test]
fn temperature_one_keeps_raw_proportions() {
    let corpus = grouped_corpus(&SIZES);
    let raw = SIZES.iter().map(|(l, n)| (l.to_string(), *n as f64 / 2700.0)).collect();
    let r = chi_square_groups(&corpus, 1.0, 100_000, 12, &raw, 0.001);
    assert!(r.passes(), "{r:?}");
}

#[test]
fn wrong_distribution_is_rejected() {
    let corpus = grouped_corpus(&SIZES);
    let raw = SIZES.iter().map(|(l, n)| (l.to_string(), *n as f64 / 2700.0)).collect();
    let r = chi_square_groups(&corpus, 5.0, 100_000, 13, &raw, 0.001);
    assert!(!r.passes(), "{r:?}");
}
