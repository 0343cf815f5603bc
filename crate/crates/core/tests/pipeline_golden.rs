//! The bundled raw fixture flows through the whole pipeline and must
//! reproduce the committed outputs byte for byte.
//!
//! Set `FAIRAGG_BLESS=1` to rewrite the golden files after an intended change.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use fairagg_core::pipeline::{
    run_pipeline, MacroTable, PipelineOptions, PipelineOutput, Quarter, RawPanelTable, PAST_DUE_WINSORIZED,
    SHORT_HISTORY,
};
use fairagg_core::report::{compare_tables, compare_tables_by_key, header, render_document};
use fairagg_core::sample::{read_panel_csv, write_panel_csv, CovarianceSpec, TimeFormat};

fn dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

fn golden_options() -> PipelineOptions {
    PipelineOptions {
        fit_range: Some((Quarter::new(2000, 1).unwrap(), Quarter::new(2019, 4).unwrap())),
        ..PipelineOptions::default()
    }
}

fn run() -> PipelineOutput {
    let raw = RawPanelTable::read(&dir("fixtures").join("raw_panel.csv")).unwrap();
    let macro_table = MacroTable::read(&dir("fixtures").join("macro.csv")).unwrap();
    run_pipeline(&raw, &macro_table, &golden_options()).unwrap()
}

fn check_golden(name: &str, actual: &str) {
    let path = dir("golden").join(name);
    if std::env::var_os("FAIRAGG_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from the committed golden output");
}

fn frame_csv(out: &PipelineOutput, category: &str) -> String {
    let mut buf = Vec::new();
    write_panel_csv(&out.frames[category], &mut buf, TimeFormat::Quarter).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn pipeline_matches_golden_outputs() {
    let out = run();
    assert_eq!(out.frames.keys().collect::<Vec<_>>(), ["cc", "fl"]);
    check_golden("frame_cc.csv", &frame_csv(&out, "cc"));
    check_golden("frame_fl.csv", &frame_csv(&out, "fl"));
    check_golden("exclusions.json", &format!("{}\n", out.exclusions.to_json().unwrap()));
    let panels = out.frames.iter().map(|(k, v)| (k.as_str(), v));
    let tables = compare_tables_by_key(panels, CovarianceSpec::BankClustered).unwrap();
    check_golden("pipeline_compare.txt", &render_document(&header(0, ""), &tables));
    let cc = compare_tables(&out.frames["cc"], CovarianceSpec::BankClustered).unwrap();
    check_golden("compare_cc.txt", &render_document(&header(0, ""), &cc));
}

#[test]
fn pipeline_is_deterministic_and_round_trips() {
    let (a, b) = (run(), run());
    assert_eq!(a.frames, b.frames);
    let text = frame_csv(&a, "cc");
    let back = read_panel_csv(text.as_bytes(), "frame").unwrap();
    assert_eq!(back, a.frames["cc"]);
}

#[test]
fn fixture_exercises_every_cleaning_rule() {
    let out = run();
    for rule in [
        "missing_prior_loans",
        "missing_amounts",
        "loss_rate_out_of_range",
        "past_due_rate_above_max",
        SHORT_HISTORY,
        PAST_DUE_WINSORIZED,
        "missing_lagged_feature",
    ] {
        assert!(out.exclusions.count(rule) > 0, "{rule} never fired");
    }
    assert!(!out.frames["fl"].bank_ids().contains(&"bank_e".to_string()));
    assert!(out.frames["cc"].bank_ids().contains(&"bank_e".to_string()));
}

#[test]
fn stress_weights_span_the_configured_ratio() {
    let out = run();
    for (category, frame) in &out.frames {
        let loans: HashMap<(&str, i64), f64> = out
            .cleaned
            .iter()
            .filter(|r| &r.category == category)
            .map(|r| ((r.bank_id.as_str(), r.quarter.index()), r.loans.unwrap_or(f64::NAN)))
            .collect();
        let stress: Vec<f64> = (0..frame.len())
            .map(|i| frame.weights()[i] / loans[&(frame.bank_ids()[frame.banks()[i]].as_str(), frame.times()[i])])
            .collect();
        let max = stress.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = stress.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(max / min, 2.0, "{category}");
    }
}
