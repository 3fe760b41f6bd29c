//! Every report the harness can emit must validate against the published
//! schema, and the validator must reject malformed documents.

use agf_harness::commands::{cmd_gradcheck, cmd_spectral, cmd_train};
use agf_harness::report::validate_report;
use serde_json::json;

#[test]
fn train_reports_validate() {
    let raw = json!({
        "variant": "agf", "d": 8, "heads": 2, "layers": 1, "K": 2,
        "basis": "monomial", "gamma": 0.01, "lr": 0.01, "epochs": 1,
        "batch_size": 16, "seed": 0, "dataset": "synthetic",
        "synthetic_samples": 40, "synthetic_seq_len": 16,
    });
    let out = cmd_train(&raw, None).unwrap();
    for (name, report) in &out.reports {
        let value = serde_json::to_value(report).unwrap();
        validate_report(&value).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn spectral_reports_validate() {
    for raw in [
        json!({"mode": "theorem1", "trials": 2, "n": 8, "steps": 16}),
        json!({"mode": "theorem2", "theta_samples": 20}),
        json!({"mode": "response", "resp_n": 16, "resp_d": 4, "trials": 2, "probes": 2}),
    ] {
        let out = cmd_spectral(&raw, Some(0)).unwrap();
        for (name, report) in &out.reports {
            let value = serde_json::to_value(report).unwrap();
            validate_report(&value).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn gradcheck_reports_validate() {
    let raw = json!({"n": 8, "d": 4, "heads": 1, "K": 1, "batch": 1, "variant": "vanilla"});
    let out = cmd_gradcheck(&raw, Some(0)).unwrap();
    for (_, report) in &out.reports {
        let value = serde_json::to_value(report).unwrap();
        validate_report(&value).unwrap();
    }
}

#[test]
fn validator_rejects_corrupted_documents() {
    let raw = json!({"mode": "theorem2", "theta_samples": 10});
    let out = cmd_spectral(&raw, Some(0)).unwrap();
    let mut value = serde_json::to_value(&out.reports[0].1).unwrap();

    let mut missing = value.clone();
    missing.as_object_mut().unwrap().remove("command");
    assert!(validate_report(&missing).is_err());

    let mut wrong_type = value.clone();
    wrong_type["seed"] = json!("not a number");
    assert!(validate_report(&wrong_type).is_err());

    value["command"] = json!("destroy");
    assert!(validate_report(&value).is_err());
}
