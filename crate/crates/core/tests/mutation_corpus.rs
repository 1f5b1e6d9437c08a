use forge_core::schema::ApiSchema;
use forge_core::validator::{parse_snippet, validate_snippet, ErrorCode, ValidationContext};
use serde::Deserialize;

const SAMPLE: &str = include_str!("../fixtures/appendix_sample.py");
const CORPUS: &str = include_str!("../fixtures/mutation_corpus.json");

#[derive(Deserialize)]
struct Case {
    id: String,
    find: String,
    replace: String,
    context: String,
    expect: ErrorCode,
}

#[test]
fn every_mutation_yields_exactly_its_code() {
    let schema = ApiSchema::reference();
    let prev = parse_snippet(SAMPLE).ast;
    let cases: Vec<Case> = serde_json::from_str(CORPUS).unwrap();
    assert_eq!(cases.len(), 30);
    for case in cases {
        assert!(SAMPLE.contains(&case.find), "{}: pattern not in sample", case.id);
        let body = SAMPLE.replacen(&case.find, &case.replace, 1);
        let ctx = match case.context.as_str() {
            "fresh" => ValidationContext::FreshGeneration,
            "refine" => ValidationContext::Refinement { prev: &prev, preset_flagged: false },
            other => panic!("{}: unknown context {other}", case.id),
        };
        let codes: Vec<ErrorCode> = validate_snippet(&body, &schema, ctx).iter().map(|e| e.code).collect();
        assert_eq!(codes, vec![case.expect], "{}", case.id);
    }
}

#[test]
fn sample_is_clean_in_every_context() {
    let schema = ApiSchema::reference();
    let prev = parse_snippet(SAMPLE).ast;
    for ctx in [
        ValidationContext::FreshGeneration,
        ValidationContext::Refinement { prev: &prev, preset_flagged: false },
        ValidationContext::Edit { prev: &prev, preset_targeted: false },
    ] {
        assert!(validate_snippet(SAMPLE, &schema, ctx).is_empty());
    }
}
