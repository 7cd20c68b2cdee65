use lamd::deps::{compute_drc, extract_dependencies, parse_llm_dependencies, DependencyKind, DependencyRecord, Threshold};
use lamd::ir::{parse_fragment, InstrKind};
use lamd::slicer::{slice_method, SlicingCriterion};
use lamd_testkit::{oracle_dependencies, random_method, MethodShape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_methods_match_def_use_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdef5);
    for n in 0..600 {
        let method = random_method(&mut rng, &MethodShape { params: n % 3, ..MethodShape::default() });
        for ins in method.body.iter().filter(|i| i.kind() == InstrKind::Invoke) {
            let crit = SlicingCriterion::at_invoke(&method, ins.index).unwrap();
            let slice = slice_method(&method, &crit);
            let got = extract_dependencies(&slice, &method, &crit);
            let expected = oracle_dependencies(&method, &slice.indices, ins.index, &crit.variables);
            assert_eq!(got, expected, "criterion {} in\n{}", ins.index, lamd::ir::serialize_method(&method));
        }
    }
}

fn deps(src: &str, index: usize) -> Vec<DependencyRecord> {
    let m = parse_fragment(src).unwrap();
    let crit = SlicingCriterion::at_invoke(&m, index).unwrap();
    extract_dependencies(&slice_method(&m, &crit), &m, &crit)
}

#[test]
fn receiver_and_argument_are_direct() {
    let got = deps("method F.f/0 {\n r1 = const 1\n r2 = const 2\n invoke [r1] X.method/1 (r2)\n}", 2);
    assert_eq!(got, vec![DependencyRecord::new(DependencyKind::Direct, ["r1", "r2"])]);
}

#[test]
fn value_through_call_is_transitive() {
    let got = deps(
        "method F.f/0 {\n r1 = const 1\n r3 = const 3\n r2 = invoke [r3] X.getValue/0 ()\n invoke [r1] X.method/1 (r2)\n}",
        3,
    );
    assert!(got.contains(&DependencyRecord::new(DependencyKind::Transitive, ["r3"])));
}

#[test]
fn response_echoing_oracle_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let method = random_method(&mut rng, &MethodShape::default());
    let idx = method.body.iter().position(|i| i.kind() == InstrKind::Invoke).unwrap();
    let crit = SlicingCriterion::at_invoke(&method, idx).unwrap();
    let oracle = extract_dependencies(&slice_method(&method, &crit), &method, &crit);
    let text: String = oracle.iter().map(|r| format!("{r}\n")).collect();
    let answered = parse_llm_dependencies(&text).records;
    let drc = compute_drc(&oracle, &answered, Threshold::default());
    assert_eq!((drc.correct, drc.total, drc.passed), (oracle.len() as u64, oracle.len() as u64, true));
}

fn record_strategy() -> impl Strategy<Value = DependencyRecord> {
    let kind = prop_oneof![
        Just(DependencyKind::Direct),
        Just(DependencyKind::Transitive),
        Just(DependencyKind::Conditional),
        Just(DependencyKind::Parallel),
        Just(DependencyKind::Derived),
    ];
    (kind, proptest::collection::btree_set("[a-z][a-z0-9]{0,3}", 1..4))
        .prop_map(|(k, vars)| DependencyRecord::new(k, vars.into_iter().map(lamd::Var::from)))
}

proptest! {
    #[test]
    fn display_then_parse_round_trips(records in proptest::collection::vec(record_strategy(), 0..12)) {
        let text: String = records.iter().map(|r| format!("{r}\n")).collect();
        let parsed = parse_llm_dependencies(&text);
        prop_assert!(parsed.malformed.is_empty());
        prop_assert_eq!(parsed.records, records);
    }

    #[test]
    fn drc_pass_matches_exact_inequality(total in 1u64..60, missing in 0u64..60, num in 1u64..100, den_extra in 0u64..100) {
        let missing = missing.min(total);
        let den = num + den_extra;
        let oracle: Vec<DependencyRecord> = (0..total)
            .map(|i| DependencyRecord::new(DependencyKind::Derived, [format!("v{i}")]))
            .collect();
        let answered = &oracle[missing as usize..];
        let drc = compute_drc(&oracle, answered, Threshold::new(num, den).unwrap());
        prop_assert_eq!(drc.correct, total - missing);
        prop_assert_eq!(drc.passed, (total - missing) * den >= num * total);
    }
}
