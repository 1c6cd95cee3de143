use embinvert_core::gradsuite;

#[test]
fn every_operation_matches_finite_differences() {
    let outcomes = gradsuite::run(0x6AD5, 5).unwrap();
    assert_eq!(outcomes.len(), gradsuite::checks().len() * 5);
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).collect();
    assert!(failed.is_empty(), "failed checks: {failed:#?}");
    for o in &outcomes {
        assert!(o.checked > 0, "{} probed no coordinates", o.name);
    }
}

#[test]
fn outcomes_are_reproducible() {
    assert_eq!(gradsuite::run(3, 1).unwrap(), gradsuite::run(3, 1).unwrap());
}
