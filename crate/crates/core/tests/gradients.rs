use flynet::gradcheck::{run_suite, Fault, GradCheckConfig};

fn report(results: &[flynet::gradcheck::CheckResult]) {
    for r in results {
        println!(
            "{:<20} max rel err {:.3e} (< {:.0e}) over {} coords",
            r.name, r.max_rel_error, r.threshold, r.coordinates
        );
    }
}

#[test]
fn double_precision_suite_passes() {
    let results = run_suite(&GradCheckConfig::double()).unwrap();
    report(&results);
    assert_eq!(results.len(), 11);
    for r in &results {
        assert!(r.passed(), "{r:?}");
        assert!(r.coordinates > 0);
    }
}

#[test]
fn single_precision_suite_passes_looser_bound() {
    let results = run_suite(&GradCheckConfig::single()).unwrap();
    report(&results);
    for r in &results {
        assert_eq!(r.threshold, 1e-2);
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn broken_conv_backward_is_named() {
    let cfg = GradCheckConfig { fault: Some(Fault::ConvSignFlip), ..GradCheckConfig::double() };
    let failed: Vec<String> = run_suite(&cfg).unwrap().into_iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    assert_eq!(failed, vec!["conv3x3".to_string(), "conv1x1".to_string()]);
}
