mod common;

use common::synthetic;
use limac::action_space::ActionType;
use limac::controller::{MockGenerator, OraclePredictor, RandomPredictor};
use limac::episode::SplitName;
use limac::eval::{evaluate, evaluate_steps, EvalOptions, Metric};

fn only(metrics: &[Metric]) -> EvalOptions {
    EvalOptions {
        metrics: metrics.iter().copied().collect(),
        ..Default::default()
    }
}

#[test]
fn random_type_accuracy_is_one_in_eleven() {
    let split = synthetic(700, 21, SplitName::Test);
    assert!(split.step_count() >= 2000);
    let report = evaluate(&split, &RandomPredictor { seed: 3 }, None, &only(&[Metric::Type])).unwrap();
    let acc = report.action_type_accuracy.unwrap();
    assert!((acc - 1.0 / 11.0).abs() <= 0.03, "random type accuracy {acc}");
}

#[test]
fn random_click_accuracy_matches_containment_expectation() {
    let split = synthetic(700, 22, SplitName::Test);
    let opts = only(&[Metric::ClickTarget]);
    let report = evaluate(&split, &RandomPredictor { seed: 4 }, None, &opts).unwrap();

    // Uniform choice succeeds with probability (#elements inside the target box) / k.
    let mut expected = 0.0;
    let mut inverse_k = 0.0;
    let mut n = 0;
    for step in split.episodes.iter().flat_map(|e| &e.steps) {
        let a = &step.action;
        if !matches!(a.action_type(), ActionType::Click | ActionType::LongPress) {
            continue;
        }
        let obs = &step.observation;
        let target = obs.box_of(a.target().unwrap()).unwrap();
        let inside = (0..obs.len())
            .filter(|&i| obs.box_of(i).unwrap().within(&target, 0))
            .count();
        expected += inside as f64 / obs.len() as f64;
        inverse_k += 1.0 / obs.len() as f64;
        n += 1;
    }
    assert_eq!(report.click_target_steps, n);
    let (expected, inverse_k) = (expected / n as f64, inverse_k / n as f64);
    let acc = report.click_target_accuracy.unwrap();
    assert!((acc - expected).abs() <= 0.04, "random click {acc} vs expected {expected} over {n} steps");
    assert!(expected >= inverse_k);
}

#[test]
fn mock_error_rate_controls_text_accuracy() {
    let split = synthetic(700, 23, SplitName::Test);
    let oracle = OraclePredictor::from_split(&split);
    let text = only(&[Metric::Text]);

    let always_wrong = MockGenerator::grammar(1.0, 1);
    let r = evaluate(&split, &oracle, Some(&always_wrong), &text).unwrap();
    assert!(r.text_steps >= 300);
    assert_eq!(r.text_accuracy, Some(0.0));

    let noisy = MockGenerator::grammar(0.3, 1);
    let r = evaluate(&split, &oracle, Some(&noisy), &text).unwrap();
    let acc = r.text_accuracy.unwrap();
    assert!((acc - 0.70).abs() <= 0.04, "text accuracy {acc} at error rate 0.3 over {} steps", r.text_steps);

    let clean = MockGenerator::grammar(0.0, 1);
    let r = evaluate(&split, &oracle, Some(&clean), &text).unwrap();
    assert_eq!(r.text_accuracy, Some(1.0));
}

#[test]
fn overall_success_implies_type_success() {
    let split = synthetic(300, 24, SplitName::Test);
    let gen = MockGenerator::grammar(0.3, 2);
    let opts = EvalOptions::default();
    let outcomes = evaluate_steps(&split, &RandomPredictor { seed: 5 }, Some(&gen), &opts).unwrap();
    let mut successes = 0;
    for o in &outcomes {
        if o.overall == Some(true) {
            successes += 1;
            assert_eq!(o.predicted_type, Some(o.truth.action_type()), "{} step {}", o.episode, o.step);
        }
        assert_eq!(o.overall == Some(false), o.failure.is_some());
    }
    assert!(successes > 0);

    let report = evaluate(&split, &RandomPredictor { seed: 5 }, Some(&gen), &opts).unwrap();
    assert!(report.overall_relaxed_accuracy.unwrap() <= report.action_type_accuracy.unwrap());
    let failures = outcomes.iter().filter(|o| o.overall == Some(false)).count();
    assert_eq!(report.failure_taxonomy.unwrap().total(), failures);
    let confusion_total: usize = report.confusion_matrix.unwrap().iter().flatten().sum();
    assert_eq!(confusion_total, report.steps);
}

#[test]
fn long_press_exclusion_shrinks_click_pass() {
    let split = synthetic(200, 25, SplitName::Test);
    let oracle = OraclePredictor::from_split(&split);
    let with = evaluate(&split, &oracle, None, &only(&[Metric::ClickTarget])).unwrap();
    let without = evaluate(
        &split,
        &oracle,
        None,
        &EvalOptions {
            include_long_press: false,
            ..only(&[Metric::ClickTarget])
        },
    )
    .unwrap();
    let long_presses = split
        .episodes
        .iter()
        .flat_map(|e| &e.steps)
        .filter(|s| s.action.action_type() == ActionType::LongPress)
        .count();
    assert!(long_presses > 0);
    assert_eq!(with.click_target_steps, without.click_target_steps + long_presses);
    assert_eq!(with.click_target_accuracy, Some(1.0));
}
