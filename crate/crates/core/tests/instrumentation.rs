use lumacurve::synth::{self, DatasetParams};
use lumacurve::tone_curve::curve_application_count;
use lumacurve::trainer::{train_on, TrainConfig};

// Single test in this binary so the process-wide counter is not shared.
#[test]
fn baseline_training_never_applies_a_curve() {
    let params = DatasetParams {
        seed: 0,
        n_scenes: 2,
        n_illuminants: 2,
        n_positions: 4,
        resolution: 32,
    };
    let data = synth::into_dataset(synth::generate(&params).unwrap());
    let cfg = TrainConfig {
        epochs: 3,
        bre_enabled: false,
        input_size: 32,
        ..TrainConfig::default()
    };
    assert_eq!(curve_application_count(), 0);
    train_on(&data, &cfg).unwrap();
    assert_eq!(curve_application_count(), 0);

    let bre = TrainConfig {
        bre_enabled: true,
        ..cfg
    };
    train_on(&data, &bre).unwrap();
    assert!(curve_application_count() > 0);
}
