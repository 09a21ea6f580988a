use tnbm::cvbm::{loss, train_continuous, ContinuousData, EmbeddingLayer, RAW_DIM, REDUCED_DIM};
use tnbm::data::load_iris_csv;
use tnbm::loss::RegMode;
use tnbm::newton::{NewtonConfig, Solver};
use tnbm::sweep::{OptimizerKind, RegularizationSchedule};
use tnbm::Mps;

fn iris() -> ContinuousData {
    let records = load_iris_csv(concat!(env!("CARGO_MANIFEST_DIR"), "/data/iris.csv"), true).unwrap();
    ContinuousData::from_records(&records, RAW_DIM).unwrap()
}

fn amplitudes(mps: &Mps, layer: &EmbeddingLayer, data: &ContinuousData) -> Vec<f64> {
    data.reduced(layer).unwrap().iter().map(|f| mps.amplitude_features(f).unwrap()).collect()
}

fn cfg() -> NewtonConfig {
    NewtonConfig { solver: Solver::Iterative, ..Default::default() }
}

#[test]
fn trained_layer_stays_isometric_and_trace_matches_the_model() {
    let data = iris();
    for opt in [OptimizerKind::Newton, OptimizerKind::reg_newton_bias()] {
        let layer = EmbeddingLayer::random(4, RAW_DIM, REDUCED_DIM, 17).unwrap();
        let (mps, layer, trace) =
            train_continuous(Mps::random(4, REDUCED_DIM, 4, 3).unwrap(), layer, &data, opt, &RegularizationSchedule::default(), 2, &cfg(), 0.05)
                .unwrap();
        assert!(layer.isometry_defect() < 1e-10);
        let full = loss(&mps, &layer, &data, RegMode::NONE).unwrap();
        assert!((trace.final_nll() - full).abs() < 1e-8 * full.abs().max(1.0), "{} {} vs {full}", opt.name(), trace.final_nll());
        assert!(full < trace.initial_nll);
    }
}

#[test]
#[ignore = "fails: -ln (o + b)^2 is symmetric about o = -b, so no overlap changes sign; the positive count is frozen at its initial value (62..80 of 150)"]
fn bias_regularized_amplitudes_share_one_sign_after_a_sweep() {
    let data = iris();
    let mut agreeing = 0;
    for seed in 0..5u64 {
        let layer = EmbeddingLayer::random(4, RAW_DIM, REDUCED_DIM, seed + 100).unwrap();
        let (mps, layer, _) = train_continuous(
            Mps::random(4, REDUCED_DIM, 5, seed).unwrap(),
            layer,
            &data,
            OptimizerKind::reg_newton_bias(),
            &RegularizationSchedule::default(),
            1,
            &cfg(),
            0.05,
        )
        .unwrap();
        let amps = amplitudes(&mps, &layer, &data);
        if amps.iter().all(|&a| a > 0.0) || amps.iter().all(|&a| a < 0.0) {
            agreeing += 1;
        }
    }
    assert!(agreeing >= 4, "one sign in {agreeing}/5 seeds");
}

