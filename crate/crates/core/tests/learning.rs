use zia_core::pipeline::{
    build_dataset, ladder_scenario, run_masks, ModalityMask, PreprocessConfig, TrainConfig,
};
use zia_core::predictor::TransformerConfig;

#[test]
fn full_modalities_beat_gaze_only_on_the_ladder_scenario() {
    let seed = 7;
    let model = TransformerConfig {
        intent_count: 10,
        ..TransformerConfig::reduced()
    };
    let cfg = PreprocessConfig::default();
    let train = TrainConfig::default();
    let data = build_dataset(&ladder_scenario(seed), &model, &cfg, &train, seed).unwrap();
    let rows = run_masks(
        &data,
        &model,
        &cfg,
        &train,
        &[ModalityMask::GAZE, ModalityMask::ALL],
        seed,
    )
    .unwrap();
    let (gaze, full) = (rows[0].0.accuracy_pct, rows[1].0.accuracy_pct);
    assert!(gaze >= 70.0, "gaze-only {gaze}");
    assert!(full >= gaze + 5.0, "full {full} vs gaze-only {gaze}");
    for (_, m, _) in &rows {
        assert!(m.losses.last() < m.losses.first());
    }
}
