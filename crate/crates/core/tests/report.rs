use horizon_core::metrics::{eval_rollout, EvalConfig};
use horizon_core::world::{gen_scene, render_clip, WorldConfig};

fn validator() -> jsonschema::Validator {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn clip() -> Vec<horizon_core::world::FrameBundle> {
    let world = WorldConfig {
        width: 16,
        height: 16,
        ..WorldConfig::default()
    };
    render_clip(&gen_scene(12, &world).unwrap(), 48).unwrap()
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let frames = clip();
    let r = eval_rollout(&frames, Some(&frames), &EvalConfig::default(), "abc").unwrap();
    assert_eq!(r.drift_referenced, Some(0.0));
    assert_eq!(r.mean_quality_referenced, Some(1.0));
    assert_eq!(r.flow_epe, Some(0.0));
    assert_eq!(r.depth_mae, Some(0.0));
    assert!(r.temporal_consistency > 0.0 && r.temporal_consistency <= 1.0);
    assert_eq!(r.config_hash, "abc");
}

#[test]
fn reports_match_the_published_schema() {
    let frames = clip();
    let v = validator();
    for truth in [Some(&frames[..]), None] {
        let r = eval_rollout(&frames, truth, &EvalConfig::default(), "h").unwrap();
        let json = serde_json::to_value(&r).unwrap();
        let errors: Vec<String> = v.iter_errors(&json).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{errors:?}");
    }
    let mut bad = serde_json::to_value(eval_rollout(&frames, None, &EvalConfig::default(), "h").unwrap()).unwrap();
    bad["surprise"] = serde_json::json!(1);
    assert!(!v.is_valid(&bad));
}

#[test]
fn reports_are_deterministic() {
    let frames = clip();
    let a = eval_rollout(&frames, Some(&frames[..]), &EvalConfig::default(), "h").unwrap();
    let b = eval_rollout(&frames, Some(&frames[..]), &EvalConfig::default(), "h").unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
