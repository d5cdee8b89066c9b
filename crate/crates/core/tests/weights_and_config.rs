use dnt_core::checkpoint::{manifest_path, read_archive};
use dnt_core::dualnet::{forward, DualNetWeights};
use dnt_core::features::{FeatureStack, LayerId};
use dnt_core::tensor::Tensor3;
use dnt_core::tracking::{AnomalyRule, TrackerConfig};

#[test]
fn weights_survive_a_save_load_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layer2.bin");
    let w = DualNetWeights::init(5, [6, 4, 3], LayerId::Layer2, 9);
    w.save(&path).unwrap();
    assert!(manifest_path(&path).exists());
    let back = DualNetWeights::load(&path).unwrap();
    assert_eq!(back, w);
    let feats = FeatureStack::new(Tensor3::from_vec(5, 4, 4, (0..80).map(|i| i as f64 / 80.0).collect()).unwrap(), LayerId::Layer2, 16).unwrap();
    assert_eq!(forward(&w, &feats).unwrap(), forward(&back, &feats).unwrap());
    let names: Vec<String> = read_archive(&path).unwrap().into_keys().collect();
    assert!(names.contains(&"conv1.weight".to_string()) && names.contains(&"head.bias".to_string()));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tracker.conf");
    let mut cfg = TrackerConfig::default();
    cfg.set("anomaly_rule", "deviation").unwrap();
    cfg.set("fusion_weight", "0.25").unwrap();
    cfg.set("learning_rate", "0.01").unwrap();
    cfg.set("score_offset", "0.3").unwrap();
    std::fs::write(&path, format!("# tuned\n{}", cfg.to_text())).unwrap();
    let back = TrackerConfig::from_file(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.anomaly_rule, AnomalyRule::Deviation);
    assert_eq!(back.score_offset, Some(0.3));
}

#[test]
fn config_errors_name_the_line() {
    let err = TrackerConfig::from_text("candidates = 10\nfusion_weight = lots\n").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    let err = TrackerConfig::from_text("feature_layers = conv3_3, conv4_3, conv5_3\n").unwrap_err().to_string();
    assert!(err.contains("hypercolumn"), "{err}");
}
