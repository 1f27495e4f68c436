use std::path::Path;

use fedbench_cli::{run_experiment, ExperimentConfig};

const HOMOGENEOUS: &str = r#"
name = "homogeneous"
n_runs = 10
master_seed = 31
output_dir = "unused"
baselines = true

[simulation]
setting = "I"
alpha = 0.0
site_sizes = [300, 300, 300]

[[protocols]]
kind = "GLORE"
"#;

#[test]
fn pooled_fit_beats_local_fits_and_matches_glore() {
    let cfg = ExperimentConfig::parse(HOMOGENEOUS)
        .unwrap()
        .validate(Path::new("."), None)
        .unwrap();
    let results = run_experiment(&cfg).unwrap();
    let labels: Vec<&str> = results.models.iter().map(|m| m.label.as_str()).collect();
    assert_eq!(labels, ["Central", "Site 1 Local", "Site 2 Local", "Site 3 Local", "GLORE"]);

    let avg_auc = |m: usize| (0..3).map(|s| results.mean_auc(m, s).unwrap()).sum::<f64>() / 3.0;
    let central = avg_auc(0);
    for local in 1..=3 {
        assert!(central >= avg_auc(local), "{} beats central", labels[local]);
    }

    for row in &results.outcomes {
        let c = &row[0].as_ref().unwrap().fit.coefficients.values;
        let g = &row[4].as_ref().unwrap().fit.coefficients.values;
        assert!((c - g).amax() < 1e-6);
    }
}
