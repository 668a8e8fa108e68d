use clusterdp::estimation::{tau_no_dp, tau_q};
use clusterdp::experiments::{default_config, run_experiment, Manifest, RunOptions, EXPERIMENTS};
use clusterdp::io::{read_population_csv, read_release, write_population_csv, write_release};
use clusterdp::mechanisms::cluster_dp;
use clusterdp::model::draw_design;
use clusterdp::simdata::{gen_gmm, GmmConfig};
use clusterdp::stats::McSummary;
use clusterdp::{DesignCounts, Extended, MechanismParams, SeedTree, Stream};

fn small_gmm() -> clusterdp::PopulationDataset {
    let cfg = GmmConfig { cluster_sizes: vec![30, 40], ..GmmConfig::default() };
    gen_gmm(&cfg, &mut SeedTree::new(5).stream(Stream::Population, 0)).unwrap()
}

#[test]
fn population_csv_round_trip() {
    let pop = small_gmm();
    let mut buf = Vec::new();
    write_population_csv(&pop, &mut buf).unwrap();
    let back = read_population_csv(buf.as_slice(), pop.space()).unwrap();
    assert_eq!(back.y0(), pop.y0());
    assert_eq!(back.y1(), pop.y1());
    assert_eq!(back.clusters(), pop.clusters());
}

#[test]
fn release_round_trip_preserves_estimate() {
    let pop = small_gmm();
    let tree = SeedTree::new(6);
    let counts = DesignCounts::balanced(&pop.cluster_sizes()).unwrap();
    let design = draw_design(&pop, &counts, &mut tree.stream(Stream::Assignment, 0)).unwrap();
    let params = MechanismParams::cluster_dp(0.02, Extended::Finite(10.0), 0.5);
    let (_, release) = cluster_dp(
        &pop,
        &design,
        &params,
        &mut tree.stream(Stream::Laplace, 0),
        &mut tree.stream(Stream::Resampling, 0),
    )
    .unwrap();
    let (mut csv, mut json) = (Vec::new(), Vec::new());
    write_release(&release, &mut csv, &mut json).unwrap();
    let back = read_release(csv.as_slice(), json.as_slice()).unwrap();
    assert_eq!(tau_q(&back).unwrap().estimate, tau_q(&release).unwrap().estimate);
}

#[test]
fn debiased_estimate_centers_on_fixed_design_target() {
    let pop = small_gmm();
    let tree = SeedTree::new(7);
    let counts = DesignCounts::balanced(&pop.cluster_sizes()).unwrap();
    let design = draw_design(&pop, &counts, &mut tree.stream(Stream::Assignment, 0)).unwrap();
    let target = tau_no_dp(&pop, &design).unwrap();
    let params = MechanismParams::cluster_dp(0.02, Extended::Finite(5.0), 0.6);
    let xs: Vec<f64> = (0..4000)
        .map(|r| {
            let (_, rel) = cluster_dp(
                &pop,
                &design,
                &params,
                &mut tree.stream(Stream::Laplace, r),
                &mut tree.stream(Stream::Resampling, r),
            )
            .unwrap();
            tau_q(&rel).unwrap().estimate
        })
        .collect();
    let s = McSummary::of(&xs);
    assert!((s.mean - target).abs() <= 4.0 * s.se_mean, "{} vs {target} (se {})", s.mean, s.se_mean);
}

#[test]
fn every_default_config_is_a_json_object() {
    for name in EXPERIMENTS {
        let text = default_config(name).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value.is_object(), "{name}");
    }
}

#[test]
fn experiment_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{"population": {"gmm": {"cluster_sizes": [40, 60]}}, "replications": 50}"#;
    let options = RunOptions { seed: Some(11), threads: 2, out_dir: dir.path().to_path_buf() };
    let manifest = run_experiment("distribution", Some(config), &options).unwrap();
    assert_eq!(manifest.seed, 11);
    for file in &manifest.outputs {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let back: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back.config_hash, manifest.config_hash);
    let csv = std::fs::read_to_string(dir.path().join("distribution.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("experiment,mechanism"));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions { seed: None, threads: 1, out_dir: dir.path().to_path_buf() };
    assert!(run_experiment("bound", Some(r#"{"no_such_field": 1}"#), &options).is_err());
}
