use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use robrad::covariance::{BootstrapConfig, ResampleMode};
use robrad::data::{Dataset, Specification};
use robrad::error::Error;
use robrad::study::{run_study_on, StudyConfig};

fn dataset(n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut csv = String::from("g,x,d,y,w\n");
    for i in 0..n {
        let x = draw();
        let d = 0.7 * x + draw();
        let y = 0.4 * d + 1.2 * x + draw();
        let w = 0.5 + (i % 4) as f64 * 0.25;
        csv.push_str(&format!("c{},{x},{d},{y},{w}\n", i % 40));
    }
    Dataset::from_csv_reader(csv.as_bytes()).unwrap()
}

fn config(specs: Vec<Specification>) -> StudyConfig {
    StudyConfig {
        data_path: "unused.csv".into(),
        cluster_column: Some("g".into()),
        alpha: 0.05,
        variant: Default::default(),
        df_convention: Default::default(),
        bootstrap: BootstrapConfig {
            replications: 200,
            seed: 4,
            mode: ResampleMode::Cluster,
            ..Default::default()
        },
        specifications: specs,
        output_path: None,
        tau_bar: Some(0.3),
    }
}

#[test]
fn omitted_confounder_check_is_flagged() {
    let ds = dataset(600);
    let cfg = config(vec![
        Specification::new("main", "y", "d", &["x"]).main(),
        Specification::new("weighted", "y", "d", &["x"]).with_weights("w"),
        Specification::new("no_x", "y", "d", &[]),
    ]);
    let (report, artifacts) = run_study_on(&cfg, &ds).unwrap();
    assert_eq!(artifacts.labels, vec!["main", "weighted", "no_x"]);
    let r = &report.radius;
    assert!(r.lw_test.reject);
    assert!(r.b_rr > 0.0 && r.b_rr <= r.max_distance);
    assert!(!r.fully_robust);
    let s = report.sensitivity.unwrap();
    assert!(s.tau_hat > 0.0 && s.bias_bound.unwrap() > 0.0);
}

#[test]
fn main_specification_is_moved_first_and_report_is_repeatable() {
    let ds = dataset(300);
    let cfg = config(vec![
        Specification::new("half", "y", "d", &["x"]).with_filter("w > 0.6"),
        Specification::new("main", "y", "d", &["x"]).main(),
    ]);
    let (a, _) = run_study_on(&cfg, &ds).unwrap();
    let (b, _) = run_study_on(&cfg, &ds).unwrap();
    assert_eq!(a.estimates[0].label, "main");
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.estimates[1].subsample_share < 1.0);
}

#[test]
fn configuration_problems_are_config_errors() {
    let ds = dataset(100);
    let no_main = config(vec![
        Specification::new("a", "y", "d", &["x"]),
        Specification::new("b", "y", "d", &[]),
    ]);
    let e = run_study_on(&no_main, &ds).unwrap_err();
    assert!(e.is_config_error() && e.to_string().contains("exactly one main specification"));

    let unknown = config(vec![
        Specification::new("a", "y", "d", &["nope"]).main(),
        Specification::new("b", "y", "d", &[]),
    ]);
    assert!(matches!(run_study_on(&unknown, &ds), Err(Error::UnknownColumn(_))));

    let mut bad_alpha = config(vec![
        Specification::new("a", "y", "d", &["x"]).main(),
        Specification::new("b", "y", "d", &[]),
    ]);
    bad_alpha.alpha = 0.7;
    assert!(run_study_on(&bad_alpha, &ds).unwrap_err().is_config_error());
}
