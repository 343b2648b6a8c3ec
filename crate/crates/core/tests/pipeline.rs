use nalgebra::Vector2;

use arfbl::config::Config;
use arfbl::controllers::{LawKind, RobustLaw};
use arfbl::experiment::{self, RunSpec, RunSummary, Setup};
use arfbl::gp_model::{extract_components, GpDataset};
use arfbl::lyapunov::build_design;
use arfbl::rr_dynamics::{mass_matrix, ManipulatorParams};
use arfbl::sim::{replay_check, run, SimConfig, SimLog, SimSettings};
use arfbl::trajectory::{Trajectory, TrajectoryConfig};

#[test]
fn perturbed_alpha_regression_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let b = experiment::cmd_bounds(&Config::default(), dir.path()).unwrap();
    // Recorded at first build for relative_scale 0.1, seed 42, density 25.
    assert!((b.alpha - 0.250_751_944_553_158_6).abs() < 1e-12, "alpha = {}", b.alpha);
    assert!(b.alpha < 1.0);
    assert!(dir.path().join("bounds.toml").exists());
}

#[test]
fn zero_perturbation_gives_zero_mismatch_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.perturbation.relative_scale = 0.0;
    let b = experiment::cmd_bounds(&cfg, dir.path()).unwrap();
    assert_eq!(b.alpha, 0.0);
    assert_eq!(b.phi, 0.0);
}

#[test]
fn gp_fit_quality_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::default();
    let models = experiment::cmd_fit_gp(&cfg, dir.path()).unwrap();
    let ds = GpDataset::load(&dir.path().join("dataset.csv")).unwrap();
    assert_eq!(ds.len(), 50);
    for (j, model) in models.iter().enumerate() {
        let y = &ds.targets[j];
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let rmse = (ds
            .inputs
            .iter()
            .zip(y)
            .map(|(x, t)| (model.predict(x) - t).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(rmse < 0.01 * sd, "joint {j}: rmse {rmse} sd {sd}");
    }
    // Recorded at first build: 7.97e-3.
    let mut worst: f64 = 0.0;
    for x in &ds.inputs {
        let q = Vector2::new(x[0], x[1]);
        let ex = extract_components(&models, &q, &Vector2::new(x[2], x[3]));
        let m = mass_matrix(&cfg.plant, &q);
        worst = worst.max((ex.m_hat - m).norm() / m.norm());
    }
    assert!(worst < 1e-2, "relative inertia error {worst}");
}

#[test]
fn fit_gp_is_reproducible() {
    let cfg = Config::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    experiment::cmd_fit_gp(&cfg, a.path()).unwrap();
    experiment::cmd_fit_gp(&cfg, b.path()).unwrap();
    let ha = std::fs::read(a.path().join("hyperparams.toml")).unwrap();
    let hb = std::fs::read(b.path().join("hyperparams.toml")).unwrap();
    assert_eq!(ha, hb);
}

#[test]
fn loaded_hyperparameters_reproduce_the_fit() {
    let cfg = Config::default();
    let a = tempfile::tempdir().unwrap();
    let fitted = experiment::cmd_fit_gp(&cfg, a.path()).unwrap();
    let mut reload = cfg.clone();
    reload.gp.dataset = Some(a.path().join("dataset.csv"));
    reload.gp.hyperparams = Some(a.path().join("hyperparams.toml"));
    let b = tempfile::tempdir().unwrap();
    let loaded = experiment::cmd_fit_gp(&reload, b.path()).unwrap();
    let x = [0.05, -0.02, 0.4, -0.3, 2.0, -1.0];
    assert_eq!(fitted[0].predict(&x), loaded[0].predict(&x));
    assert_eq!(fitted[1].predict(&x), loaded[1].predict(&x));
}

#[test]
fn experiment1_metadata_and_shared_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = experiment::experiment1(&Config::default(), dir.path()).unwrap();
    let meta = std::fs::read_to_string(dir.path().join("arfbl.meta.toml")).unwrap();
    assert!(meta.contains("k_rho = 1000.0"), "{meta}");
    let (r, a) = (&out.logs[0], &out.logs[1]);
    assert_eq!(r.rows.len(), a.rows.len());
    assert!(r
        .rows
        .iter()
        .zip(&a.rows)
        .all(|(x, y)| x.q_ref == y.q_ref && x.t == y.t));
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains("bounds: alpha="));
}

#[test]
fn experiment2_metadata() {
    let dir = tempfile::tempdir().unwrap();
    experiment::experiment2(&Config::default(), dir.path()).unwrap();
    let meta = std::fs::read_to_string(dir.path().join("arfbl.meta.toml")).unwrap();
    assert!(meta.contains("k_rho = 500.0"), "{meta}");
    assert!(meta.contains("model = \"gp\""));
}

#[test]
fn report_is_recomputable_from_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = experiment::experiment1(&Config::default(), dir.path()).unwrap();
    for run in &out.report.runs {
        let log = SimLog::load(&run.csv).unwrap();
        let again = RunSummary::from_log(&run.label, run.law, run.k_rho, &log, run.csv.clone());
        assert_eq!(&again, run);
    }
    let mut rdr = csv::Reader::from_path(dir.path().join("report.csv")).unwrap();
    assert_eq!(rdr.records().count(), 2);
}

#[test]
fn cross_seed_log_does_not_replay() {
    let plant = ManipulatorParams::table1();
    let hat = arfbl::rr_dynamics::perturb_params(&plant, 0.1, 42).unwrap();
    let design = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
    let traj7 = Trajectory::from_config(&TrajectoryConfig::default()).unwrap();
    let traj8 = Trajectory::from_config(&TrajectoryConfig {
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let settings = SimSettings {
        duration: 1.0,
        ..Default::default()
    };
    let cfg = |traj| SimConfig {
        plant: &plant,
        model: &hat,
        design: &design,
        trajectory: traj,
        law: RobustLaw::Basic,
        k_rho: 1000.0,
        settings,
        monitor_box: None,
    };
    let log = run(&cfg(&traj7)).unwrap();
    assert!(replay_check(&log, &cfg(&traj7)));
    assert!(!replay_check(&log, &cfg(&traj8)));
    let other_hat = arfbl::rr_dynamics::perturb_params(&plant, 0.1, 43).unwrap();
    let mut c = cfg(&traj7);
    c.model = &other_hat;
    assert!(!replay_check(&log, &c));
}

// A heavier position weight in P makes the adaptive law act on the default
// experiment, exercising growth, saturation and replay of the switching.
#[test]
fn adaptive_law_active_with_weighted_p() {
    let mut cfg = Config::default();
    cfg.controller.p_e = 20_000.0;
    cfg.controller.p_ed = 1.0;
    let hat = cfg.perturbed_model().unwrap();
    let setup = Setup::new(&cfg, &hat, "perturbed").unwrap();
    for law in [RobustLaw::Basic, RobustLaw::Deadband] {
        let spec = RunSpec {
            label: "a",
            law,
            k_rho: 1000.0,
        };
        let sim = setup.sim_config(&spec);
        let log = run(&sim).unwrap();
        assert!(replay_check(&log, &sim));
        let h = cfg.sim.step;
        assert!(log.terminal_rho() > 0.0);
        assert!(log.rho_increments_valid(1000.0, h));
        for (i, a) in log.rows.iter().enumerate().step_by(97) {
            for b in &log.rows[i..] {
                assert!(b.rho - a.rho <= 1000.0 * (b.t - a.t) + 1e-9);
            }
        }
        assert!(log.boundary_layer_entry(cfg.controller.eps).is_some());
        assert!(log.rho_settled(0.2));
    }
}

#[test]
fn simulate_writes_a_replayable_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.sim.duration = 1.0;
    cfg.controller.law = LawKind::Static;
    let (log, report) = experiment::cmd_simulate(&cfg, dir.path()).unwrap();
    assert_eq!(log.rows.len(), 1001);
    assert_eq!(SimLog::load(&dir.path().join("sim.csv")).unwrap().rows.len(), 1001);
    assert_eq!(report.runs[0].law, LawKind::Static);
}
