use brmeta::extremes::DependenceParams;
use brmeta::model::MarginalDesign;
use brmeta::partition::{partition_grid, Partition};
use brmeta::pipeline::*;
use brmeta::simulate::*;
use brmeta::stats::quantile;
use brmeta::svc::PenaltyConfig;
use nalgebra::DMatrix;

fn problem(nx: usize, n: usize, seed: u64) -> SpatialProblem {
    let sites = grid_sites(nx, nx);
    let margins = linear_location_margins(&sites, [0.5, 0.5], 1.5, 0.2);
    let dep = DependenceParams::from_natural(0.8, 10.0).unwrap();
    let cfg = SimConfig::new(sites.clone(), n, dep, seed).with_margins(Margins::PerSite(margins));
    let y = simulate_gev_field(&cfg).unwrap();
    let thr = (0..sites.len())
        .map(|j| quantile(&y.column(j).iter().copied().collect::<Vec<_>>(), 0.8))
        .collect();
    let design = MarginalDesign::linear_location(&sites);
    SpatialProblem::new(sites, y, design, thr).unwrap()
}

#[test]
fn single_block_reproduces_block_estimate() {
    let p = problem(4, 150, 3);
    let part = Partition::single_block(p.d()).unwrap();
    let out = run_pipeline(&p, &part, &PipelineConfig::default()).unwrap();
    let m = &out.meta;
    for (a, b) in m.theta_m.iter().zip(&out.round_one[0].theta) {
        assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
    }
    assert_eq!(m.theta_c, out.round_one[0].theta);
    assert!(m.se.iter().all(|s| s.is_finite() && *s > 0.0));
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let p = problem(6, 150, 11);
    let part = partition_grid(&p.coords, 9).unwrap();
    assert_eq!(part.num_blocks(), 4);
    let one = run_pipeline(&p, &part, &PipelineConfig::default()).unwrap();
    let cfg = PipelineConfig {
        workers: 4,
        ..PipelineConfig::default()
    };
    let four = run_pipeline(&p, &part, &cfg).unwrap();
    assert_eq!(meta_result_bytes(&one.meta), meta_result_bytes(&four.meta));
    let est = &one.meta.natural.values;
    assert!((est[0] - 0.8).abs() < 0.3, "alpha {}", est[0]);
    assert!((est[5] - 0.2).abs() < 0.15, "xi {}", est[5]);
}

#[test]
fn zero_workers_is_a_configuration_error() {
    let p = problem(3, 60, 1);
    let part = Partition::single_block(p.d()).unwrap();
    let cfg = PipelineConfig {
        workers: 0,
        ..PipelineConfig::default()
    };
    assert_eq!(run_pipeline(&p, &part, &cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn nonconvergence_aborts_with_block_list() {
    let p = problem(6, 120, 5);
    let part = partition_grid(&p.coords, 9).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.optim.max_iter = 0;
    cfg.optim.simplex_evals = 0;
    let err = run_pipeline(&p, &part, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    cfg.drop_failed = true;
    assert!(run_pipeline(&p, &part, &cfg).is_err());
}

fn svc_problem() -> (SpatialProblem, Partition) {
    let mut p = problem(6, 500, 8);
    p.design = MarginalDesign::intercepts(p.d());
    let part = partition_grid(&p.coords, 9).unwrap();
    (p, part)
}

#[test]
fn svc_pipeline_reports_gcv_for_each_grid_point() {
    let (p, part) = svc_problem();
    let svc = SvcConfig {
        knots: Some(0),
        penalty: PenaltyConfig {
            grid1: vec![0.0, 0.1],
            grid2: vec![0.0],
            ..PenaltyConfig::default()
        },
        ..SvcConfig::default()
    };
    let out = run_pipeline_svc(&p, &part, &svc, &PipelineConfig::default()).unwrap();
    assert_eq!(out.gcv.len(), 2);
    let best = out
        .gcv
        .iter()
        .filter_map(|g| g.gcv.map(|v| (v, g.lambda1)))
        .fold((f64::INFINITY, f64::NAN), |a, b| if b.0 < a.0 { b } else { a });
    assert_eq!(out.lambda.0, best.1);
    assert_eq!(out.fields.site.len(), p.d());
    assert!(out.fields.mu_se.iter().all(|s| s.is_finite()));
}

#[test]
fn unpenalized_svc_recovers_linear_location() {
    let (p, part) = svc_problem();
    let svc = SvcConfig {
        knots: Some(0),
        penalty: PenaltyConfig::fixed(0.0, 0.0),
        ..SvcConfig::default()
    };
    let out = run_pipeline_svc(&p, &part, &svc, &PipelineConfig::default()).unwrap();
    assert_eq!(out.gcv.len(), 1);
    assert!(out.gcv[0].gcv.is_none());
    let mut mu = vec![0.0; p.d()];
    for (s, m) in out.fields.site.iter().zip(&out.fields.mu) {
        mu[*s] = *m;
    }
    let truth: Vec<f64> = p.coords.iter().map(|s| 0.5 * s[0] + 0.5 * s[1]).collect();
    let err = mu.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.d() as f64;
    assert!(err < 0.5, "mean location error {err}");
}

#[test]
fn messages_reject_corruption() {
    let m = RoundTwoMsg {
        block_id: 0,
        psi: DMatrix::from_element(3, 2, 0.5),
        sensitivity: DMatrix::identity(2, 2),
    };
    let mut bytes = m.encode();
    bytes.push(0);
    assert!(RoundTwoMsg::decode(&bytes).is_err());
}
