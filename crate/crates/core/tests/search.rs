use distir::cost::CostModel;
use distir::models::MlpSpec;
use distir::search::{enumerate, evaluate, grid_search, parse_report, write_report, write_scatter, SearchOptions, SearchSpace};
use distir::sim::{DeviceParams, LinkParams, Topology};

fn topo(world: usize, capacity: f64, bw: f64, lat: f64) -> Topology {
    Topology::uniform(
        world,
        DeviceParams {
            flops: 1e12,
            dram_bandwidth: 1e12,
            kernel_launch_overhead: 1e-6,
            memory_capacity: capacity,
        },
        LinkParams { bandwidth: bw, latency: lat },
    )
}

fn opts(jobs: usize) -> SearchOptions {
    SearchOptions {
        top_k: 10,
        jobs,
        deterministic: true,
    }
}

fn csv(report: &distir::search::SearchReport) -> String {
    let mut buf = Vec::new();
    write_report(&mut buf, report.ordered()).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn free_communication_favours_no_pipeline() {
    let spec = MlpSpec::new(4, 32, 64);
    let space = SearchSpace::training(4, 64);
    let t = topo(4, 1e18, 1e30, 0.0);
    let costs = CostModel::analytic();
    let report = grid_search(&spec, &space, &t, &costs, &opts(1)).unwrap();
    let brute = enumerate(&space)
        .unwrap()
        .iter()
        .map(|p| evaluate(&spec, p, &t, &costs))
        .filter(|r| r.feasible())
        .max_by(|a, b| a.throughput.unwrap().total_cmp(&b.throughput.unwrap()))
        .unwrap();
    let best = report.best().unwrap();
    assert_eq!(best.point.config.p, 1, "{}", best.point.config);
    assert_eq!(best.throughput, brute.throughput);
}

#[test]
fn single_point_space_ranks_it_first() {
    let spec = MlpSpec::new(2, 8, 8);
    let report = grid_search(&spec, &SearchSpace::training(1, 8), &topo(1, 1e18, 1e9, 1e-6), &CostModel::analytic(), &opts(1)).unwrap();
    assert_eq!(report.results.len(), 1);
    assert_eq!(report.ranking, vec![0]);
}

#[test]
fn searches_are_deterministic_and_thread_count_independent() {
    let spec = MlpSpec::new(4, 16, 128);
    let space = SearchSpace::training(8, 128);
    let t = topo(8, 1e18, 1e10, 1e-5);
    let a = grid_search(&spec, &space, &t, &CostModel::analytic(), &opts(1)).unwrap();
    let b = grid_search(&spec, &space, &t, &CostModel::analytic(), &opts(1)).unwrap();
    let c = grid_search(&spec, &space, &t, &CostModel::analytic(), &opts(4)).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(csv(&a), csv(&c));
    assert_eq!(a.results, c.results);
}

#[test]
fn feasible_points_fit_in_memory() {
    let spec = MlpSpec::new(4, 64, 64);
    let space = SearchSpace::training(8, 64);
    let free = grid_search(&spec, &space, &topo(8, 1e18, 1e10, 1e-5), &CostModel::analytic(), &opts(2)).unwrap();
    let mut peaks: Vec<u64> = free.results.iter().filter(|r| r.feasible()).map(|r| r.max_peak()).collect();
    peaks.sort();
    let capacity = peaks[peaks.len() / 2] as f64;
    let t = topo(8, capacity, 1e10, 1e-5);
    let report = grid_search(&spec, &space, &t, &CostModel::analytic(), &opts(2)).unwrap();
    let mut infeasible = 0;
    for r in &report.results {
        if r.feasible() {
            assert!(r.peak_memory.iter().all(|&(_, b)| b as f64 <= capacity), "{}", r.point.config);
        } else {
            infeasible += 1;
        }
    }
    assert!(infeasible > 0 && !report.ranking.is_empty());
    assert!(report.ranking.iter().all(|&i| report.results[i].feasible()));
}

#[test]
fn report_csv_round_trips_the_ranking() {
    let spec = MlpSpec::new(4, 16, 256);
    let space = SearchSpace::training(16, 256);
    let report = grid_search(&spec, &space, &topo(16, 1e18, 1e10, 1e-5), &CostModel::analytic(), &opts(4)).unwrap();
    assert_eq!(report.results.len(), 75);
    let text = csv(&report);
    assert_eq!(text.lines().count(), 76);
    let rows = parse_report(text.as_bytes()).unwrap();
    let ranked: Vec<(usize, usize, usize, usize)> = report
        .ranking
        .iter()
        .map(|&i| {
            let c = &report.results[i].point.config;
            (c.d, c.t, c.p, c.k)
        })
        .collect();
    let parsed: Vec<(usize, usize, usize, usize)> = rows.iter().filter(|r| r.feasible).map(|r| (r.d, r.t, r.p, r.k)).collect();
    assert_eq!(parsed, ranked);
    for (row, &i) in rows.iter().zip(&report.ranking) {
        assert_eq!(row.throughput, report.results[i].throughput);
    }
    let mut scatter = Vec::new();
    write_scatter(&mut scatter, &report).unwrap();
    assert!(String::from_utf8(scatter).unwrap().starts_with("peak_mem_gb,throughput,config,feasible\n"));
}

#[test]
fn pipeline_configs_include_eight_microbatches_per_stage() {
    let points = enumerate(&SearchSpace::training(16, 256)).unwrap();
    for p in [2, 4, 8] {
        assert!(points.iter().any(|g| g.config.p == p && g.config.k == 8 * p), "P={p}");
    }
    assert!(points.iter().all(|g| (g.config.p == 1) == (g.config.k == 1)));
}

#[test]
fn indivisible_points_are_recorded_not_dropped() {
    let spec = MlpSpec::new(3, 16, 8);
    let report = grid_search(&spec, &SearchSpace::training(4, 8), &topo(4, 1e18, 1e10, 1e-5), &CostModel::analytic(), &opts(1)).unwrap();
    assert_eq!(report.results.len(), enumerate(&SearchSpace::training(4, 8)).unwrap().len());
    assert!(report.results.iter().any(|r| matches!(r.infeasible, Some(distir::search::Infeasibility::Constraints(_)))));
}
