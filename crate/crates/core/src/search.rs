//! Exhaustive grid search over distribution strategies, evaluated entirely
//! in simulation.

use std::io;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::cost::CostModel;
use crate::ir::DeviceId;
use crate::models::MlpSpec;
use crate::sim::{simulate_declared, Topology};
use crate::transforms::{emit_mlp, DistConfig};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("world size {0} is not a positive power of two")]
    WorldSize(usize),
    #[error("topology has {have} devices, the search needs {need}")]
    Topology { have: usize, need: usize },
    #[error("empty batch range {0}..={1}")]
    BatchRange(usize, usize),
    #[error("report CSV: {0}")]
    Csv(String),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

/// Degrees multiply to the world size exactly; K ranges over `k_values`
/// when P > 1 and is 1 otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub world_size: usize,
    pub batch_sizes: Vec<usize>,
    pub k_values: Vec<usize>,
}

impl SearchSpace {
    /// Training mode: one global batch size, K ∈ {2, 4, …, 128}.
    pub fn training(world_size: usize, batch: usize) -> SearchSpace {
        SearchSpace {
            world_size,
            batch_sizes: vec![batch],
            k_values: (1..=7).map(|i| 1usize << i).collect(),
        }
    }

    /// Batch size as a free variable: every power of two in `lo..=hi`.
    pub fn batch_sweep(world_size: usize, lo: usize, hi: usize) -> Result<SearchSpace, SearchError> {
        let batches: Vec<usize> = (0..usize::BITS).map(|i| 1usize << i).filter(|b| (lo..=hi).contains(b)).collect();
        if batches.is_empty() {
            return Err(SearchError::BatchRange(lo, hi));
        }
        Ok(SearchSpace {
            batch_sizes: batches,
            ..SearchSpace::training(world_size, 1)
        })
    }
}

/// One grid point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridPoint {
    pub config: DistConfig,
    pub batch: usize,
}

impl GridPoint {
    fn key(&self) -> (usize, usize, usize, usize, usize) {
        (self.config.d, self.config.t, self.config.p, self.config.k, self.batch)
    }
}

fn powers_of_two_upto(n: usize) -> impl Iterator<Item = usize> {
    (0..usize::BITS).map(|i| 1usize << i).take_while(move |&x| x <= n)
}

/// All points of `space`, sorted by `(D, T, P, K, batch)`.
pub fn enumerate(space: &SearchSpace) -> Result<Vec<GridPoint>, SearchError> {
    let w = space.world_size;
    if w == 0 || !w.is_power_of_two() {
        return Err(SearchError::WorldSize(w));
    }
    let mut out = Vec::new();
    for d in powers_of_two_upto(w) {
        for t in powers_of_two_upto(w / d) {
            let p = w / (d * t);
            let ks: &[usize] = if p > 1 { &space.k_values } else { &[1] };
            for &k in ks {
                for &batch in &space.batch_sizes {
                    out.push(GridPoint {
                        config: DistConfig::new(d, t, p, k),
                        batch,
                    });
                }
            }
        }
    }
    out.sort_by_key(GridPoint::key);
    out.dedup();
    Ok(out)
}

/// Why a point was not feasible.
#[derive(Clone, Debug, PartialEq)]
pub enum Infeasibility {
    /// Divisibility or degree constraints of the transform.
    Constraints(Vec<String>),
    Simulation(String),
    Memory { device: DeviceId, peak: u64, capacity: u64 },
}

impl std::fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Infeasibility::Constraints(v) => write!(f, "{}", v.join("; ")),
            Infeasibility::Simulation(e) => write!(f, "simulation failed: {e}"),
            Infeasibility::Memory { device, peak, capacity } => {
                write!(f, "device {device}: peak {peak} B exceeds capacity {capacity} B")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub point: GridPoint,
    /// Samples per second; `None` when the point could not be simulated.
    pub throughput: Option<f64>,
    /// Simulated peak bytes per device.
    pub peak_memory: Vec<(DeviceId, u64)>,
    pub infeasible: Option<Infeasibility>,
    /// Wall-clock time of the transform and simulation.
    pub sim_seconds: f64,
}

impl SearchResult {
    pub fn feasible(&self) -> bool {
        self.infeasible.is_none()
    }

    pub fn max_peak(&self) -> u64 {
        self.peak_memory.iter().map(|&(_, b)| b).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub top_k: usize,
    /// Worker threads; 1 evaluates serially.
    pub jobs: usize,
    /// Report zero simulation time so that reports are byte-reproducible.
    pub deterministic: bool,
}

impl Default for SearchOptions {
    fn default() -> SearchOptions {
        SearchOptions {
            top_k: 10,
            jobs: 1,
            deterministic: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchReport {
    /// One result per grid point, in enumeration order.
    pub results: Vec<SearchResult>,
    /// Indices into `results` of the feasible points, best first.
    pub ranking: Vec<usize>,
    pub top_k: usize,
}

impl SearchReport {
    pub fn best(&self) -> Option<&SearchResult> {
        self.ranking.first().map(|&i| &self.results[i])
    }

    pub fn top(&self) -> impl Iterator<Item = &SearchResult> {
        self.ranking.iter().take(self.top_k).map(|&i| &self.results[i])
    }

    /// Ranked feasible results followed by infeasible ones in enumeration
    /// order.
    pub fn ordered(&self) -> Vec<&SearchResult> {
        let mut out: Vec<&SearchResult> = self.ranking.iter().map(|&i| &self.results[i]).collect();
        out.extend(self.results.iter().filter(|r| !r.feasible()));
        out
    }
}

/// Builds, transforms and simulates one point, then applies the memory filter.
pub fn evaluate(spec: &MlpSpec, point: &GridPoint, topo: &Topology, costs: &CostModel) -> SearchResult {
    let started = Instant::now();
    let spec = MlpSpec {
        batch_size: point.batch,
        ..spec.clone()
    };
    let mut result = SearchResult {
        point: point.clone(),
        throughput: None,
        peak_memory: Vec::new(),
        infeasible: None,
        sim_seconds: 0.0,
    };
    let module = match emit_mlp(&spec, &point.config) {
        Ok(m) => m,
        Err(crate::transforms::TransformError::Constraints(v)) => {
            result.infeasible = Some(Infeasibility::Constraints(v));
            return result;
        }
        Err(e) => {
            result.infeasible = Some(Infeasibility::Constraints(vec![e.to_string()]));
            return result;
        }
    };
    match simulate_declared(&module, topo, costs) {
        Ok(sim) => {
            result.throughput = sim.throughput;
            result.peak_memory = sim.memory.devices.iter().map(|(&d, m)| (d, m.peak)).collect();
            result.infeasible = result.peak_memory.iter().find_map(|&(d, peak)| {
                let capacity = topo.device(d).memory_capacity;
                (peak as f64 > capacity).then(|| Infeasibility::Memory {
                    device: d,
                    peak,
                    capacity: capacity as u64,
                })
            });
        }
        Err(e) => result.infeasible = Some(Infeasibility::Simulation(e.to_string())),
    }
    result.sim_seconds = started.elapsed().as_secs_f64();
    result
}

/// Feasible indices by throughput (descending), then peak memory, then
/// enumeration order.
pub fn rank(results: &[SearchResult]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..results.len()).filter(|&i| results[i].feasible()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&results[a], &results[b]);
        let ta = ra.throughput.unwrap_or(0.0);
        let tb = rb.throughput.unwrap_or(0.0);
        tb.total_cmp(&ta).then(ra.max_peak().cmp(&rb.max_peak())).then(a.cmp(&b))
    });
    idx
}

pub fn grid_search(
    spec: &MlpSpec,
    space: &SearchSpace,
    topo: &Topology,
    costs: &CostModel,
    options: &SearchOptions,
) -> Result<SearchReport, SearchError> {
    let points = enumerate(space)?;
    if topo.world_size() < space.world_size {
        return Err(SearchError::Topology {
            have: topo.world_size(),
            need: space.world_size,
        });
    }
    let eval = |p: &GridPoint| {
        let mut r = evaluate(spec, p, topo, costs);
        if options.deterministic {
            r.sim_seconds = 0.0;
        }
        r
    };
    let results: Vec<SearchResult> = if options.jobs <= 1 {
        points.iter().map(eval).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| SearchError::Pool(e.to_string()))?;
        pool.install(|| points.par_iter().map(eval).collect())
    };
    let ranking = rank(&results);
    Ok(SearchReport {
        results,
        ranking,
        top_k: options.top_k,
    })
}

/// One parsed row of a report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub d: usize,
    pub t: usize,
    pub p: usize,
    pub k: usize,
    pub batch: usize,
    pub throughput: Option<f64>,
    pub peak_mem: u64,
    pub feasible: bool,
    pub sim_ms: f64,
}

pub const REPORT_HEADER: [&str; 9] = ["D", "T", "P", "K", "batch", "throughput", "peak_mem", "feasible", "sim_ms"];

fn csv_err(e: impl std::fmt::Display) -> SearchError {
    SearchError::Csv(e.to_string())
}

/// Writes one row per result in the given order. Throughput is in
/// samples/s (empty when not simulated), `peak_mem` is the largest
/// per-device peak in bytes.
pub fn write_report<'a>(w: impl io::Write, rows: impl IntoIterator<Item = &'a SearchResult>) -> Result<(), SearchError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in rows {
        let c = &r.point.config;
        wtr.write_record([
            c.d.to_string(),
            c.t.to_string(),
            c.p.to_string(),
            c.k.to_string(),
            r.point.batch.to_string(),
            r.throughput.map(|t| format!("{t:?}")).unwrap_or_default(),
            r.max_peak().to_string(),
            r.feasible().to_string(),
            format!("{:.3}", r.sim_seconds * 1e3),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(csv_err)
}

pub fn parse_report(r: impl io::Read) -> Result<Vec<ReportRow>, SearchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(SearchError::Csv(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| SearchError::Csv(format!("bad {} `{}`", REPORT_HEADER[i], &rec[i])));
        out.push(ReportRow {
            d: int(0)?,
            t: int(1)?,
            p: int(2)?,
            k: int(3)?,
            batch: int(4)?,
            throughput: if rec[5].is_empty() {
                None
            } else {
                Some(rec[5].parse().map_err(|_| SearchError::Csv(format!("bad throughput `{}`", &rec[5])))?)
            },
            peak_mem: rec[6].parse().map_err(|_| SearchError::Csv(format!("bad peak_mem `{}`", &rec[6])))?,
            feasible: rec[7].parse().map_err(|_| SearchError::Csv(format!("bad feasible `{}`", &rec[7])))?,
            sim_ms: rec[8].parse().map_err(|_| SearchError::Csv(format!("bad sim_ms `{}`", &rec[8])))?,
        });
    }
    Ok(out)
}

/// Memory-versus-throughput scatter data: peak GB per device and samples/s
/// for every simulated point.
pub fn write_scatter(w: impl io::Write, report: &SearchReport) -> Result<(), SearchError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["peak_mem_gb", "throughput", "config", "feasible"]).map_err(csv_err)?;
    for r in report.results.iter().filter(|r| r.throughput.is_some()) {
        let c = &r.point.config;
        wtr.write_record([
            format!("{:?}", r.max_peak() as f64 / 1e9),
            format!("{:?}", r.throughput.unwrap_or(0.0)),
            format!("D{}T{}P{}K{}B{}", c.d, c.t, c.p, c.k, r.point.batch),
            r.feasible().to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(enumerate(&SearchSpace::training(16, 64)).unwrap().len(), 75);
        assert_eq!(enumerate(&SearchSpace::training(1, 64)).unwrap().len(), 1);
        assert_eq!(enumerate(&SearchSpace::training(2, 64)).unwrap().len(), 9);
        assert!(enumerate(&SearchSpace::training(12, 64)).is_err());
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        write_report(&mut buf, []).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "D,T,P,K,batch,throughput,peak_mem,feasible,sim_ms\n");
    }
}
