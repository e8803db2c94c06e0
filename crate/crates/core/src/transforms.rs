//! Data (D), tensor-model (T) and pipeline (P) parallelism for the MLP
//! training step, with K microbatches under a 1F1B schedule.
//!
//! The transform works on modules produced by [`crate::models::build_mlp`]:
//! the MLP shape is read back from the entry function's attributes and the
//! distributed program is emitted directly. Devices form a D×T×P grid with
//! data replicas outermost and pipeline stages innermost:
//! `dev(r, t, s) = devices[(r·T + t)·P + s]`.
//!
//! Program order is the schedule. Each pipeline round lets every stage run
//! its next forward or backward microbatch if its input has arrived; forward
//! activations are sent at the end of the round, input gradients right after
//! the backward pass that produced them.

use std::collections::VecDeque;

use thiserror::Error;

use crate::interp::Tensor;
use crate::ir::{Attr, Attrs, DeviceId, FunctionBuilder, IrModule, Type, ValueId};
use crate::models::MlpSpec;
use crate::ops::kernels;

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Constraints(Vec<String>),
    #[error("not an MLP training step: {0}")]
    NotAnMlp(String),
}

/// One distribution strategy.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DistConfig {
    pub d: usize,
    pub t: usize,
    pub p: usize,
    pub k: usize,
    /// Device grid, `d·t·p` entries.
    pub devices: Vec<DeviceId>,
}

impl DistConfig {
    /// Configuration on devices `0..d·t·p`.
    pub fn new(d: usize, t: usize, p: usize, k: usize) -> DistConfig {
        let n = d * t * p;
        DistConfig::on(d, t, p, k, (0..n as u32).map(DeviceId).collect())
    }

    pub fn on(d: usize, t: usize, p: usize, k: usize, devices: Vec<DeviceId>) -> DistConfig {
        DistConfig { d, t, p, k, devices }
    }

    pub fn sequential() -> DistConfig {
        DistConfig::new(1, 1, 1, 1)
    }

    pub fn world_size(&self) -> usize {
        self.d * self.t * self.p
    }

    pub fn device(&self, r: usize, t: usize, s: usize) -> DeviceId {
        self.devices[(r * self.t + t) * self.p + s]
    }

    /// Every violated constraint, by name.
    pub fn violations(&self, spec: &MlpSpec) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [("D", self.d), ("T", self.t), ("P", self.p), ("K", self.k)] {
            if x == 0 || !x.is_power_of_two() {
                v.push(format!("{name}={x} is not a positive power of two"));
            }
        }
        if !v.is_empty() {
            return v;
        }
        if self.devices.len() != self.world_size() {
            v.push(format!("{} devices given for D·T·P = {}", self.devices.len(), self.world_size()));
        } else {
            let mut sorted = self.devices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.devices.len() {
                v.push("device list has duplicates".to_string());
            }
        }
        if spec.batch_size % (self.d * self.k) != 0 {
            v.push(format!("batch {} not divisible by D·K = {}", spec.batch_size, self.d * self.k));
        }
        if spec.d_model % self.t != 0 {
            v.push(format!("d_model {} not divisible by T = {}", spec.d_model, self.t));
        }
        if spec.n_layer % self.p != 0 {
            v.push(format!("{} layers not divisible by P = {}", spec.n_layer, self.p));
        }
        v
    }
}

impl std::fmt::Display for DistConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "D={} T={} P={} K={}", self.d, self.t, self.p, self.k)
    }
}

/// Reads the MLP shape from the attributes `build_mlp` records.
pub fn mlp_spec_of(module: &IrModule) -> Result<MlpSpec, TransformError> {
    let f = module
        .entry_function()
        .ok_or_else(|| TransformError::NotAnMlp(format!("entry @{} missing", module.entry)))?;
    let int = |k: &str| {
        f.attrs
            .int(k)
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| TransformError::NotAnMlp(format!("@{} has no `{k}` attribute", f.name)))
    };
    if let Some(cfg) = f.attrs.int_list("dtp") {
        if cfg.iter().any(|&x| x != 1) {
            return Err(TransformError::NotAnMlp(format!("@{} is already distributed", f.name)));
        }
    }
    let lr = f
        .attrs
        .float("lr")
        .ok_or_else(|| TransformError::NotAnMlp(format!("@{} has no `lr` attribute", f.name)))?;
    let dtype = f
        .params
        .first()
        .and_then(|&p| f.value(p).ty.as_ref())
        .and_then(Type::dtype)
        .ok_or_else(|| TransformError::NotAnMlp("first parameter is not a typed tensor".to_string()))?;
    Ok(MlpSpec {
        n_layer: int("layers")?,
        d_model: int("dim")?,
        batch_size: int("batch")?,
        dtype,
        lr,
    })
}

/// The composed D/T/P transform of an MLP training-step module.
pub fn dtp_transform(module: &IrModule, cfg: &DistConfig) -> Result<IrModule, TransformError> {
    emit_mlp(&mlp_spec_of(module)?, cfg)
}

pub fn data_parallel(module: &IrModule, d: usize, devices: Vec<DeviceId>) -> Result<IrModule, TransformError> {
    dtp_transform(module, &DistConfig::on(d, 1, 1, 1, devices))
}

pub fn tensor_parallel(module: &IrModule, t: usize, devices: Vec<DeviceId>) -> Result<IrModule, TransformError> {
    dtp_transform(module, &DistConfig::on(1, t, 1, 1, devices))
}

pub fn pipeline_parallel(module: &IrModule, p: usize, k: usize, devices: Vec<DeviceId>) -> Result<IrModule, TransformError> {
    dtp_transform(module, &DistConfig::on(1, 1, p, k, devices))
}

/// Name of the function emitted for `cfg`.
pub fn function_name(cfg: &DistConfig) -> String {
    if (cfg.d, cfg.t, cfg.p, cfg.k) == (1, 1, 1, 1) {
        "mlp".to_string()
    } else {
        format!("mlp_d{}_t{}_p{}_k{}", cfg.d, cfg.t, cfg.p, cfg.k)
    }
}

/// Layer `l` (0-based) is column-split when even, row-split when odd.
fn column_split(l: usize) -> bool {
    l % 2 == 0
}

/// Shape of one shard of layer `l`'s weight.
pub fn weight_shard_shape(spec: &MlpSpec, t: usize, l: usize) -> [usize; 2] {
    let d = spec.d_model;
    if column_split(l) {
        [d, d / t]
    } else {
        [d / t, d]
    }
}

/// Values indexed by grid cell `r·T + t` within one stage.
type Cells = Vec<ValueId>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Forward(usize),
    Backward(usize),
}

/// Per-stage 1F1B order: `min(K, P − s)` forwards in flight, then
/// alternate backward and forward, then drain.
fn one_f_one_b(p: usize, k: usize, s: usize) -> VecDeque<Task> {
    let warm = k.min(p - s);
    let mut out: VecDeque<Task> = (0..warm).map(Task::Forward).collect();
    let mut next_f = warm;
    for b in 0..k {
        out.push_back(Task::Backward(b));
        if next_f < k {
            out.push_back(Task::Forward(next_f));
            next_f += 1;
        }
    }
    out
}

struct Emitter<'a> {
    spec: &'a MlpSpec,
    cfg: &'a DistConfig,
    b: FunctionBuilder,
    per_stage: usize,
    /// Weights per layer, all replicas.
    w: Vec<Cells>,
    /// Forward input of stage `s`, microbatch `k`.
    fwd_in: Vec<Vec<Option<Cells>>>,
    /// Gradient of stage `s`'s output, microbatch `k`.
    bwd_in: Vec<Vec<Option<Cells>>>,
    /// Stage outputs of the last stage per microbatch (the predictions).
    pred: Vec<Option<Cells>>,
    labels: Vec<Cells>,
    /// `(layer input, pre-activation)` stashed for the backward pass.
    stash: Vec<Vec<Option<(Cells, Cells)>>>,
    acc: Vec<Option<Cells>>,
}

impl<'a> Emitter<'a> {
    fn cells(&self) -> usize {
        self.cfg.d * self.cfg.t
    }

    fn cell_device(&self, c: usize, s: usize) -> DeviceId {
        self.cfg.device(c / self.cfg.t, c % self.cfg.t, s)
    }

    fn name(&self, base: &str, c: Option<usize>, k: Option<usize>) -> String {
        let mut n = base.to_string();
        if let Some(c) = c {
            if self.cfg.d > 1 {
                n.push_str(&format!("_r{}", c / self.cfg.t));
            }
            if self.cfg.t > 1 {
                n.push_str(&format!("_t{}", c % self.cfg.t));
            }
        }
        if let (Some(k), true) = (k, self.cfg.k > 1) {
            n.push_str(&format!("_mb{k}"));
        }
        n
    }

    fn stage_of(&self, l: usize) -> usize {
        l / self.per_stage
    }

    fn layers(&self, s: usize) -> std::ops::Range<usize> {
        s * self.per_stage..(s + 1) * self.per_stage
    }

    /// Whether layer `l` produces activations split across the T group.
    fn sharded_output(&self, l: usize) -> bool {
        self.cfg.t > 1 && column_split(l)
    }

    fn unary(&mut self, op: &str, attrs: Attrs, inputs: impl Fn(usize) -> Vec<ValueId>, base: &str, k: Option<usize>) -> Cells {
        (0..self.cells())
            .map(|c| {
                let name = self.name(base, Some(c), k);
                self.b.op1(op, attrs.clone(), &inputs(c), &name)
            })
            .collect()
    }

    /// Allreduce over the T group of each replica.
    fn allreduce_t(&mut self, parts: &Cells, base: &str, k: Option<usize>) -> Cells {
        let t = self.cfg.t;
        let mut out = Vec::with_capacity(parts.len());
        for r in 0..self.cfg.d {
            let names: Vec<String> = (0..t).map(|i| self.name(base, Some(r * t + i), k)).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            out.extend(self.b.op("MPIAllreduce", Attrs::new(), &parts[r * t..(r + 1) * t], &names));
        }
        out
    }

    fn send(&mut self, vals: &Cells, to_stage: usize, base: &str, k: usize) -> Cells {
        (0..self.cells())
            .map(|c| {
                let name = self.name(base, Some(c), Some(k));
                let attrs = Attrs::new().with("device", Attr::Device(self.cell_device(c, to_stage)));
                self.b.op1("Send", attrs, &[vals[c]], &name)
            })
            .collect()
    }

    fn device_list(devs: impl Iterator<Item = DeviceId>) -> Attr {
        Attr::IntList(devs.map(|d| i64::from(d.0)).collect())
    }

    /// Distributes a batch-major input from `dev(0,0,s)`: scattered over
    /// replicas, then broadcast (or split on columns) over each T group,
    /// then split into microbatches on every device.
    fn distribute_input(&mut self, v: ValueId, base: &str, s: usize, column_shards: bool) -> Vec<Cells> {
        let cfg = self.cfg;
        let per_replica: Vec<ValueId> = if cfg.d > 1 {
            let names: Vec<String> = (0..cfg.d).map(|r| self.name(base, Some(r * cfg.t), None)).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let attrs = Attrs::new()
                .with("axis", Attr::Int(0))
                .with("devices", Self::device_list((0..cfg.d).map(|r| cfg.device(r, 0, s))));
            self.b.op("MPIScatter", attrs, &[v], &names)
        } else {
            vec![v]
        };
        let mut cells: Cells = Vec::with_capacity(self.cells());
        for (r, &root) in per_replica.iter().enumerate() {
            if cfg.t == 1 {
                cells.push(root);
                continue;
            }
            if column_shards {
                let names: Vec<String> = (0..cfg.t).map(|t| self.name(&format!("{base}c"), Some(r * cfg.t + t), None)).collect();
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                let attrs = Attrs::new()
                    .with("axis", Attr::Int(1))
                    .with("devices", Self::device_list((0..cfg.t).map(|t| cfg.device(r, t, s))));
                cells.extend(self.b.op("MPIScatter", attrs, &[root], &names));
            } else {
                let names: Vec<String> = (1..cfg.t).map(|t| self.name(base, Some(r * cfg.t + t), None)).collect();
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                let attrs = Attrs::new().with("devices", Self::device_list((1..cfg.t).map(|t| cfg.device(r, t, s))));
                cells.push(root);
                cells.extend(self.b.op("MPIBroadcast", attrs, &[root], &names));
            }
        }
        if cfg.k == 1 {
            return vec![cells];
        }
        let mut mbs: Vec<Cells> = vec![Vec::with_capacity(self.cells()); cfg.k];
        for (c, &v) in cells.iter().enumerate() {
            let names: Vec<String> = (0..cfg.k).map(|k| self.name(base, Some(c), Some(k))).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let attrs = Attrs::new().with("axis", Attr::Int(0)).with("num", Attr::Int(cfg.k as i64));
            for (k, out) in self.b.op("Split", attrs, &[v], &names).into_iter().enumerate() {
                mbs[k].push(out);
            }
        }
        mbs
    }

    fn forward(&mut self, s: usize, k: usize) -> Cells {
        let mut a = self.fwd_in[s][k].take().expect("forward input ready");
        let t = self.cfg.t;
        for l in self.layers(s) {
            let w = self.w[l].clone();
            let row = !column_split(l) && t > 1;
            let h_base = if row { format!("hp{}", l + 1) } else { format!("h{}", l + 1) };
            let h_part = self.unary("Gemm", Attrs::new(), |c| vec![a[c], w[c]], &h_base, Some(k));
            let h = if row { self.allreduce_t(&h_part, &format!("h{}", l + 1), Some(k)) } else { h_part };
            let out = self.unary("Relu", Attrs::new(), |c| vec![h[c]], &format!("a{}", l + 1), Some(k));
            self.stash[l][k] = Some((a, h));
            a = out;
        }
        a
    }

    fn backward(&mut self, s: usize, k: usize) {
        let last = self.cfg.p - 1;
        let mut g = if s == last {
            let p = self.pred[k].take().expect("prediction ready");
            let y = self.labels[k].clone();
            let n = (self.spec.batch_size * self.spec.d_model) as i64;
            self.unary("LossGrad", Attrs::new().with("n", Attr::Int(n)), |c| vec![p[c], y[c]], "dp", Some(k))
        } else {
            self.bwd_in[s][k].take().expect("output gradient ready")
        };
        let mut grads = Vec::new();
        for l in self.layers(s).rev() {
            let (a_in, h) = self.stash[l][k].take().expect("forward ran");
            let w = self.w[l].clone();
            let dh = self.unary("ReluGrad", Attrs::new(), |c| vec![h[c], g[c]], &format!("dh{}", l + 1), Some(k));
            let partial = self.sharded_output(l) && l > 0;
            let dx_base = match (l, partial) {
                (0, _) => "dx".to_string(),
                (_, true) => format!("dap{l}"),
                _ => format!("da{l}"),
            };
            let mut dx = Vec::with_capacity(self.cells());
            let mut dw = Vec::with_capacity(self.cells());
            for c in 0..self.cells() {
                let names = [self.name(&dx_base, Some(c), Some(k)), self.name(&format!("dw{}", l + 1), Some(c), Some(k))];
                let outs = self
                    .b
                    .op("MatMulGrad", Attrs::new(), &[a_in[c], w[c], dh[c]], &[&names[0], &names[1]]);
                dx.push(outs[0]);
                dw.push(outs[1]);
            }
            g = if partial { self.allreduce_t(&dx, &format!("da{l}"), Some(k)) } else { dx };
            grads.push((l, dw));
        }
        if s > 0 {
            let first = self.layers(s).start;
            let sent = self.send(&g, s - 1, &format!("da{first}_recv"), k);
            self.bwd_in[s - 1][k] = Some(sent);
        }
        for (l, dw) in grads.into_iter().rev() {
            let acc = match self.acc[l].take() {
                None => dw,
                Some(prev) => self.unary("Add", Attrs::new(), |c| vec![prev[c], dw[c]], &format!("dw{}_acc", l + 1), Some(k)),
            };
            self.acc[l] = Some(acc);
        }
    }

    fn pipeline(&mut self) {
        let (p, k) = (self.cfg.p, self.cfg.k);
        let mut queues: Vec<VecDeque<Task>> = (0..p).map(|s| one_f_one_b(p, k, s)).collect();
        while queues.iter().any(|q| !q.is_empty()) {
            let mut outbox = Vec::new();
            let mut progressed = false;
            for s in 0..p {
                let ready = match queues[s].front() {
                    Some(&Task::Forward(m)) => self.fwd_in[s][m].is_some(),
                    Some(&Task::Backward(m)) => s == p - 1 || self.bwd_in[s][m].is_some(),
                    None => false,
                };
                if !ready {
                    continue;
                }
                progressed = true;
                match queues[s].pop_front().expect("non-empty") {
                    Task::Forward(m) => {
                        let out = self.forward(s, m);
                        if s + 1 < p {
                            outbox.push((s, m, out));
                        } else {
                            self.pred[m] = Some(out);
                        }
                    }
                    Task::Backward(m) => self.backward(s, m),
                }
            }
            assert!(progressed, "1F1B schedule is deadlock-free");
            for (s, m, out) in outbox {
                let last_layer = self.layers(s).end;
                let recv = self.send(&out, s + 1, &format!("a{last_layer}_recv"), m);
                self.fwd_in[s + 1][m] = Some(recv);
            }
        }
    }
}

/// Emits the training step of `spec` distributed according to `cfg`.
pub fn emit_mlp(spec: &MlpSpec, cfg: &DistConfig) -> Result<IrModule, TransformError> {
    let mut errs = spec.violations();
    errs.extend(cfg.violations(spec));
    if !errs.is_empty() {
        return Err(TransformError::Constraints(errs));
    }
    let per_stage = spec.n_layer / cfg.p;
    let mut b = FunctionBuilder::new(function_name(cfg));
    b.set_attr("batch", Attr::Int(spec.batch_size as i64));
    b.set_attr("layers", Attr::Int(spec.n_layer as i64));
    b.set_attr("dim", Attr::Int(spec.d_model as i64));
    b.set_attr("lr", Attr::Float(spec.lr));
    if (cfg.d, cfg.t, cfg.p, cfg.k) != (1, 1, 1, 1) {
        b.set_attr("dtp", Attr::IntList([cfg.d, cfg.t, cfg.p, cfg.k].iter().map(|&x| x as i64).collect()));
    }
    let cells = cfg.d * cfg.t;
    let mut e = Emitter {
        spec,
        cfg,
        b,
        per_stage,
        w: Vec::with_capacity(spec.n_layer),
        fwd_in: vec![vec![None; cfg.k]; cfg.p],
        bwd_in: vec![vec![None; cfg.k]; cfg.p],
        pred: vec![None; cfg.k],
        labels: Vec::new(),
        stash: vec![vec![None; cfg.k]; spec.n_layer],
        acc: vec![None; spec.n_layer],
    };

    // Parameters: weight shards of replica 0, then x and y.
    let mut roots: Vec<Vec<ValueId>> = Vec::with_capacity(spec.n_layer);
    for l in 0..spec.n_layer {
        let s = e.stage_of(l);
        let shape = weight_shard_shape(spec, cfg.t, l);
        let ids = (0..cfg.t)
            .map(|t| {
                let name = e.name(&format!("w{}", l + 1), Some(t), None);
                e.b.param(&name, Type::tensor(spec.dtype, shape, cfg.device(0, t, s)))
            })
            .collect();
        roots.push(ids);
    }
    let io = Type::tensor(spec.dtype, [spec.batch_size, spec.d_model], cfg.device(0, 0, 0));
    let x = e.b.param("x", io.clone());
    let y = e.b.param("y", io.with_device(cfg.device(0, 0, cfg.p - 1)));

    // Weights broadcast to the other replicas.
    for (l, shards) in roots.iter().enumerate() {
        let s = e.stage_of(l);
        let mut cells_w = vec![shards[0]; cells];
        for (t, &root) in shards.iter().enumerate() {
            cells_w[t] = root;
            if cfg.d > 1 {
                let names: Vec<String> = (1..cfg.d).map(|r| e.name(&format!("w{}", l + 1), Some(r * cfg.t + t), None)).collect();
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                let attrs = Attrs::new().with("devices", Emitter::device_list((1..cfg.d).map(|r| cfg.device(r, t, s))));
                for (i, v) in e.b.op("MPIBroadcast", attrs, &[root], &names).into_iter().enumerate() {
                    cells_w[(i + 1) * cfg.t + t] = v;
                }
            }
        }
        e.w.push(cells_w);
    }

    let xs = e.distribute_input(x, "x", 0, false);
    for (k, cells_x) in xs.into_iter().enumerate() {
        e.fwd_in[0][k] = Some(cells_x);
    }
    e.labels = e.distribute_input(y, "y", cfg.p - 1, e.sharded_output(spec.n_layer - 1));

    e.pipeline();

    // Gradient allreduce across replicas and the weight update.
    let mut updated = Vec::with_capacity(spec.n_layer * cfg.t);
    for l in 0..spec.n_layer {
        let mut g = e.acc[l].take().expect("every layer has a gradient");
        if cfg.d > 1 {
            let mut reduced = g.clone();
            for t in 0..cfg.t {
                let idx: Vec<usize> = (0..cfg.d).map(|r| r * cfg.t + t).collect();
                let names: Vec<String> = idx.iter().map(|&c| e.name(&format!("dw{}_sum", l + 1), Some(c), None)).collect();
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                let ins: Vec<ValueId> = idx.iter().map(|&c| g[c]).collect();
                for (i, v) in e.b.op("MPIAllreduce", Attrs::new(), &ins, &names).into_iter().enumerate() {
                    reduced[idx[i]] = v;
                }
            }
            g = reduced;
        }
        let w = e.w[l].clone();
        let new = e.unary("SgdStep", Attrs::new().with("lr", Attr::Float(spec.lr)), |c| vec![w[c], g[c]], &format!("w{}_new", l + 1), None);
        updated.extend_from_slice(&new[..cfg.t]);
    }
    let f = e.b.ret(&updated);
    Ok(IrModule::new(vec![f]))
}

/// Arguments of the distributed program from the sequential arguments
/// `(w1..wL, x, y)`: weights are split into their replica-0 shards and
/// every tensor is retagged with its device.
pub fn distribute_args(spec: &MlpSpec, cfg: &DistConfig, seq: &[Tensor]) -> Vec<Tensor> {
    let per_stage = spec.n_layer / cfg.p;
    let mut out = Vec::with_capacity(spec.n_layer * cfg.t + 2);
    for (l, w) in seq[..spec.n_layer].iter().enumerate() {
        let s = l / per_stage;
        let axis = if column_split(l) { 1 } else { 0 };
        let shape = weight_shard_shape(spec, cfg.t, l).to_vec();
        for (t, part) in kernels::split(&w.data, &w.shape, axis, cfg.t).into_iter().enumerate() {
            out.push(Tensor {
                dtype: w.dtype,
                shape: shape.clone(),
                data: part,
                device: cfg.device(0, t, s),
            });
        }
    }
    out.push(seq[spec.n_layer].clone().with_device(cfg.device(0, 0, 0)));
    out.push(seq[spec.n_layer + 1].clone().with_device(cfg.device(0, 0, cfg.p - 1)));
    out
}

/// Full updated weights from the distributed program's results, on device 0.
pub fn collect_weights(spec: &MlpSpec, cfg: &DistConfig, outs: &[Tensor]) -> Vec<Tensor> {
    outs.chunks(cfg.t)
        .enumerate()
        .map(|(l, shards)| {
            let axis = if column_split(l) { 1 } else { 0 };
            let parts: Vec<(&[f64], &[usize])> = shards.iter().map(|s| (s.data.as_slice(), s.shape.as_slice())).collect();
            Tensor {
                dtype: shards[0].dtype,
                shape: vec![spec.d_model, spec.d_model],
                data: kernels::concat(&parts, axis),
                device: DeviceId(0),
            }
        })
        .collect()
}
