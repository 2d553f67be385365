//! Per-layer parameter, MAC and wall-clock profile of single-image
//! inference.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use contextnet_core::graph::{count_flops, ForwardOptions, NodeHook};
use contextnet_core::{Graph, NodeId, Tensor};

use crate::Result;

pub const WARMUP_RUNS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub name: String,
    pub kind: &'static str,
    pub params: usize,
    pub macs: u64,
    /// Median over repetitions.
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub rows: Vec<ProfileRow>,
    pub total_params: usize,
    pub total_macs: u64,
    pub total_ms: f64,
    pub reps: usize,
}

struct Timer {
    started: Option<Instant>,
    per_node: Vec<Duration>,
}

impl NodeHook for Timer {
    fn enter(&mut self, _: NodeId) {
        self.started = Some(Instant::now());
    }

    fn exit(&mut self, id: NodeId) {
        if let Some(t) = self.started.take() {
            self.per_node[id] = t.elapsed();
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times `reps` single-image inference passes after [`WARMUP_RUNS`]
/// warm-up passes. Everything runs on the calling thread.
pub fn profile(graph: &Graph, reps: usize) -> Result<Profile> {
    let dims = graph.input_dims(1);
    let [_, h, w, _] = dims[0];
    let cost = count_flops(graph, h, w)?;
    let mut rng = contextnet_core::seeded_rng(0);
    let inputs: Vec<Tensor> = dims.iter().map(|&d| Tensor::random_uniform(d, 0.0, 1.0, &mut rng)).collect();
    let opts = ForwardOptions::inference();
    let mut per_node: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); graph.len()];
    let mut totals = Vec::with_capacity(reps);
    for i in 0..WARMUP_RUNS + reps.max(1) {
        let mut timer = Timer { started: None, per_node: vec![Duration::ZERO; graph.len()] };
        let t = Instant::now();
        graph.forward_with_hook(&inputs, &opts, &mut rng, &mut timer)?;
        let total = t.elapsed();
        if i >= WARMUP_RUNS {
            totals.push(total.as_secs_f64() * 1e3);
            for (acc, d) in per_node.iter_mut().zip(&timer.per_node) {
                acc.push(d.as_secs_f64() * 1e3);
            }
        }
    }
    let rows = cost
        .layers
        .iter()
        .map(|l| ProfileRow {
            name: l.name.clone(),
            kind: l.kind,
            params: l.params,
            macs: l.macs,
            ms: median(per_node[l.node].clone()),
        })
        .collect();
    Ok(Profile {
        rows,
        total_params: cost.total_params,
        total_macs: cost.total_macs,
        total_ms: median(totals),
        reps: reps.max(1),
    })
}

impl Profile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params,macs,ms\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.4}", r.name, r.kind, r.params, r.macs, r.ms);
        }
        let _ = writeln!(s, "TOTAL,,{},{},{:.4}", self.total_params, self.total_macs, self.total_ms);
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:<15} {:>10} {:>14} {:>9}", "layer", "kind", "params", "MACs", "ms");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:<15} {:>10} {:>14} {:>9.3}", r.name, r.kind, r.params, r.macs, r.ms);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:<15} {:>10} {:>14} {:>9.3}",
            "TOTAL", "", self.total_params, self.total_macs, self.total_ms
        );
        let _ = writeln!(s, "median of {} runs after {WARMUP_RUNS} warm-up runs, single thread", self.reps);
        s
    }
}
