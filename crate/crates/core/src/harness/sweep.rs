use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{run_episode, EpisodeMetrics, EvalContext, ExperimentConfig, HarnessError, Method, Policy};
use crate::egformer::NetParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub sizes: Vec<usize>,
    pub side_length: f64,
    pub obstacles: usize,
    pub episodes: usize,
    pub seed_base: u64,
    pub methods: Vec<Method>,
    pub label: String,
    pub workers: usize,
}

impl SweepSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            sizes: cfg.eval.sizes.clone(),
            side_length: cfg.eval.side_length.unwrap_or(cfg.world.side_length),
            obstacles: cfg.eval.obstacles.unwrap_or(cfg.world.num_obstacles),
            episodes: cfg.eval.episodes,
            seed_base: cfg.eval.seed_base,
            methods: cfg.eval.methods.clone(),
            label: cfg.eval.label.clone(),
            workers: cfg.eval.workers,
        }
    }
}

/// One results row; field names are the CSV header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub density: f64,
    pub safe: f64,
    pub reach: f64,
    pub succ: f64,
    pub cost_mean: f64,
    pub cost_p25: f64,
    pub cost_p75: f64,
    pub reward: f64,
}

pub const CSV_HEADER: &str = "method,N,density,safe,reach,succ,cost_mean,cost_p25,cost_p75,reward";

/// Linear-interpolation percentile of unsorted data, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Runs `f(0..count)` over worker threads and returns the results in index order.
pub fn parallel_map<T: Send>(count: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = if workers == 0 { std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) } else { workers };
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
    let chunk = count.div_ceil(workers);
    std::thread::scope(|s| {
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (k, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + k));
                }
            });
        }
    });
    slots.into_iter().map(|x| x.expect("every slot filled")).collect()
}

/// One row per (method, N) in the order given by the spec.
pub fn run_sweep(spec: &SweepSpec, ctx: &EvalContext, learned: Option<&NetParams>) -> Result<Vec<SweepRow>, HarnessError> {
    if spec.episodes == 0 {
        return Err(HarnessError::Config("episodes per cell must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for method in &spec.methods {
        let policy = match method {
            Method::Learned => Policy::Learned(learned.ok_or(HarnessError::MissingCheckpoint)?),
            Method::Ccbf => Policy::Centralized,
            Method::Dcbf => Policy::Decentralized,
            Method::Nominal => Policy::Nominal,
        };
        for &n in &spec.sizes {
            let mut cell = ctx.clone();
            cell.world.num_agents = n;
            cell.world.side_length = spec.side_length;
            cell.world.num_obstacles = spec.obstacles;
            let results = parallel_map(spec.episodes, spec.workers, |k| {
                run_episode(&policy, &cell, spec.seed_base + k as u64, false).map(|o| o.metrics)
            });
            let metrics: Vec<EpisodeMetrics> = results.into_iter().collect::<Result<_, _>>()?;
            let costs: Vec<f64> = metrics.iter().map(|m| m.cost).collect();
            rows.push(SweepRow {
                method: if *method == Method::Learned { spec.label.clone() } else { method.name().to_string() },
                n,
                density: n as f64 / spec.side_length.powi(3),
                safe: mean(metrics.iter().map(|m| m.safety_rate)),
                reach: mean(metrics.iter().map(|m| m.reach_rate)),
                succ: mean(metrics.iter().map(|m| m.success_rate)),
                cost_mean: mean(costs.iter().copied()),
                cost_p25: percentile(&costs, 0.25),
                cost_p75: percentile(&costs, 0.75),
                reward: mean(metrics.iter().map(|m| m.reward)),
            });
            log::info!("{} N={n}: safe {:.3} reach {:.3}", rows.last().unwrap().method, rows.last().unwrap().safe, rows.last().unwrap().reach);
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[SweepRow], w: impl Write) -> Result<(), HarnessError> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(())
}

pub fn write_json(rows: &[SweepRow], w: impl Write) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(w, rows).map_err(|e| HarnessError::Io(e.to_string()))
}

/// Safety rate against swarm size, one polyline per method.
pub fn safety_plot_svg(rows: &[SweepRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        let x = (r.n as f64).log2();
        (a.min(x), b.max(x))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |n: usize| PAD + ((n as f64).log2() - lo) / span * (W - 2.0 * PAD);
    let py = |s: f64| H - PAD - s * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {} V{} H{}" stroke="black" fill="none"/>"#,
        PAD,
        H - PAD,
        W - PAD
    );
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{s:.2}</text>"#, PAD - 6.0, py(s) + 4.0);
    }
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n).collect();
    sizes.sort_unstable();
    sizes.dedup();
    for n in &sizes {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{n}</text>"#, px(*n), H - PAD + 16.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">agents</text>"#, W / 2.0, H - 8.0);
    let _ = writeln!(svg, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">safety rate</text>"#, H / 2.0, H / 2.0);
    for (k, m) in methods.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> =
            rows.iter().filter(|r| r.method == *m).map(|r| format!("{:.2},{:.2}", px(r.n), py(r.safe))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, pts.join(" "));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}">{m}</text>"#, W - PAD + 4.0 - 40.0, PAD + 14.0 * k as f64);
    }
    svg.push_str("</svg>\n");
    svg
}
