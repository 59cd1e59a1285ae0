//! Orchestrates a run: estimators, ground truth, curves, and artifacts.

use std::fmt::Write as _;

use patchlab_core::atp::{self, AtpOptions, CostAccount};
use patchlab_core::baselines::{
    blocks_rank, hierarchical_rank, iterative_rank, subsample_estimate, BlocksConfig,
    HierarchicalConfig,
};
use patchlab_core::diagnostics::false_negative_bound;
use patchlab_core::error::{Error, Result};
use patchlab_core::eval::{
    inverse_rank_weighted_geometric_mean, recall_curve_from_events, verified_recall_curve,
    CostCurve,
};
use patchlab_core::model::{enumerate_nodes, load_model, Site};
use patchlab_core::patching::{GroundTruth, ModelOracle};
use patchlab_core::{InterventionOracle, NodeFamily, NodeId, PatchEngine};
use serde::Serialize;

use crate::config::{MethodSpec, RunConfig};

/// Collapses a multi-pair oracle to a single synthetic pair whose effect is
/// the pair-weighted mean; one collapsed measurement costs one underlying
/// measurement per pair. This lets the per-pair block searches target the
/// distribution-level ground truth directly.
struct DistributionMean<'a, O: InterventionOracle + ?Sized> {
    inner: &'a O,
}

impl<O: InterventionOracle + ?Sized> InterventionOracle for DistributionMean<'_, O> {
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    fn num_pairs(&self) -> usize {
        1
    }

    fn pair_weight(&self, _pair: usize) -> f64 {
        1.0
    }

    fn intervene(&self, nodes: &[usize], _pair: usize) -> f64 {
        (0..self.inner.num_pairs())
            .map(|i| self.inner.pair_weight(i) * self.inner.intervene(nodes, i))
            .sum()
    }

    fn calls(&self) -> u64 {
        self.inner.calls()
    }
}

struct MethodRun {
    label: &'static str,
    file_stem: &'static str,
    seed: u64,
    /// Per-node estimate in enumeration order; None where the method leaves
    /// a node unmeasured or undefined.
    estimates: Vec<Option<f64>>,
    curve: CostCurve,
    cost: CostAccount,
    oracle_calls: u64,
    gradient_based: bool,
}

#[derive(Serialize)]
struct CostRow {
    method: &'static str,
    seed: u64,
    forwards: u64,
    backwards: u64,
    qk_fix_extra: u64,
    pass_equivalents: u64,
    /// Forward passes counted by the intervention oracle itself, as a
    /// cross-check on the derived figures (0 for gradient methods, which
    /// never call the oracle).
    oracle_calls: u64,
}

#[derive(Serialize)]
struct IrwrgmRow {
    method: &'static str,
    seed: u64,
    relative_cost: f64,
}

#[derive(Serialize)]
struct SubsampleNodeDiag {
    node: String,
    estimate: Option<f64>,
    count_in: u64,
    count_out: u64,
    false_negative_bound: Option<f64>,
}

#[derive(Serialize)]
struct SubsampleDiag {
    seed: u64,
    p: f64,
    samples: usize,
    alpha: f64,
    nodes: Vec<SubsampleNodeDiag>,
}

#[derive(Serialize)]
struct CancellationDiag {
    p25: f64,
    p50: f64,
    p75: f64,
    max: f64,
}

#[derive(Serialize)]
struct Diagnostics {
    schema_version: u32,
    irwrgm: Vec<IrwrgmRow>,
    cancellation_ratio_percentiles: CancellationDiag,
    subsampling: Vec<SubsampleDiag>,
}

#[derive(Serialize)]
struct CostsManifest {
    schema_version: u32,
    ground_truth_forward_passes: u64,
    methods: Vec<CostRow>,
}

pub fn run(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    cfg.validate()?;
    let model = load_model(&cfg.model)?;
    let dist = cfg.prompts.load()?;
    for i in 0..dist.len() {
        dist.pair(i).validate(model.config.vocab_size)?;
    }
    let family: NodeFamily = cfg.node_family.into();
    let nodes = enumerate_nodes(&model.config, dist.prompt_len(), family);
    let n_pairs = dist.len();

    if dry_run {
        print_plan(cfg, &model.config, nodes.len(), n_pairs);
        return Ok(());
    }

    let engine = PatchEngine::new(&model, dist, cfg.metric)?;
    let truth = engine.ground_truth_table(family)?;
    let contributions = truth.contributions();

    let mut runs: Vec<MethodRun> = Vec::new();
    let mut subsample_diags: Vec<SubsampleDiag> = Vec::new();
    for spec in &cfg.methods {
        for &seed in &cfg.seeds {
            let run = run_method(
                spec,
                seed,
                &engine,
                family,
                &contributions,
                cfg,
                &truth,
                &mut subsample_diags,
            )?;
            runs.push(run);
        }
    }

    let attn_delta: Vec<Option<f64>> = if runs.iter().any(|r| r.gradient_based) {
        atp::max_attention_prob_delta(&engine, family)?
    } else {
        vec![None; nodes.len()]
    };

    write_artifacts(cfg, &nodes, &contributions, &truth, &runs, subsample_diags, &attn_delta)
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    spec: &MethodSpec,
    seed: u64,
    engine: &PatchEngine,
    family: NodeFamily,
    contributions: &[f64],
    cfg: &RunConfig,
    truth: &GroundTruth,
    subsample_diags: &mut Vec<SubsampleDiag>,
) -> Result<MethodRun> {
    let label = spec.label();
    let file_stem = spec.file_stem();
    let n_pairs = engine.dist.len();
    match spec {
        MethodSpec::Atp | MethodSpec::AtpQkFix | MethodSpec::AtpGradDrop | MethodSpec::AtpStar => {
            let opts = match spec {
                MethodSpec::Atp => AtpOptions::plain(),
                MethodSpec::AtpQkFix => AtpOptions { qk_fix: true, ..AtpOptions::plain() },
                MethodSpec::AtpGradDrop => AtpOptions { grad_drop: true, ..AtpOptions::plain() },
                _ => AtpOptions::starred(),
            };
            let table = atp::atp_estimate(engine, family, &opts)?;
            let est_cost = table.cost.pass_equivalents() as f64;
            let curve = verified_recall_curve(
                label,
                &table.estimates,
                contributions,
                est_cost,
                cfg.recall_target,
            )?;
            Ok(MethodRun {
                label,
                file_stem,
                seed,
                estimates: table.estimates.iter().map(|&v| Some(v)).collect(),
                curve,
                cost: table.cost,
                oracle_calls: 0,
                gradient_based: true,
            })
        }
        MethodSpec::Subsampling { p, samples } => {
            let oracle = ModelOracle::new(engine, family);
            let before = oracle.calls();
            let stats = subsample_estimate(&oracle, *p, *samples, seed)?;
            let calls = oracle.calls() - before;
            let estimates: Vec<Option<f64>> =
                (0..stats.num_nodes()).map(|i| stats.estimate(i)).collect();
            let for_ranking: Vec<f64> =
                estimates.iter().map(|e| e.unwrap_or(f64::NEG_INFINITY)).collect();
            let curve = verified_recall_curve(
                label,
                &for_ranking,
                contributions,
                calls as f64,
                cfg.recall_target,
            )?;
            subsample_diags.push(SubsampleDiag {
                seed,
                p: *p,
                samples: *samples,
                alpha: cfg.diagnostic_alpha,
                nodes: (0..stats.num_nodes())
                    .map(|i| {
                        Ok(SubsampleNodeDiag {
                            node: truth.nodes[i].to_string(),
                            estimate: stats.estimate(i),
                            count_in: stats.count_in[i],
                            count_out: stats.count_out[i],
                            false_negative_bound: false_negative_bound(
                                &stats,
                                i,
                                cfg.diagnostic_alpha,
                            )?,
                        })
                    })
                    .collect::<Result<_>>()?,
            });
            Ok(MethodRun {
                label,
                file_stem,
                seed,
                estimates,
                curve,
                cost: CostAccount { forwards: calls, ..CostAccount::default() },
                oracle_calls: calls,
                gradient_based: false,
            })
        }
        MethodSpec::Blocks { block_size, budget } => {
            let oracle = ModelOracle::new(engine, family);
            let collapsed = DistributionMean { inner: &oracle };
            let result = blocks_rank(
                &collapsed,
                0,
                &BlocksConfig { block_size: *block_size, budget: *budget, seed },
            )?;
            finish_search_run(label, file_stem, seed, result, contributions, n_pairs as u64, cfg)
        }
        MethodSpec::Hierarchical { branching, levels, budget } => {
            let oracle = ModelOracle::new(engine, family);
            let collapsed = DistributionMean { inner: &oracle };
            let result = hierarchical_rank(
                &collapsed,
                0,
                &HierarchicalConfig {
                    branching: *branching,
                    levels: *levels,
                    budget: *budget,
                    seed,
                },
            )?;
            finish_search_run(label, file_stem, seed, result, contributions, n_pairs as u64, cfg)
        }
        MethodSpec::Iterative { budget } => {
            let oracle = ModelOracle::new(engine, family);
            let result = iterative_rank(&oracle, *budget, seed)?;
            finish_search_run(label, file_stem, seed, result, contributions, 1, cfg)
        }
    }
}

/// Package a search-baseline result; `pass_factor` converts logged set
/// measurements to forward passes (the collapsed distribution oracle spends
/// one pass per pair per measurement).
fn finish_search_run(
    label: &'static str,
    file_stem: &'static str,
    seed: u64,
    result: patchlab_core::baselines::RankResult,
    contributions: &[f64],
    pass_factor: u64,
    cfg: &RunConfig,
) -> Result<MethodRun> {
    let events: Vec<(usize, u64)> = result
        .events
        .iter()
        .map(|e| (e.node, e.cost_after * pass_factor))
        .collect();
    let curve = recall_curve_from_events(label, &events, contributions, cfg.recall_target)?;
    let calls = result.calls_used * pass_factor;
    Ok(MethodRun {
        label,
        file_stem,
        seed,
        estimates: result.values,
        curve,
        cost: CostAccount { forwards: calls, ..CostAccount::default() },
        oracle_calls: calls,
        gradient_based: false,
    })
}

fn print_plan(cfg: &RunConfig, model: &patchlab_core::ModelConfig, n_nodes: usize, n_pairs: usize) {
    println!("dry run: configuration valid");
    println!("nodes: {n_nodes}");
    println!("prompt pairs: {n_pairs}");
    println!(
        "ground truth: {} forward passes",
        n_nodes as u64 * n_pairs as u64
    );
    let l = model.n_layers as u64;
    for spec in &cfg.methods {
        let per_seed: String = match spec {
            MethodSpec::Atp => format!("{} pass-equivalents", 3 * n_pairs as u64),
            MethodSpec::AtpQkFix => format!("{} pass-equivalents", 4 * n_pairs as u64),
            MethodSpec::AtpGradDrop => {
                format!("{} pass-equivalents", (2 + l) * n_pairs as u64)
            }
            MethodSpec::AtpStar => {
                format!("{} pass-equivalents", (3 + l) * n_pairs as u64)
            }
            MethodSpec::Subsampling { samples, .. } => format!("{samples} forward passes"),
            MethodSpec::Blocks { budget, .. }
            | MethodSpec::Hierarchical { budget, .. } => {
                format!("<= {} forward passes", budget * n_pairs as u64)
            }
            MethodSpec::Iterative { budget } => format!("<= {budget} forward passes"),
        };
        println!("{}: {} per seed x {} seeds", spec.label(), per_seed, cfg.seeds.len());
    }
}

fn site_kind(node: &NodeId) -> &'static str {
    match node.site {
        Site::AttnQuery { .. } => "q",
        Site::AttnKey { .. } => "k",
        Site::AttnValue { .. } => "v",
        Site::AttnOut { .. } => "o",
        Site::Neuron { .. } => "n",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_artifacts(
    cfg: &RunConfig,
    nodes: &[NodeId],
    contributions: &[f64],
    truth: &GroundTruth,
    runs: &[MethodRun],
    subsampling: Vec<SubsampleDiag>,
    attn_delta: &[Option<f64>],
) -> Result<()> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;

    // estimates.csv: one row set per method, first seed only (per-seed detail
    // lives in curves.csv).
    let mut estimates_csv = String::from("node,method,estimate,true_effect\n");
    let mut seen: Vec<&str> = Vec::new();
    for run in runs {
        if seen.contains(&run.label) {
            continue;
        }
        seen.push(run.label);
        for (i, node) in nodes.iter().enumerate() {
            let _ = writeln!(
                estimates_csv,
                "{},{},{},{}",
                node,
                run.label,
                fmt_opt(run.estimates[i]),
                contributions[i]
            );
        }
    }
    std::fs::write(out.join("estimates.csv"), estimates_csv)?;

    // curves.csv with the oracle diagonal included for reference.
    let mut curves_csv = String::from("method,seed,k,cost\n");
    for (k, _) in contributions.iter().enumerate() {
        let _ = writeln!(curves_csv, "oracle,0,{},{}", k + 1, k + 1);
    }
    for run in runs {
        for (i, &c) in run.curve.costs.iter().enumerate() {
            let _ = writeln!(curves_csv, "{},{},{},{}", run.label, run.seed, i + 1, c);
        }
    }
    std::fs::write(out.join("curves.csv"), curves_csv)?;

    // Scatter data per gradient-based method (first seed).
    let true_order = patchlab_core::atp::rank_descending(contributions);
    let mut true_rank = vec![0usize; nodes.len()];
    for (pos, &n) in true_order.iter().enumerate() {
        true_rank[n] = pos + 1;
    }
    let mut scattered: Vec<&str> = Vec::new();
    for run in runs {
        if !run.gradient_based || scattered.contains(&run.file_stem) {
            continue;
        }
        scattered.push(run.file_stem);
        let est: Vec<f64> = run.estimates.iter().map(|e| e.unwrap_or(0.0)).collect();
        let est_order = patchlab_core::atp::rank_descending(&est);
        let mut est_rank = vec![0usize; nodes.len()];
        for (pos, &n) in est_order.iter().enumerate() {
            est_rank[n] = pos + 1;
        }
        let mut csv = String::from("node,true_rank,est_rank,site_kind,max_attn_prob_delta\n");
        for (i, node) in nodes.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                node,
                true_rank[i],
                est_rank[i],
                site_kind(node),
                fmt_opt(attn_delta[i])
            );
        }
        std::fs::write(out.join(format!("scatter_{}.csv", run.file_stem)), csv)?;
    }

    // diagnostics.json
    let oracle_curve = CostCurve {
        method: "oracle".to_string(),
        estimation_cost: 0.0,
        costs: (1..=contributions.len()).map(|k| k as f64).collect(),
    };
    let irwrgm_rows: Vec<IrwrgmRow> = runs
        .iter()
        .filter(|r| !r.curve.costs.is_empty())
        .map(|r| {
            let k = r.curve.costs.len().min(oracle_curve.costs.len());
            let trim = |c: &CostCurve| CostCurve {
                method: c.method.clone(),
                estimation_cost: c.estimation_cost,
                costs: c.costs[..k].to_vec(),
            };
            IrwrgmRow {
                method: r.label,
                seed: r.seed,
                relative_cost: inverse_rank_weighted_geometric_mean(&trim(&r.curve))
                    / inverse_rank_weighted_geometric_mean(&trim(&oracle_curve)),
            }
        })
        .collect();
    let mut ratios: Vec<f64> = truth
        .signed_mean
        .iter()
        .zip(&truth.abs_mean)
        .map(|(&s, &a)| if a == 0.0 { 0.0 } else { (1.0 - s.abs() / a).clamp(0.0, 1.0) })
        .collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| ratios[((q * (ratios.len() - 1) as f64).round()) as usize];
    let diagnostics = Diagnostics {
        schema_version: crate::config::SCHEMA_VERSION,
        irwrgm: irwrgm_rows,
        cancellation_ratio_percentiles: CancellationDiag {
            p25: pct(0.25),
            p50: pct(0.5),
            p75: pct(0.75),
            max: *ratios.last().unwrap(),
        },
        subsampling,
    };
    std::fs::write(
        out.join("diagnostics.json"),
        serde_json::to_string_pretty(&diagnostics)?,
    )?;

    // costs.json
    let costs = CostsManifest {
        schema_version: crate::config::SCHEMA_VERSION,
        ground_truth_forward_passes: truth.forward_passes,
        methods: runs
            .iter()
            .map(|r| CostRow {
                method: r.label,
                seed: r.seed,
                forwards: r.cost.forwards,
                backwards: r.cost.backwards,
                qk_fix_extra: r.cost.qk_fix_extra,
                pass_equivalents: r.cost.pass_equivalents(),
                oracle_calls: r.oracle_calls,
            })
            .collect(),
    };
    std::fs::write(out.join("costs.json"), serde_json::to_string_pretty(&costs)?)?;
    Ok(())
}

/// Map an error to the documented exit code: 3 for numeric failures, 2 for
/// configuration and data errors.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}
