//! The five pipeline stages. Each one reads its inputs and validates them
//! completely before the output directory is touched, computes everything in
//! memory, and only then writes its own artifacts.

use std::collections::BTreeSet;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use signalopt::es::{run_es, write_curve_csv};
use signalopt::marl::{collect_batch, evaluate_policies, train_offline};
use signalopt::plan::validate_plan;
use signalopt::sim::evaluate_plan;
use signalopt::{Ablation, BatchDataset, NetworkSpec, Policy, SignalPlan};

use crate::config::{EvalConfig, Run};
use crate::plot::{bar_chart, line_chart, Series};
use crate::{AblationMode, Failure};

pub const ES_PLAN: &str = "es_plan.json";
pub const ES_CURVE: &str = "es_curve.csv";
pub const ES_PLOT: &str = "es_curve.svg";
pub const BATCH: &str = "batch.jsonl";
pub const TRAIN_PLOT: &str = "training.svg";
pub const EVAL: &str = "eval.csv";
pub const REPORT: &str = "report.md";
pub const REPORT_PLOT: &str = "report.svg";

#[derive(Serialize, Deserialize)]
struct Meta {
    stage: String,
    seed: u64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct PlanArtifact {
    meta: Meta,
    plan: SignalPlan,
    initial_fitness: f64,
    best_fitness: f64,
    queries: usize,
}

#[derive(Serialize, Deserialize)]
struct PolicyArtifact {
    meta: Meta,
    variant: String,
    ablation: Ablation,
    policy: Policy,
}

fn meta(run: &Run, stage: &str) -> Meta {
    Meta { stage: stage.into(), seed: run.seed, config_hash: run.config_hash.clone() }
}

fn comment(run: &Run, stage: &str) -> String {
    format!("# stage={stage} seed={} config_hash={}\n", run.seed, run.config_hash)
}

fn describe(run: &Run, stage: &str) -> String {
    format!("stage={stage} seed={} config_hash={}", run.seed, run.config_hash)
}

fn to_json<S: Serialize>(value: &S) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

/// Creates the run directory and writes every file of a stage.
fn write_outputs(out: &Path, files: Vec<(&str, Vec<u8>)>) -> Result<(), Failure> {
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::config(format!("cannot create output directory {}: {e}", out.display())))?;
    for (name, bytes) in files {
        let path = out.join(name);
        std::fs::write(&path, bytes).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn read_artifact(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::config(format!("missing artifact {}: {e}", path.display())))
}

fn check_plan(plan: &SignalPlan, spec: &NetworkSpec, what: &str) -> Result<(), Failure> {
    let report = validate_plan(plan, &spec.intersections, spec.sampling_len)
        .map_err(|e| Failure::config(format!("invalid {what}: {e}")))?;
    if !report.is_ok() {
        return Err(Failure::config(format!("invalid {what}: {report}")));
    }
    Ok(())
}

/// A plan file: either an ES artifact or a bare plan.
fn read_plan(path: &Path) -> Result<SignalPlan, Failure> {
    let text = read_artifact(path)?;
    if let Ok(a) = serde_json::from_str::<PlanArtifact>(&text) {
        return Ok(a.plan);
    }
    SignalPlan::from_json(&text).map_err(|e| Failure::config(format!("invalid plan {}: {e}", path.display())))
}

fn initial_plan(spec: &NetworkSpec) -> Result<SignalPlan, Failure> {
    let plan = spec.initial_plan.clone().ok_or_else(|| Failure::config("network has no initial_plan"))?;
    check_plan(&plan, spec, "initial plan")?;
    Ok(plan)
}

fn pct_lower(reference: f64, value: f64) -> f64 {
    if reference == 0.0 {
        0.0
    } else {
        100.0 * (reference - value) / reference
    }
}

fn episode_spec(spec: &NetworkSpec, k: usize) -> NetworkSpec {
    let mut s = spec.clone();
    s.seed = spec.seed.wrapping_add(k as u64);
    s
}

/// Mean waiting time (vehicle-seconds per step) of a fixed plan over the
/// evaluation episodes.
fn plan_waiting(plan: &SignalPlan, spec: &NetworkSpec, eval: &EvalConfig) -> signalopt::Result<f64> {
    let mut total = 0.0;
    for k in 0..eval.episodes {
        total += evaluate_plan(plan, &episode_spec(spec, k), eval.warmup_cycles, eval.measured(spec))?;
    }
    Ok(-total / eval.episodes as f64)
}

fn policy_waiting(policy: &Policy, spec: &NetworkSpec, eval: &EvalConfig) -> signalopt::Result<f64> {
    let mut total = 0.0;
    for k in 0..eval.episodes {
        let s = episode_spec(spec, k);
        total += evaluate_policies(policy, &s, eval.warmup_cycles, eval.measured(spec), s.seed)?;
    }
    Ok(-total / eval.episodes as f64)
}

pub fn es(run: &Run) -> Result<(), Failure> {
    let spec = &run.spec;
    let cfg = &run.cfg.es;
    let init = initial_plan(spec)?;
    cfg.validate()?;

    let initial_fitness = evaluate_plan(&init, spec, cfg.warmup_cycles, cfg.measured(spec))?;
    let outcome = run_es(&init, spec, cfg)?;

    let mut curve = comment(run, "es").into_bytes();
    write_curve_csv(&outcome.records, &mut curve)?;
    let points = |f: fn(&signalopt::GenerationRecord) -> f64| {
        outcome.records.iter().map(|r| (r.generation as f64, -f(r))).collect()
    };
    let svg = line_chart(
        "ES learning curve",
        "generation",
        "waiting time (vehicle-seconds per step)",
        &describe(run, "es"),
        &[
            Series { name: "best".into(), points: points(|r| r.best_fitness) },
            Series { name: "mean".into(), points: points(|r| r.mean_fitness) },
        ],
    );
    let artifact = PlanArtifact {
        meta: meta(run, "es"),
        plan: outcome.best_plan.clone(),
        initial_fitness,
        best_fitness: outcome.best_fitness,
        queries: outcome.queries,
    };
    write_outputs(
        &run.out,
        vec![(ES_PLAN, to_json(&artifact)), (ES_CURVE, curve), (ES_PLOT, svg.into_bytes())],
    )?;
    println!(
        "es: initial waiting {:.4}, best waiting {:.4} ({:.2}% lower), cycle {}s -> {}s, {} queries",
        -initial_fitness,
        -outcome.best_fitness,
        pct_lower(-initial_fitness, -outcome.best_fitness),
        init.cycle_length(),
        outcome.best_plan.cycle_length(),
        outcome.queries
    );
    Ok(())
}

pub fn collect(run: &Run) -> Result<(), Failure> {
    let spec = &run.spec;
    let path = run.cfg.base_plan.as_ref().map(|p| run.resolve(p)).unwrap_or_else(|| run.artifact(ES_PLAN));
    let base = read_plan(&path)?;
    check_plan(&base, spec, "base plan")?;

    let batch = collect_batch(&base, spec, &run.cfg.collect)?;
    let meta = serde_json::to_value(meta(run, "collect")).expect("meta serializes");
    let mut bytes = vec![];
    batch.write_jsonl_with_meta(&mut bytes, Some(&meta))?;
    write_outputs(&run.out, vec![(BATCH, bytes)])?;

    let distinct: BTreeSet<Vec<u32>> = batch.records.iter().map(|r| r.plan.flatten()).collect();
    println!(
        "collect: {} records ({} episodes x {} cycles), {} distinct actions",
        batch.len(),
        batch.provenance.episodes,
        batch.provenance.cycles_per_episode,
        distinct.len()
    );
    Ok(())
}

/// File-name label of an ablation setting.
pub fn variant_name(ablation: &Ablation) -> String {
    Ablation::variants()
        .into_iter()
        .find(|(_, a)| a == ablation)
        .map(|(name, _)| name.to_string())
        .unwrap_or_else(|| ablation.label().replace('+', "_"))
}

pub fn history_file(name: &str) -> String {
    format!("history_{name}.csv")
}

pub fn policy_file(name: &str) -> String {
    format!("policy_{name}.json")
}

pub fn train(run: &Run, mode: AblationMode) -> Result<(), Failure> {
    let spec = &run.spec;
    let path = run.artifact(BATCH);
    let file = std::fs::File::open(&path)
        .map_err(|e| Failure::config(format!("missing artifact {}: {e}", path.display())))?;
    let batch = BatchDataset::read_jsonl(BufReader::new(file))
        .map_err(|e| Failure::config(format!("invalid dataset {}: {e}", path.display())))?;
    if batch.is_empty() {
        return Err(Failure::config(format!("dataset {} has no records", path.display())));
    }
    let base = batch.provenance.base_plan.clone();
    if base.shape() != spec.shape() {
        return Err(Failure::config("dataset does not match the network: different phase layout"));
    }
    check_plan(&base, spec, "dataset base plan")?;
    let hash = spec.content_hash();
    if batch.provenance.network_hash != hash {
        eprintln!(
            "warning: {} was collected on network {} but the config names network {}",
            path.display(),
            &batch.provenance.network_hash[..16.min(batch.provenance.network_hash.len())],
            &hash[..16]
        );
    }
    run.cfg.train.validate(spec.sampling_len)?;

    let variants: Vec<(String, Ablation)> = match mode {
        AblationMode::Off => vec![(variant_name(&run.cfg.train.ablation), run.cfg.train.ablation)],
        AblationMode::Full => Ablation::variants().into_iter().map(|(n, a)| (n.to_string(), a)).collect(),
    };

    let mut files: Vec<(String, Vec<u8>)> = vec![];
    let mut curves = vec![];
    let mut any_eval = false;
    for (name, ablation) in &variants {
        let mut cfg = run.cfg.train.clone();
        cfg.ablation = *ablation;
        let eval = &run.cfg.eval;
        let mut evaluator = |p: &Policy| policy_waiting(p, spec, eval).map(|w| -w);
        let (policy, history) =
            train_offline(&batch, &base, &spec.intersections, spec.sampling_len, &cfg, Some(&mut evaluator))?;

        let mut csv = comment(run, "train").into_bytes();
        csv.extend_from_slice(format!("# variant={name} ablation={}\n", ablation.label()).as_bytes());
        csv.extend_from_slice(b"# eval_waiting_time is reported for monitoring only and never feeds training\n");
        history.write_csv(&mut csv)?;
        files.push((history_file(name), csv));

        let artifact =
            PolicyArtifact { meta: meta(run, "train"), variant: name.clone(), ablation: *ablation, policy };
        files.push((policy_file(name), to_json(&artifact)));

        let evals: Vec<(f64, f64)> = history
            .rows
            .iter()
            .filter_map(|r| r.eval_fitness.map(|f| (r.iteration as f64, -f)))
            .collect();
        any_eval |= !evals.is_empty();
        let points = if evals.is_empty() {
            history.rows.iter().map(|r| (r.iteration as f64, r.actor_objective)).collect()
        } else {
            evals
        };
        let last = history.rows.last();
        println!(
            "train[{name}]: {} iterations, final critic loss {:.6}, actor objective {:.6}",
            history.rows.len(),
            last.map_or(f64::NAN, |r| r.critic_loss),
            last.map_or(f64::NAN, |r| r.actor_objective),
        );
        curves.push(Series { name: name.clone(), points });
    }
    let (title, y_label) = if any_eval {
        ("Evaluation during training (monitoring only)", "waiting time (vehicle-seconds per step)")
    } else {
        ("Actor objective during training", "critic value of actor output")
    };
    let svg = line_chart(title, "iteration", y_label, &describe(run, "train"), &curves);
    files.push((TRAIN_PLOT.into(), svg.into_bytes()));
    write_outputs(&run.out, files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect())
}

/// Trained policies present in the run directory, in name order.
fn policy_artifacts(out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let Ok(entries) = std::fs::read_dir(out) else {
        return Ok(vec![]);
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("policy_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub struct EvalRow {
    pub variant: String,
    pub waiting: f64,
}

pub fn eval(run: &Run) -> Result<(), Failure> {
    let spec = &run.spec;
    let init = initial_plan(spec)?;
    let es_text = read_artifact(&run.artifact(ES_PLAN))?;
    let es_plan = serde_json::from_str::<PlanArtifact>(&es_text)
        .map_err(|e| Failure::config(format!("invalid artifact {ES_PLAN}: {e}")))?
        .plan;
    check_plan(&es_plan, spec, "ES plan")?;
    let mut policies = vec![];
    for path in policy_artifacts(&run.out)? {
        let a: PolicyArtifact = serde_json::from_str(&read_artifact(&path)?)
            .map_err(|e| Failure::config(format!("invalid policy {}: {e}", path.display())))?;
        a.policy.check().map_err(|e| Failure::config(format!("invalid policy {}: {e}", path.display())))?;
        if a.policy.base_plan.shape() != spec.shape() {
            return Err(Failure::config(format!("policy {} does not match the network", path.display())));
        }
        policies.push(a);
    }

    let eval = &run.cfg.eval;
    let mut rows = vec![
        EvalRow { variant: "initial".into(), waiting: plan_waiting(&init, spec, eval)? },
        EvalRow { variant: "es".into(), waiting: plan_waiting(&es_plan, spec, eval)? },
    ];
    for a in &policies {
        rows.push(EvalRow { variant: format!("marl_{}", a.variant), waiting: policy_waiting(&a.policy, spec, eval)? });
    }

    let (w_init, w_es) = (rows[0].waiting, rows[1].waiting);
    let mut csv = comment(run, "eval").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut csv);
        w.write_record(["variant", "waiting_time", "improvement_vs_initial_pct", "improvement_vs_es_pct"])
            .map_err(signalopt::Error::from)?;
        for r in &rows {
            w.write_record([
                r.variant.clone(),
                format!("{:.6}", r.waiting),
                format!("{:.4}", pct_lower(w_init, r.waiting)),
                format!("{:.4}", pct_lower(w_es, r.waiting)),
            ])
            .map_err(signalopt::Error::from)?;
        }
        w.flush().map_err(signalopt::Error::from)?;
    }
    write_outputs(&run.out, vec![(EVAL, csv)])?;
    for r in &rows {
        println!(
            "eval[{}]: waiting {:.4} ({:+.2}% vs initial, {:+.2}% vs ES)",
            r.variant,
            r.waiting,
            pct_lower(w_init, r.waiting),
            pct_lower(w_es, r.waiting)
        );
    }
    Ok(())
}

/// Waiting time per variant from an evaluation CSV. Only the raw waiting
/// column is used; percentages are recomputed from it.
pub fn read_eval(path: &Path) -> Result<(Vec<EvalRow>, Option<String>), Failure> {
    let text = read_artifact(path)?;
    let hash = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .find_map(|t| t.strip_prefix("config_hash=").map(str::to_string));
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let bad = |e: String| Failure::config(format!("invalid {}: {e}", path.display()));
    let mut rows = vec![];
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let variant = rec.get(0).ok_or_else(|| bad("missing variant".into()))?.to_string();
        let waiting: f64 = rec
            .get(1)
            .ok_or_else(|| bad("missing waiting_time".into()))?
            .parse()
            .map_err(|e| bad(format!("{e}")))?;
        rows.push(EvalRow { variant, waiting });
    }
    for needed in ["initial", "es"] {
        if !rows.iter().any(|r| r.variant == needed) {
            return Err(bad(format!("no `{needed}` row")));
        }
    }
    Ok((rows, hash))
}

pub fn report(run: &Run) -> Result<(), Failure> {
    let path = run.artifact(EVAL);
    let (rows, hash) = read_eval(&path)?;
    if hash.as_deref() != Some(run.config_hash.as_str()) {
        eprintln!("warning: {} was produced under a different configuration", path.display());
    }
    let find = |v: &str| rows.iter().find(|r| r.variant == v).map(|r| r.waiting).unwrap_or(f64::NAN);
    let (w_init, w_es) = (find("initial"), find("es"));

    let mut md = format!("<!-- {} -->\n\n", describe(run, "report"));
    md.push_str("| variant | waiting time | vs initial (%) | vs ES (%) |\n|---|---:|---:|---:|\n");
    for r in &rows {
        md.push_str(&format!(
            "| {} | {:.4} | {:.2} | {:.2} |\n",
            r.variant,
            r.waiting,
            pct_lower(w_init, r.waiting),
            pct_lower(w_es, r.waiting)
        ));
    }
    md.push_str("\nPercentages are waiting-time reductions; negative means more waiting.\n\n");
    md.push_str(&format!("ES vs initial: {:+.2}%\n", pct_lower(w_init, w_es)));
    for r in rows.iter().filter(|r| r.variant.starts_with("marl_")) {
        md.push_str(&format!("{} vs ES: {:+.2}%\n", r.variant, pct_lower(w_es, r.waiting)));
    }

    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.variant.clone(), r.waiting)).collect();
    let svg = bar_chart("Waiting time by variant", "waiting time (vehicle-seconds per step)", &describe(run, "report"), &bars);
    write_outputs(&run.out, vec![(REPORT, md.clone().into_bytes()), (REPORT_PLOT, svg.into_bytes())])?;
    print!("{}", md.split_once("\n\n").map_or(md.as_str(), |(_, rest)| rest));
    Ok(())
}
