use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use promptlab::attention::suite::{self, ContextualCase, ContextualSuiteConfig};
use promptlab::attention::{self, ContextualParams, ScaleProfile};
use promptlab::boltzmann::lemmas::{self, SuiteConfig};
use promptlab::fast_attention::bench::{self, BenchConfig, BenchRecord, DRule, Method, PhaseSummary};
use promptlab::separation;
use promptlab::surrogate_prompt::{self, Dataset, MemorizeConfig};
use promptlab::transformer_builder::Family;
use promptlab::SeqMatrix;

use crate::config::{self, layered, read_file, to_json, write_text, CliError, SCHEMA_VERSION};
use crate::Common;

pub enum Outcome {
    Pass,
    Fail,
    InputError,
}

impl Outcome {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    pass: bool,
    config: &'a C,
    report: R,
    /// Wall-clock seconds; the only field that differs between replays.
    elapsed_s: f64,
}

fn emit<C: Serialize, R: Serialize>(
    common: &Common,
    command: &str,
    pass: bool,
    cfg: &C,
    report: R,
    start: Instant,
) -> Result<(), CliError> {
    let env = Envelope { schema_version: SCHEMA_VERSION, command, pass, config: cfg, report, elapsed_s: start.elapsed().as_secs_f64() };
    write_text(common.out.as_deref(), &to_json(&env)?)
}

fn profile_or(common: &Common, current: ScaleProfile) -> ScaleProfile {
    common.profile.map_or(current, config::profile)
}

#[derive(Args, Debug)]
pub struct BoltzArgs {
    /// Cases for each identity / derivative check.
    #[arg(long)]
    vectors: Option<usize>,
    /// Cases for each ordering and gap lemma.
    #[arg(long)]
    instances: Option<usize>,
    /// Random suites for the distance-preservation check.
    #[arg(long)]
    separation_suites: Option<usize>,
    /// γ handed to the distance-preservation checker instead of the generating γ.
    #[arg(long)]
    check_gamma: Option<f64>,
}

pub fn boltz_check(common: &Common, args: &BoltzArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut cfg: SuiteConfig = layered(SuiteConfig::default(), common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.vectors = args.vectors.unwrap_or(cfg.vectors);
    cfg.instances = args.instances.unwrap_or(cfg.instances);
    cfg.separation_suites = args.separation_suites.unwrap_or(cfg.separation_suites);
    cfg.check_gamma = args.check_gamma.or(cfg.check_gamma);
    let report = lemmas::run_suite(&cfg);
    for t in &report.tallies {
        info!("{}: {}/{} passed", t.lemma, t.passed, t.cases);
    }
    let (pass, violations) = (report.pass, !report.precondition_violations.is_empty());
    emit(common, "boltz-check", pass, &cfg, &report, start)?;
    Ok(if violations { Outcome::InputError } else { Outcome::from_pass(pass) })
}

#[derive(Args, Debug)]
pub struct ContextualArgs {
    /// Randomly drawn vocabularies to build and verify.
    #[arg(long)]
    suites: Option<usize>,
    /// Token separation ε the head is built for.
    #[arg(long)]
    eps: Option<f64>,
    /// JSON array of sequences `{rows, cols, data}` to verify instead of a generated suite.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Write the constructed head (first suite case, or the input's head) here.
    #[arg(long)]
    head_out: Option<PathBuf>,
}

pub fn contextual(common: &Common, args: &ContextualArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut cfg: ContextualSuiteConfig = layered(ContextualSuiteConfig::default(), common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.suites = args.suites.unwrap_or(cfg.suites);
    cfg.eps = args.eps.unwrap_or(cfg.eps);
    cfg.profile = profile_or(common, cfg.profile);

    let Some(input) = &args.input else {
        let report = suite::run_contextual_suite(&cfg)?;
        info!("{}/{} suites passed", report.passed, report.suites);
        if let Some(path) = &args.head_out {
            let case = suite::generate_case(&cfg, 0)?;
            let vocab = separation::extract_vocab(&case.seqs);
            let head = attention::build_contextual_head(&vocab, &case.params, case.s, case.rho, cfg.seed)?;
            write_text(Some(path), &head.to_json()?)?;
        }
        emit(common, "contextual", report.pass, &cfg, &report, start)?;
        return Ok(Outcome::from_pass(report.pass));
    };

    let seqs: Vec<SeqMatrix> =
        serde_json::from_str(&read_file(input)?).map_err(|e| CliError::Input(format!("{}: {e}", input.display())))?;
    let first = seqs.first().ok_or_else(|| CliError::Input("no sequences in the input".into()))?;
    let vocab = separation::extract_vocab(&seqs);
    let norms: Vec<f64> = vocab.tokens().iter().map(|t| t.norm()).collect();
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(0.0, f64::max);
    let params = ContextualParams::new(cfg.eps, 0.95 * lo, 1.05 * hi, vocab.len(), first.len(), cfg.profile)?;
    let d = vocab.d();
    let case = ContextualCase { index: 0, d, s: d, rho: 1, seqs, params: params.clone() };
    let outcome = suite::run_case(&case, cfg.seed)?;
    if let Some(path) = &args.head_out {
        let head = attention::build_contextual_head(&vocab, &params, d, 1, cfg.seed)?;
        write_text(Some(path), &head.to_json()?)?;
    }
    let pass = outcome.pass;
    emit(common, "contextual", pass, &cfg, &outcome, start)?;
    Ok(Outcome::from_pass(pass))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FamilyArg {
    A,
    B,
}

#[derive(Args, Debug)]
pub struct MemorizeArgs {
    /// JSON dataset: an array of `{X, Y, d, L}` with row-major X and Y.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Error budget per pair.
    #[arg(long)]
    eps: Option<f64>,
    /// Lipschitz constant C of the target.
    #[arg(long)]
    lipschitz: Option<f64>,
    /// Exponent of the entrywise norm the error is measured in.
    #[arg(long)]
    alpha: Option<f64>,
    /// Construction: a is deep and narrow, b is two wide layers.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Ramp width of the family-B step layer.
    #[arg(long)]
    theta: Option<f64>,
    /// Bump steepness of the family-B output layer.
    #[arg(long)]
    bump_k: Option<f64>,
    /// Write the constructed net here.
    #[arg(long)]
    net_out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MemorizeRun {
    data: Option<PathBuf>,
    net_out: Option<PathBuf>,
    eps: f64,
    lipschitz: f64,
    alpha: f64,
    family: Family,
    seed: u64,
    profile: ScaleProfile,
    theta: Option<f64>,
    bump_k: Option<f64>,
}

impl Default for MemorizeRun {
    fn default() -> Self {
        MemorizeRun {
            data: None,
            net_out: None,
            eps: 1.0,
            lipschitz: 1.0,
            alpha: 1.0,
            family: Family::B,
            seed: 0,
            profile: ScaleProfile::default(),
            theta: None,
            bump_k: None,
        }
    }
}

#[derive(Serialize)]
struct MemorizeOutput<'a> {
    #[serde(flatten)]
    report: &'a surrogate_prompt::MemorizeReport,
    prompt: &'a SeqMatrix,
}

pub fn memorize(common: &Common, args: &MemorizeArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut run: MemorizeRun = layered(MemorizeRun::default(), common.config.as_deref())?;
    run.seed = common.seed.unwrap_or(run.seed);
    run.profile = profile_or(common, run.profile);
    run.data = args.data.clone().or(run.data);
    run.net_out = args.net_out.clone().or(run.net_out);
    run.eps = args.eps.unwrap_or(run.eps);
    run.lipschitz = args.lipschitz.unwrap_or(run.lipschitz);
    run.alpha = args.alpha.unwrap_or(run.alpha);
    run.theta = args.theta.or(run.theta);
    run.bump_k = args.bump_k.or(run.bump_k);
    if let Some(f) = args.family {
        run.family = match f {
            FamilyArg::A => Family::A,
            FamilyArg::B => Family::B,
        };
    }
    let path = run.data.as_ref().ok_or_else(|| CliError::Input("memorize needs --data".into()))?;
    let data = Dataset::from_json(&read_file(path)?)?;

    let mut mc = MemorizeConfig::new(run.eps, run.lipschitz, run.alpha, run.family);
    mc.seed = run.seed;
    mc.profile = run.profile;
    mc.theta = run.theta;
    mc.bump_k = run.bump_k;
    let m = surrogate_prompt::memorize_unchecked(&data, &mc)?;
    info!(
        "family {:?}: depth {}, width {}, L_p {}, max error {}",
        m.report.family, m.report.depth, m.report.width, m.report.prompt_len, m.report.max_error
    );
    if let Some(p) = &run.net_out {
        write_text(Some(p), &m.net.to_json()?)?;
    }
    let pass = m.report.pass;
    emit(common, "memorize", pass, &run, MemorizeOutput { report: &m.report, prompt: &m.prompt }, start)?;
    Ok(Outcome::from_pass(pass))
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Sequence lengths, comma separated.
    #[arg(long = "n", value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Entry bounds B, comma separated.
    #[arg(long = "b", value_delimiter = ',')]
    b_list: Option<Vec<f64>>,
    /// Fixed head dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Max-entry error the low-rank result must certify.
    #[arg(long)]
    delta_f: Option<f64>,
    /// Timed repetitions per cell (median reported).
    #[arg(long)]
    reps: Option<usize>,
    /// Instance seeds, comma separated; defaults to the master seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Cells needing more Taylor features than this are recorded as infeasible.
    #[arg(long)]
    max_feature_dim: Option<u128>,
    /// Skip the low-rank method.
    #[arg(long, conflicts_with = "lowrank_only")]
    exact_only: bool,
    /// Skip exact attention.
    #[arg(long)]
    lowrank_only: bool,
    /// Write records as CSV (stdout without a path); the default.
    #[arg(long, num_args = 0..=1)]
    csv: Option<Option<PathBuf>>,
    /// Write records as JSON lines (stdout without a path).
    #[arg(long, num_args = 0..=1)]
    jsonl: Option<Option<PathBuf>>,
}

#[derive(Serialize)]
struct SlopeRow {
    #[serde(rename = "B")]
    b: f64,
    exact: Option<f64>,
    lowrank: Option<f64>,
}

#[derive(Serialize)]
struct BenchSummary {
    records: usize,
    /// Low-rank cells that ran but missed δ_F.
    uncertified: usize,
    /// Low-rank cells skipped because the feature dimension exceeded the budget.
    infeasible: usize,
    loglog_slopes: Vec<SlopeRow>,
    phase: Vec<PhaseSummary>,
}

fn write_records(
    records: &[BenchRecord],
    target: &Option<PathBuf>,
    csv: bool,
) -> Result<(), CliError> {
    let out: Box<dyn std::io::Write> = match target {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::stdout()),
    };
    if csv {
        bench::write_csv(records, out)?;
    } else {
        bench::write_jsonl(records, out)?;
    }
    Ok(())
}

pub fn apti_bench(common: &Common, args: &BenchArgs, phase: bool) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let base = if phase { BenchConfig::phase_preset() } else { BenchConfig::default() };
    let mut cfg: BenchConfig = layered(base, common.config.as_deref())?;
    if let Some(v) = &args.n_list {
        cfg.n_list = v.clone();
    }
    if let Some(v) = &args.b_list {
        cfg.b_list = v.clone();
    }
    if let Some(d) = args.d {
        cfg.d_rule = DRule::Fixed { d };
    }
    cfg.delta_f = args.delta_f.unwrap_or(cfg.delta_f);
    cfg.reps = args.reps.unwrap_or(cfg.reps);
    cfg.max_feature_dim = args.max_feature_dim.unwrap_or(cfg.max_feature_dim);
    match (&args.seeds, common.seed) {
        (Some(s), _) => cfg.seeds = s.clone(),
        (None, Some(s)) => cfg.seeds = vec![s],
        _ => {}
    }
    if args.exact_only {
        cfg.run_lowrank = false;
    }
    if args.lowrank_only {
        cfg.run_exact = false;
    }

    let records = bench::phase_bench(&cfg)?;
    let lowrank: Vec<&BenchRecord> = records.iter().filter(|r| r.method == Method::LowRank).collect();
    let uncertified = lowrank.iter().filter(|r| r.wall_time_s.is_some() && !r.certified).count();
    let infeasible = lowrank.iter().filter(|r| r.wall_time_s.is_none()).count();
    let mut bs = cfg.b_list.clone();
    bs.sort_by(f64::total_cmp);
    bs.dedup();
    let summary = BenchSummary {
        records: records.len(),
        uncertified,
        infeasible,
        loglog_slopes: bs
            .iter()
            .map(|&b| SlopeRow {
                b,
                exact: bench::scaling_slope(&records, Method::Exact, b),
                lowrank: bench::scaling_slope(&records, Method::LowRank, b),
            })
            .collect(),
        phase: cfg.n_list.iter().map(|&n| bench::phase_summary(&records, n)).collect(),
    };
    for p in &summary.phase {
        info!("n = {}: crossover B = {:?}, √ln n = {:.3}", p.n, p.crossover_b, p.sqrt_log_n);
    }

    let wants_csv = args.csv.is_some() || args.jsonl.is_none();
    if wants_csv {
        write_records(&records, args.csv.as_ref().unwrap_or(&None), true)?;
    }
    if let Some(target) = &args.jsonl {
        write_records(&records, target, false)?;
    }
    let stdout_busy = (wants_csv && args.csv.as_ref().unwrap_or(&None).is_none()) || matches!(args.jsonl, Some(None));
    let pass = uncertified == 0;
    if common.out.is_some() || !stdout_busy {
        let command = if phase { "phase-diagram" } else { "apti-bench" };
        emit(common, command, pass, &cfg, &summary, start)?;
    }
    Ok(Outcome::from_pass(pass))
}
