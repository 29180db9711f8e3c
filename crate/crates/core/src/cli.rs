//! Argument handling and command dispatch for the `asu` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{
    attention_entropy_csv, attention_entropy_curve, attention_entropy_violations, factual_function_curves,
    layer_sweep, layer_sweep_csv, margin_flip_scan, margin_csv, role_curve_csv, summarize_role_curves,
    verify_lemmas, DEFAULT_SAMPLES, DEFAULT_TAU_GRID,
};
use crate::datagen::{Corpus, Split, Task};
use crate::error::{Error, Result};
use crate::metrics::{membership_auc, privleak, write_record_csv, DEFAULT_MIN_K};
use crate::model::ModelParams;
use crate::runner::{
    continual_csv, continual_unlearn, corpus_hash, evaluate_plan, loss_csv, refine_tau, sweep_csv, sweep_tau,
    train_base, train_csv, train_retain_only, unlearn, EvalConfig, Manifest, RunConfig, UnlearnPlan,
};
use crate::teacher::{select_temperature, DEFAULT_FLUENCY_THRESHOLD, FLUENCY_PROMPTS};

#[derive(Debug, Parser)]
#[command(name = "asu", version, about = "Attention-smoothing unlearning laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// RunConfig JSON file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model, or the retain-only reference.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        retain_only: bool,
    },
    /// Unlearn the forget split from a base checkpoint.
    Unlearn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        privleak: bool,
        /// Retain-only checkpoint for PrivLeak.
        #[arg(long, requires = "privleak")]
        retrain: Option<PathBuf>,
        /// Cap on QA records per set; 0 means all.
        #[arg(long, default_value_t = 0)]
        max_records: usize,
    },
    /// One unlearning run per temperature.
    SweepTau {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Base checkpoint; trained from the config when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Defaults to the config output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequential unlearning over disjoint entity subsets.
    Continual {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        steps: usize,
        /// Fraction of training entities forgotten per step.
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numeric checks of the temperature derivatives.
    VerifyLemmas {
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TAU_GRID)]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "asu-lemmas")]
        out: PathBuf,
    },
    /// Search for the teacher temperature on a trained base.
    SelectTau {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "asu-select-tau")]
        out: PathBuf,
        /// Target NLL; base NLL + ln 4 when absent.
        #[arg(long)]
        target_nll: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_FLUENCY_THRESHOLD)]
        fluency_threshold: f64,
        /// Also run the final refinement grid with this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Token-role curves, margin scan, layer sweep and attention entropy.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.5, 2.0, 2.3, 3.0, 4.0])]
        grid: Vec<f64>,
        /// Temperature for the layer sweep.
        #[arg(long, default_value_t = 2.3)]
        tau: f64,
    },
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage or contract error, 2 numeric failure.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

/// `ASU_THREADS` caps the rayon pool; unset means one thread per core.
fn configure_threads() {
    if let Some(n) = std::env::var("ASU_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Input(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(Error::Input(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    require_file(&args.config, "config")?;
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(out: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    out.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Input("no --out given and config has no output_dir".into()))
}

fn config_manifest(command: &str, cfg: &RunConfig, corpus: &Corpus) -> Result<Manifest> {
    let mut m = Manifest::new(command);
    m.seed = Some(cfg.seed);
    m.config_hash = Some(cfg.hash()?);
    m.corpus_hash = Some(corpus_hash(corpus)?);
    Ok(m)
}

/// Runs `body` and always leaves a manifest in `dir`, marking failures.
fn with_manifest(dir: &Path, mut m: Manifest, body: impl FnOnce(&mut Manifest) -> Result<i32>) -> Result<i32> {
    fs::create_dir_all(dir)?;
    let r = body(&mut m);
    if let Err(e) = &r {
        m.status = format!("failed: {e}");
    }
    m.write(dir)?;
    r
}

fn write(dir: &Path, m: &mut Manifest, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    m.outputs.push(name.into());
    Ok(())
}

fn load_base(path: Option<&PathBuf>, cfg: &RunConfig, corpus: &Corpus, dir: &Path, m: &mut Manifest) -> Result<ModelParams> {
    match path {
        Some(p) => ModelParams::load(p),
        None => {
            let o = train_base(cfg, corpus)?;
            if !o.gate_passed {
                return Err(Error::Diverged {
                    step: o.epochs_run,
                    detail: format!("memorization gate not reached, seq_prob {:.4}", o.final_seq_prob),
                });
            }
            o.params.save(&dir.join("base.ckpt"))?;
            m.outputs.push("base.ckpt".into());
            Ok(o.params)
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { cfg, out } => {
            let mut c = load_config(&cfg)?;
            if let Some(s) = cfg.seed {
                c.corpus.seed = s;
            }
            let corpus = c.corpus()?;
            with_manifest(&out, config_manifest("gen-data", &c, &corpus)?, |m| {
                corpus.write(&out)?;
                m.outputs.extend(["corpus.jsonl".to_string(), "vocab.txt".to_string()]);
                m.detail = json!({ "records": corpus.records.len(), "vocab": corpus.vocab.len(), "corpus_seed": c.corpus.seed });
                Ok(0)
            })
        }
        Command::Train { cfg, out, retain_only } => {
            let c = load_config(&cfg)?;
            let corpus = c.corpus()?;
            let name = if retain_only { "train --retain-only" } else { "train" };
            with_manifest(&out, config_manifest(name, &c, &corpus)?, |m| {
                let o = if retain_only { train_retain_only(&c, &corpus)? } else { train_base(&c, &corpus)? };
                o.params.save(&out.join("model.ckpt"))?;
                m.outputs.push("model.ckpt".into());
                write(&out, m, "train_curve.csv", train_csv(&o.curve))?;
                corpus.write(&out.join("corpus"))?;
                m.outputs.push("corpus/".into());
                m.detail = json!({
                    "epochs_run": o.epochs_run,
                    "gate_passed": o.gate_passed,
                    "final_seq_prob": o.final_seq_prob,
                    "checksum": o.params.checksum(),
                });
                if o.gate_passed {
                    Ok(0)
                } else {
                    m.status = "gate_not_reached".into();
                    Ok(2)
                }
            })
        }
        Command::Unlearn { cfg, base, out } => {
            let c = load_config(&cfg)?;
            require_file(&base, "base checkpoint")?;
            let corpus = c.corpus()?;
            with_manifest(&out, config_manifest("unlearn", &c, &corpus)?, |m| {
                let base = ModelParams::load(&base)?;
                let o = unlearn(&c, &base, &corpus)?;
                o.params.save(&out.join("model.ckpt"))?;
                m.outputs.push("model.ckpt".into());
                write(&out, m, "losses.csv", loss_csv(&o.losses))?;
                if let Some(pre) = &o.pre {
                    write(&out, m, "metrics_pre.json", pre.report.to_json()?)?;
                }
                write(&out, m, "metrics.json", o.post.report.to_json()?)?;
                write_record_csv(&out.join("forget_records.csv"), &o.post.forget_rows)?;
                write_record_csv(&out.join("retain_records.csv"), &o.post.retain_rows)?;
                m.outputs.extend(["forget_records.csv".to_string(), "retain_records.csv".to_string()]);
                m.detail = json!({
                    "method": c.method.to_string(),
                    "mu": o.post.report.mu,
                    "fe": o.post.report.fe,
                    "teacher_checksum": o.teacher_checksum.map(|t| t.0),
                });
                Ok(0)
            })
        }
        Command::Eval { model, corpus, out, privleak: want_leak, retrain, max_records } => {
            require_file(&model, "model checkpoint")?;
            require_dir(&corpus, "corpus directory")?;
            if let Some(r) = &retrain {
                require_file(r, "retrain checkpoint")?;
            }
            if want_leak && retrain.is_none() {
                return Err(Error::Input("--privleak needs --retrain".into()));
            }
            let corpus = Corpus::load(&corpus)?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| ".".into());
            let mut manifest = Manifest::new("eval");
            manifest.corpus_hash = Some(corpus_hash(&corpus)?);
            with_manifest(&dir, manifest, |m| {
                let params = ModelParams::load(&model)?;
                let eval = EvalConfig { max_records, pre_eval: false, ..EvalConfig::default() };
                let plan = UnlearnPlan::from_splits(&corpus, &eval);
                let mut report = evaluate_plan(&params, &corpus, &plan, &eval, None)?.report;
                if let Some(r) = &retrain {
                    let reference = ModelParams::load(r)?;
                    let members = corpus.split(Split::Forget);
                    let non = corpus.split(Split::Holdout);
                    let auc = membership_auc(&params, &corpus, &members, &non, DEFAULT_MIN_K)?;
                    let auc_r = membership_auc(&reference, &corpus, &members, &non, DEFAULT_MIN_K)?;
                    report.auc = Some(auc);
                    report.auc_retrain = Some(auc_r);
                    report.privleak = Some(privleak(auc, auc_r)?);
                }
                fs::write(&out, report.to_json()?)?;
                m.outputs.push(out.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default());
                m.detail = json!({ "model_checksum": params.checksum() });
                Ok(0)
            })
        }
        Command::SweepTau { cfg, grid, base, out } => {
            let c = load_config(&cfg)?;
            if let Some(b) = &base {
                require_file(b, "base checkpoint")?;
            }
            let dir = out_dir(out, &c)?;
            let corpus = c.corpus()?;
            with_manifest(&dir, config_manifest("sweep-tau", &c, &corpus)?, |m| {
                let base = load_base(base.as_ref(), &c, &corpus, &dir, m)?;
                let rows = sweep_tau(&c, &base, &corpus, &grid)?;
                write(&dir, m, "sweep_tau.csv", sweep_csv(&rows))?;
                m.detail = json!({ "grid": grid });
                Ok(0)
            })
        }
        Command::Continual { cfg, steps, fraction, base, out } => {
            let c = load_config(&cfg)?;
            if let Some(b) = &base {
                require_file(b, "base checkpoint")?;
            }
            let dir = out_dir(out, &c)?;
            let corpus = c.corpus()?;
            with_manifest(&dir, config_manifest("continual", &c, &corpus)?, |m| {
                let base = load_base(base.as_ref(), &c, &corpus, &dir, m)?;
                let (params, rows) = continual_unlearn(&c, &base, &corpus, steps, fraction)?;
                params.save(&dir.join("model.ckpt"))?;
                m.outputs.push("model.ckpt".into());
                write(&dir, m, "continual.csv", continual_csv(&rows))?;
                write(&dir, m, "continual.json", serde_json::to_vec_pretty(&rows)?)?;
                m.detail = json!({ "steps": steps, "fraction": fraction, "method": c.method.to_string() });
                Ok(0)
            })
        }
        Command::VerifyLemmas { samples, grid, seed, out } => {
            let mut manifest = Manifest::new("verify-lemmas");
            manifest.seed = Some(seed);
            with_manifest(&out, manifest, |m| {
                let s = verify_lemmas(samples, &grid, seed)?;
                let text = serde_json::to_string_pretty(&s)?;
                println!("{text}");
                write(&out, m, "lemmas.json", &text)?;
                m.detail = json!({ "passed": s.passed });
                if s.passed {
                    Ok(0)
                } else {
                    m.status = "check_failed".into();
                    Ok(2)
                }
            })
        }
        Command::SelectTau { base, corpus, out, target_nll, fluency_threshold, config } => {
            require_file(&base, "base checkpoint")?;
            require_dir(&corpus, "corpus directory")?;
            let cfg = match &config {
                Some(p) => {
                    require_file(p, "config")?;
                    Some(RunConfig::load(p)?)
                }
                None => None,
            };
            let corpus = Corpus::load(&corpus)?;
            let mut manifest = Manifest::new("select-tau");
            manifest.corpus_hash = Some(corpus_hash(&corpus)?);
            if let Some(c) = &cfg {
                manifest.config_hash = Some(c.hash()?);
                manifest.seed = Some(c.seed);
            }
            with_manifest(&out, manifest, |m| {
                let params = ModelParams::load(&base)?;
                let forget = corpus.select(Split::Forget, Task::Qa);
                let examples = forget.iter().map(|r| corpus.example(r)).collect::<Result<Vec<_>>>()?;
                let prompts = forget
                    .iter()
                    .cycle()
                    .take(FLUENCY_PROMPTS.min(forget.len().max(1) * FLUENCY_PROMPTS))
                    .map(|r| corpus.prompt_ids(r))
                    .collect::<Result<Vec<_>>>()?;
                let max_new = corpus.records.iter().map(|r| r.answer_tokens.len()).max().unwrap_or(1) + 1;
                let report = select_temperature(&params, &examples, &prompts, target_nll, fluency_threshold, max_new)?;
                let mut selected = report.selected;
                if let Some(c) = &cfg {
                    let (best, rows) = refine_tau(c, &params, &corpus, report.selected)?;
                    selected = best;
                    write(&out, m, "refine.csv", sweep_csv(&rows))?;
                }
                write(&out, m, "select_tau.json", serde_json::to_vec_pretty(&report)?)?;
                m.detail = json!({ "search": report.selected, "selected": selected });
                println!("{selected}");
                Ok(0)
            })
        }
        Command::Analyze { model, corpus, out, grid, tau } => {
            require_file(&model, "model checkpoint")?;
            require_dir(&corpus, "corpus directory")?;
            let corpus = Corpus::load(&corpus)?;
            let mut manifest = Manifest::new("analyze");
            manifest.corpus_hash = Some(corpus_hash(&corpus)?);
            with_manifest(&out, manifest, |m| {
                let params = ModelParams::load(&model)?;
                let recs = corpus.select(Split::Forget, Task::Qa);
                let curves = factual_function_curves(&params, &corpus, &recs, &grid)?;
                write(&out, m, "role_curves.csv", role_curve_csv(&curves))?;
                let scan_grid: Vec<f64> = grid.iter().copied().filter(|t| (1.0..=crate::teacher::TAU_CAP).contains(t)).collect();
                let scan = margin_flip_scan(&params, &corpus, &recs, &scan_grid)?;
                write(&out, m, "margin_scan.csv", margin_csv(&scan))?;
                let windows: Vec<usize> = (0..=params.config().n_layers).collect();
                let sweep = layer_sweep(&params, &corpus, &recs, tau, &windows)?;
                write(&out, m, "layer_sweep.csv", layer_sweep_csv(&sweep))?;
                let prompt = corpus.example(recs.first().ok_or_else(|| Error::Input("no forget records".into()))?)?;
                let ent = attention_entropy_curve(&params, prompt.input(), &[1.0, 1.5, 2.0, 3.0, 4.0, 8.0])?;
                write(&out, m, "attention_entropy.csv", attention_entropy_csv(&ent))?;
                let summary = json!({
                    "role_curves": summarize_role_curves(&curves)?,
                    "margin_scan": scan,
                    "attention_entropy_violations": attention_entropy_violations(&ent),
                });
                write(&out, m, "analysis.json", serde_json::to_vec_pretty(&summary)?)?;
                Ok(0)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_from(["asu", "no-such-command"]), 1);
        assert_eq!(run_from(["asu", "verify-lemmas", "--bogus"]), 1);
        assert_eq!(run_from(["asu", "--help"]), 0);
    }

    #[test]
    fn missing_checkpoint_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sub").join("report.json");
        let code = run_from([
            "asu".into(),
            "eval".into(),
            "--model".into(),
            dir.path().join("missing.ckpt").into_os_string(),
            "--corpus".into(),
            dir.path().as_os_str().to_owned(),
            "--out".into(),
            out.clone().into_os_string(),
        ]);
        assert_eq!(code, 1);
        assert!(!out.exists());
        assert!(!dir.path().join("sub").exists());
    }

    #[test]
    fn verify_lemmas_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("lemmas");
        let code = run_from(["asu".into(), "verify-lemmas".into(), "--out".into(), out.clone().into_os_string()]);
        assert_eq!(code, 0);
        let s: serde_json::Value = serde_json::from_slice(&fs::read(out.join("lemmas.json")).unwrap()).unwrap();
        assert!(s["weight_derivative"]["max_abs_deviation"].as_f64().unwrap() <= 1e-6);
        assert!(s["entropy_derivative"]["max_abs_deviation"].as_f64().unwrap() <= 1e-6);
        let m: Manifest = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.status, "ok");
    }

    #[test]
    fn unknown_config_key_is_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"epochs": 1, "learning_rate": 3}"#).unwrap();
        let code = run_from([
            "asu".into(),
            "gen-data".into(),
            "--config".into(),
            cfg.into_os_string(),
            "--out".into(),
            dir.path().join("d").into_os_string(),
        ]);
        assert_eq!(code, 1);
        assert!(!dir.path().join("d").exists());
    }
}
