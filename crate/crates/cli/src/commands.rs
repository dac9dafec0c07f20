//! One function per subcommand. Each writes its artifacts under the
//! configured paths and a JSONL log whose first line records the command
//! and any flag overrides.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use condense::contrastive::train_contrastive;
use condense::data::{gen_corpus, read_dataset, write_dataset, Format, Task};
use condense::eval::{
    last_token_embedding, loss_distribution, loss_pair_csv, matrix_csv, pca_csv, stage_pca, token_similarity_matrix, top_share,
    EvalReport,
};
use condense::model::{embed_batch_values, ensure_checkpoint_matches, load_checkpoint, save_checkpoint, ModelParams};
use condense::pipeline::{
    ablate_k, ablation_csv, evaluate, full_model_grad_check, held_out_sets, retrieval_sets, similarity_payloads, ExperimentConfig,
};
use condense::pretrain::{train_pretrain, CheckpointSink, LossKind};
use condense::tensor::primitive_grad_checks;
use serde_json::json;

use crate::config::RunConfig;
use crate::{AnalysisKind, Cli, CliError, Command};

/// Relative tolerance of the primitive gradient checks.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Relative tolerance of the full-model gradient check.
pub const MODEL_TOL: f64 = 1e-3;

type Overrides = Vec<(&'static str, String)>;

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    let mut overrides: Overrides = Vec::new();
    if let Command::GenData { format, count, seed } = &cli.command {
        if let Some(f) = format {
            cfg.data.format = Format::parse(f).ok_or_else(|| CliError::Usage(format!("unknown format `{f}`")))?;
            overrides.push(("data.format", f.clone()));
        }
        if let Some(c) = count {
            cfg.data.count = *c;
            overrides.push(("data.count", c.to_string()));
        }
        if let Some(s) = seed {
            cfg.seed = *s;
            overrides.push(("seed", s.to_string()));
        }
    }
    if let Command::Pretrain { loss: Some(l), .. } = &cli.command {
        cfg.pretrain.loss = LossKind::parse(l).ok_or_else(|| CliError::Usage(format!("unknown loss `{l}`")))?;
        overrides.push(("pretrain.loss", l.clone()));
    }
    for (k, v) in &overrides {
        eprintln!("override {k} = {v}");
    }
    cfg.validate()?;
    match &cli.command {
        Command::GenData { .. } => gen_data(&cfg, &overrides),
        Command::Pretrain { resume, .. } => pretrain(&cfg, &overrides, *resume),
        Command::Contrast { init } => contrast(&cfg, init),
        Command::Eval { checkpoint, tasks } => {
            let tasks: Vec<Task> = tasks.iter().map(|&t| t.into()).collect();
            eval(&cfg, checkpoint.as_deref(), &tasks)
        }
        Command::Analyze { kind, checkpoint } => analyze(&cfg, *kind, checkpoint.as_deref()),
        Command::GradCheck => grad_check(),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| condense::Error::Io { path: dir.to_path_buf(), source: e }.into())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        create_dir(d)?;
    }
    fs::write(path, contents).map_err(|e| condense::Error::Io { path: path.to_path_buf(), source: e }.into())
}

/// `<logs>/<name>.jsonl`, truncated, with a provenance header line.
fn open_log(cfg: &RunConfig, name: &str, overrides: &Overrides, extra: serde_json::Value) -> Result<BufWriter<File>, CliError> {
    create_dir(&cfg.paths.logs)?;
    let path = cfg.paths.logs.join(format!("{name}.jsonl"));
    let file = File::create(&path).map_err(|e| condense::Error::Io { path: path.clone(), source: e })?;
    let mut log = BufWriter::new(file);
    let ov: serde_json::Map<String, serde_json::Value> = overrides.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let header = json!({ "command": name, "seed": cfg.seed, "overrides": ov, "run": extra });
    writeln!(log, "{header}").map_err(|e| condense::Error::Io { path, source: e })?;
    Ok(log)
}

fn finish(mut log: BufWriter<File>) -> Result<(), CliError> {
    log.flush().map_err(|e| condense::Error::Io { path: PathBuf::from("<log>"), source: e }.into())
}

fn gen_data(cfg: &RunConfig, overrides: &Overrides) -> Result<(), CliError> {
    let exp = cfg.experiment();
    let records = gen_corpus(&exp.data)?;
    if let Some(d) = cfg.paths.dataset.parent() {
        create_dir(d)?;
    }
    write_dataset(&cfg.paths.dataset, &records)?;
    let log = open_log(cfg, "gen-data", overrides, json!({ "records": records.len(), "format": exp.data.format.name() }))?;
    finish(log)?;
    println!("wrote {} records to {}", records.len(), cfg.paths.dataset.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<condense::data::Record>, CliError> {
    if !cfg.paths.dataset.exists() {
        return Err(condense::Error::Data(format!("no dataset at {}; run `condense gen-data` first", cfg.paths.dataset.display())).into());
    }
    Ok(read_dataset(&cfg.paths.dataset)?)
}

fn load_params(cfg: &ExperimentConfig, path: &Path) -> Result<ModelParams<f32>, CliError> {
    ensure_checkpoint_matches(path, &cfg.model)?;
    Ok(load_checkpoint(path, &cfg.model)?)
}

fn pretrain(cfg: &RunConfig, overrides: &Overrides, resume: bool) -> Result<(), CliError> {
    let exp = cfg.experiment();
    let records = load_dataset(cfg)?;
    let ckpt = cfg.pretrain_checkpoint();
    let mut params = if resume {
        load_params(&exp, &ckpt)?
    } else {
        ModelParams::init(&exp.model)?
    };
    let mut log = open_log(
        cfg,
        "pretrain",
        overrides,
        json!({ "loss": exp.pretrain.loss, "records": records.len(), "resume": resume }),
    )?;
    let sink = CheckpointSink { path: &ckpt, every: exp.pretrain.checkpoint_every };
    let losses = train_pretrain(&mut params, &exp.model, &records, &exp.pretrain, &mut log, Some(sink))?;
    finish(log)?;
    if losses.is_empty() {
        save_checkpoint(&params, &exp.model, &ckpt)?;
    }
    println!(
        "pretrained {} steps, final loss {:.4}, checkpoint {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn contrast(cfg: &RunConfig, init: &str) -> Result<(), CliError> {
    let exp = cfg.experiment();
    let mut params = if init == "fresh" {
        ModelParams::init(&exp.model)?
    } else {
        load_params(&exp, Path::new(init))?
    };
    let sets = retrieval_sets(&exp)?;
    let mut log = open_log(cfg, "contrast", &Vec::new(), json!({ "init": init }))?;
    let report = train_contrastive(&mut params, &exp.model, &sets.train, &sets.held_out, &exp.contrastive, &mut log)?;
    finish(log)?;
    let ckpt = cfg.contrast_checkpoint();
    save_checkpoint(&params, &exp.model, &ckpt)?;
    println!(
        "contrastive tuning: {} steps, final loss {:.4}, checkpoint {}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, tasks: &[Task]) -> Result<(), CliError> {
    let mut exp = cfg.experiment();
    let path = checkpoint.map_or_else(|| cfg.contrast_checkpoint(), Path::to_path_buf);
    let params = load_params(&exp, &path)?;
    if !tasks.is_empty() {
        let mut t = tasks.to_vec();
        t.sort();
        t.dedup();
        exp.contrastive.tasks = t;
    }
    let held_out = held_out_sets(&exp)?;
    let report = EvalReport {
        checkpoint: path.display().to_string(),
        seed: cfg.seed,
        tasks: evaluate(&params, &exp.model, &held_out, exp.contrastive.eval_batch_size)?,
    };
    let line = serde_json::to_string(&report).expect("report serializes");
    write_file(&cfg.paths.reports.join("eval.jsonl"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn analyze(cfg: &RunConfig, kind: AnalysisKind, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let exp = cfg.experiment();
    let reports = &cfg.paths.reports;
    let ckpt = checkpoint.map_or_else(|| cfg.pretrain_checkpoint(), Path::to_path_buf);
    match kind {
        AnalysisKind::Sim => {
            let params = load_params(&exp, &ckpt)?;
            let m = token_similarity_matrix(&params, &exp.model, &similarity_payloads(&exp, cfg.analysis.samples))?;
            let path = reports.join("similarity.csv");
            write_file(&path, &matrix_csv(&m))?;
            let k = m.rows();
            let off = if k > 1 {
                (m.data().iter().sum::<f64>() - k as f64) / (k * k - k) as f64
            } else {
                1.0
            };
            println!("K = {k}, mean off-diagonal similarity {off:.4}; wrote {}", path.display());
        }
        AnalysisKind::Pca => {
            let payloads = similarity_payloads(&exp, cfg.analysis.samples);
            let base = ModelParams::<f32>::init(&exp.model)?;
            let base_pts = payloads
                .iter()
                .map(|p| last_token_embedding(&base, &exp.model, p))
                .collect::<condense::Result<Vec<_>>>()?;
            let mut stages = vec![("base".to_string(), base_pts)];
            for (stage, path) in [("pretrain", cfg.pretrain_checkpoint()), ("contrastive", cfg.contrast_checkpoint())] {
                let params = load_params(&exp, &path)?;
                let e = embed_batch_values(&params, &exp.model, &payloads)?;
                let rows = (0..e.rows()).map(|r| e.row(r).iter().map(|&x| x as f64).collect()).collect();
                stages.push((stage.to_string(), rows));
            }
            let (pca, labels) = stage_pca(&stages, 2)?;
            write_file(&reports.join("pca.csv"), &pca_csv(&pca, &labels))?;
            let ratios: String = pca.explained_ratio.iter().enumerate().map(|(i, r)| format!("pc{},{r}\n", i + 1)).collect();
            write_file(&reports.join("pca_variance.csv"), &format!("component,explained_ratio\n{ratios}"))?;
            if pca.degenerate {
                eprintln!("warning: all embeddings are identical; PCA is degenerate");
            }
            println!("explained variance {:?}; wrote {}", pca.explained_ratio, reports.join("pca.csv").display());
        }
        AnalysisKind::Lossdist => {
            let params = load_params(&exp, &ckpt)?;
            let records = load_dataset(cfg)?;
            let record = records.get(cfg.analysis.record).ok_or_else(|| {
                CliError::Config(format!("analysis.record: index {} but the dataset has {} records", cfg.analysis.record, records.len()))
            })?;
            let (ce, _) = loss_distribution(&params, &exp.model, record, LossKind::Ntp)?;
            let (kl, _) = loss_distribution(&params, &exp.model, record, LossKind::Kl)?;
            write_file(&reports.join("lossdist.csv"), &loss_pair_csv(&ce, &kl))?;
            let share = |v: &[condense::eval::LabelledLoss]| top_share(&v.iter().map(|l| l.value).collect::<Vec<_>>(), 0.1);
            println!(
                "record {}: top-10% loss share CE {:.4}, KL {:.4}; wrote {}",
                record.id,
                share(&ce),
                share(&kl),
                reports.join("lossdist.csv").display()
            );
        }
        AnalysisKind::AblateK => {
            let rows = ablate_k(&exp, &cfg.analysis.k_values)?;
            write_file(&reports.join("ablate_k.csv"), &ablation_csv(&rows))?;
            for r in &rows {
                if let (Some(k), Some(m)) = (r.k, &r.similarity) {
                    write_file(&reports.join(format!("similarity_k{k}.csv")), &matrix_csv(m))?;
                }
            }
            print!("{}", ablation_csv(&rows));
        }
    }
    Ok(())
}

fn grad_check() -> Result<(), CliError> {
    let mut failed = 0;
    for (name, r) in primitive_grad_checks(PRIMITIVE_TOL)? {
        println!("{} primitive {name}: max rel err {:.2e}", if r.passed { "PASS" } else { "FAIL" }, r.max_rel_err);
        failed += !r.passed as usize;
    }
    for (name, r) in full_model_grad_check(0, MODEL_TOL)? {
        println!("{} model {name}: max rel err {:.2e}", if r.passed { "PASS" } else { "FAIL" }, r.max_rel_err);
        failed += !r.passed as usize;
    }
    if failed > 0 {
        return Err(condense::Error::Data(format!("{failed} gradient checks failed")).into());
    }
    println!("all gradient checks passed");
    Ok(())
}
