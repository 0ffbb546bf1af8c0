//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use coalmtl::da::{da_fit, DaVariant};
use coalmtl::diffusion::{sample_da_instance, sample_mtl_instance, DaInstanceConfig, MtlInstanceConfig};
use coalmtl::evalbench::experiments::{scramble_sweep, ReportRow};
use coalmtl::evalbench::{
    evaluate_weights, learning_curve, load_corpus, save_corpus, target_transfer, CorpusKind, EvalOptions, EvalReport, FitSettings, Method,
    Metric, MultiTaskCorpus,
};
use coalmtl::mtl::{mtl_fit, MtlVariant};
use coalmtl::{TaskDataset, TaskKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{resolve, ConfigFile};
use crate::model::{FittedModel, ModelFile};
use crate::{
    CliError, Command, EvalArgs, ExperimentCommon, ExperimentKind, ExportTreeArgs, FitArgs, LabelKind, ModelKind, PredictArgs, SynthArgs,
    TrainArgs, TreeFormat,
};

const CONFIG_KEYS: &[&str] = &["sigma2", "rho2", "iters", "heldout", "seed", "discrete", "model", "variant"];

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Experiment(a) => cmd_experiment(a.kind),
        Command::ExportTree(a) => cmd_export_tree(&a),
    }
}

fn load_config(fit: &FitArgs) -> Result<ConfigFile, CliError> {
    let file = match &fit.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    file.check_keys(CONFIG_KEYS)?;
    Ok(file)
}

/// Comma-separated list; every item must parse.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let items = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| CliError::Config(format!("bad {what} '{t}': {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("empty {what} list")));
    }
    Ok(items)
}

fn fit_settings(fit: &FitArgs, file: &ConfigFile) -> Result<FitSettings, CliError> {
    let d = FitSettings::default();
    let discrete = match fit.discrete.clone().or_else(|| file.get_str("discrete").map(str::to_string)) {
        Some(s) if !s.trim().is_empty() => parse_list::<usize>(&s, "discrete column")?
            .into_iter()
            .map(|c| c.checked_sub(1).ok_or_else(|| CliError::Config("discrete columns are 1-based".into())))
            .collect::<Result<Vec<_>, _>>()?,
        _ => Vec::new(),
    };
    let s = FitSettings {
        sigma2: resolve(fit.sigma2, file, "sigma2", d.sigma2)?,
        rho2: resolve(fit.rho2, file, "rho2", d.rho2)?,
        max_iters: resolve(fit.iters, file, "iters", d.max_iters)?,
        heldout_fraction: resolve(fit.heldout, file, "heldout", d.heldout_fraction)?,
        seed: resolve(fit.seed, file, "seed", d.seed)?,
        discrete_features: discrete,
    };
    if !(s.sigma2 > 0.0 && s.sigma2.is_finite()) || !(s.rho2 > 0.0 && s.rho2.is_finite()) {
        return Err(CliError::Config("sigma2 and rho2 must be finite and positive".into()));
    }
    if !(s.heldout_fraction > 0.0 && s.heldout_fraction < 1.0) {
        return Err(CliError::Config("heldout must lie in (0, 1)".into()));
    }
    Ok(s)
}

fn load(path: &Path) -> Result<MultiTaskCorpus, CliError> {
    load_corpus(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes to `path`, or standard output when absent.
fn with_output<F>(path: Option<&Path>, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
{
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let file = load_config(&a.fit)?;
    let settings = fit_settings(&a.fit, &file)?;
    let model = resolve(a.model, &file, "model", ModelKind::Da)?;
    let variant = a.variant.clone().or_else(|| file.get_str("variant").map(str::to_string));
    let corpus = load(&a.corpus)?;
    log::info!("loaded {} tasks of dimension {} from {}", corpus.num_tasks(), corpus.dim, a.corpus.display());

    let fitted = match model {
        ModelKind::Da => {
            let v: DaVariant = variant.as_deref().unwrap_or("full").parse().map_err(|e: coalmtl::Error| CliError::Config(e.to_string()))?;
            FittedModel::Da(da_fit(&corpus.tasks, &settings.da_config(v))?)
        }
        ModelKind::Mtl => {
            let v: MtlVariant = variant.as_deref().unwrap_or("diag").parse().map_err(|e: coalmtl::Error| CliError::Config(e.to_string()))?;
            FittedModel::Mtl(mtl_fit(&corpus.tasks, &settings.mtl_config(v))?)
        }
    };
    let m = ModelFile::new(corpus.names.clone(), fitted);

    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    m.save(&a.out.join("model.json"))?;
    let mut trace = String::from("iteration,heldout_loglik,selected\n");
    for (i, v) in m.trace().iter().enumerate() {
        trace.push_str(&format!("{i},{v},{}\n", u8::from(i == m.selected_iteration())));
    }
    write_file(&a.out.join("trace.csv"), &trace)?;
    write_file(&a.out.join("tree.nwk"), &format!("{}\n", m.newick()))?;
    write_file(&a.out.join("tree.dot"), &m.dot())?;
    eprintln!("trained {} on {} tasks; selected iteration {} of {}", m.method(), m.num_tasks(), m.selected_iteration(), m.trace().len() - 1);
    Ok(())
}

/// Maps each corpus task to the model task of the same name.
fn match_tasks(model: &ModelFile, corpus: &MultiTaskCorpus) -> Result<Vec<usize>, CliError> {
    if corpus.dim != model.dim() {
        return Err(CliError::Data(format!("corpus has dimension {}, model expects {}", corpus.dim, model.dim())));
    }
    if corpus.label_kind() != model.kind() {
        return Err(CliError::Data(format!("corpus labels are {:?}, model was trained for {:?}", corpus.label_kind(), model.kind())));
    }
    corpus
        .names
        .iter()
        .map(|n| model.task_index(n).ok_or_else(|| CliError::Data(format!("task '{n}' is not in the model"))))
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let model = ModelFile::load(&a.model_path)?;
    let corpus = load(&a.corpus)?;
    let idx = match_tasks(&model, &corpus)?;
    with_output(a.out.as_deref(), |w| {
        writeln!(w, "task,index,score,label")?;
        for ((t, name), &k) in corpus.tasks.iter().zip(&corpus.names).zip(&idx) {
            for r in 0..t.len() {
                let p = model.predict(k, &t.x.row_dense(r))?;
                writeln!(w, "{},{r},{},{}", csv_field(name), p.score(), p.label())?;
            }
        }
        Ok(())
    })
}

fn parse_metric(s: Option<&str>, kind: TaskKind) -> Result<Metric, CliError> {
    let m = match s {
        Some(s) => s.parse::<Metric>().map_err(|e| CliError::Config(e.to_string()))?,
        None => Metric::default_for(kind),
    };
    if !m.supports(kind) {
        return Err(CliError::Config(format!("metric {m} does not apply to {kind:?} data")));
    }
    Ok(m)
}

/// Per-task rows plus a macro-average row.
pub fn eval_report(model: &ModelFile, corpus: &MultiTaskCorpus, metric: Metric) -> Result<EvalReport, CliError> {
    let idx = match_tasks(model, corpus)?;
    let method = model.method().to_string();
    let mut report = EvalReport::default();
    for ((t, name), &k) in corpus.tasks.iter().zip(&corpus.names).zip(&idx) {
        let value = evaluate_weights(t, model.weights(k), metric)?;
        report.rows.push(ReportRow { method: method.clone(), task: name.clone(), size: t.len(), seed: model.seed(), metric: metric.to_string(), value });
    }
    let mean = report.rows.iter().map(|r| r.value).sum::<f64>() / report.rows.len() as f64;
    let total = corpus.tasks.iter().map(TaskDataset::len).sum();
    report.rows.push(ReportRow {
        method,
        task: coalmtl::evalbench::experiments::MACRO_TASK.to_string(),
        size: total,
        seed: model.seed(),
        metric: metric.to_string(),
        value: mean,
    });
    Ok(report)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let model = ModelFile::load(&a.model_path)?;
    let metric = parse_metric(a.metric.as_deref(), model.kind())?;
    let corpus = load(&a.corpus)?;
    let report = eval_report(&model, &corpus, metric)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for r in &report.rows {
        writeln!(out, "{}\t{}\t{:.6}", r.task, r.metric, r.value)?;
    }
    if let Some(p) = &a.csv {
        report.write_csv(create(p)?)?;
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let kind = match a.labels {
        LabelKind::Classification => TaskKind::Classification,
        LabelKind::Regression => TaskKind::Regression,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (tasks, truth, corpus_kind) = match a.model {
        ModelKind::Da => {
            let cfg = DaInstanceConfig { sigma2: a.sigma2, rho2: a.rho2, input_shift: a.input_shift, ..DaInstanceConfig::new(a.tasks, a.dim, a.examples, kind) };
            let inst = sample_da_instance(&cfg, &mut rng).map_err(|e| CliError::Config(e.to_string()))?;
            (inst.tasks, inst.truth, CorpusKind::Da)
        }
        ModelKind::Mtl => {
            let cfg = MtlInstanceConfig { sigma2: a.sigma2, rho2: a.rho2, ..MtlInstanceConfig::new(a.tasks, a.dim, a.examples, kind) };
            let inst = sample_mtl_instance(&cfg, &mut rng).map_err(|e| CliError::Config(e.to_string()))?;
            (inst.tasks, inst.truth, CorpusKind::Mtl)
        }
    };
    let names = (0..tasks.len()).map(|k| k.to_string()).collect();
    let corpus = MultiTaskCorpus::new(tasks, names, corpus_kind)?;
    save_corpus(&a.out, &corpus).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let truth_path = a.truth.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".truth");
        p.into()
    });
    let mut w = create(&truth_path)?;
    truth.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn eval_options(c: &ExperimentCommon) -> Result<(EvalOptions, Vec<Method>, Vec<u64>, MultiTaskCorpus), CliError> {
    let file = load_config(&c.fit)?;
    let settings = fit_settings(&c.fit, &file)?;
    let methods = Method::parse_list(&c.methods).map_err(|e| CliError::Config(e.to_string()))?;
    let seeds = parse_list::<u64>(&c.seeds, "seed")?;
    if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
        return Err(CliError::Config("test-fraction must lie in (0, 1)".into()));
    }
    let corpus = load(&c.corpus)?;
    let metric = Some(parse_metric(c.metric.as_deref(), corpus.label_kind())?);
    Ok((EvalOptions { metric, test_fraction: c.test_fraction, pca: c.pca, settings }, methods, seeds, corpus))
}

fn task_by_name(corpus: &MultiTaskCorpus, name: &str) -> Result<usize, CliError> {
    corpus.task_index(name).ok_or_else(|| CliError::Config(format!("no task named '{name}' in the corpus")))
}

pub fn cmd_experiment(kind: ExperimentKind) -> Result<(), CliError> {
    let (report, common) = match kind {
        ExperimentKind::Curve { common, sizes } => {
            let (opts, methods, seeds, corpus) = eval_options(&common)?;
            let sizes = parse_list::<usize>(&sizes, "size")?;
            (learning_curve(&corpus, &methods, &sizes, &seeds, &opts)?, common)
        }
        ExperimentKind::Target { common, target, source_size, target_sizes } => {
            let (opts, methods, seeds, corpus) = eval_options(&common)?;
            let sizes = parse_list::<usize>(&target_sizes, "target size")?;
            let t = task_by_name(&corpus, &target)?;
            (target_transfer(&corpus, t, source_size, &sizes, &methods, &seeds, &opts)?, common)
        }
        ExperimentKind::Scramble { common, task, fractions, size } => {
            let (opts, methods, seeds, corpus) = eval_options(&common)?;
            let fractions = parse_list::<f64>(&fractions, "fraction")?;
            let t = task_by_name(&corpus, &task)?;
            (scramble_sweep(&corpus, t, &fractions, &methods, &seeds, size, &opts)?, common)
        }
    };
    with_output(common.out.as_deref(), |w| Ok(report.write_csv(w)?))?;
    if let Some(p) = &common.traces {
        let mut w = create(p)?;
        report.write_traces_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn cmd_export_tree(a: &ExportTreeArgs) -> Result<(), CliError> {
    let model = ModelFile::load(&a.model_path)?;
    let text = match a.format {
        TreeFormat::Newick => format!("{}\n", model.newick()),
        TreeFormat::Dot => model.dot(),
    };
    with_output(a.out.as_deref(), |w| Ok(w.write_all(text.as_bytes())?))
}
