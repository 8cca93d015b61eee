use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use speechtext::audit::{audit, MODULES};
use speechtext::config::RunConfig;
use speechtext::data::io::{load_corpus, save_corpus, save_features, save_sentences, TEXT_FILE};
use speechtext::data::{gen_corpus, gen_sentences, CorpusConfig, MelConfig};
use speechtext::eval::write_reports;
use speechtext::pipeline::{
    check_corpus, evaluate as evaluate_items, init_finetune, load_run_corpus, prepare_finetune, prepare_pretrain,
    run_finetune, run_pretrain,
};
use speechtext::tasks::{TaskKind, TaskSpec};
use speechtext::trainer::{load_checkpoint, save_checkpoint, ModelState};
use speechtext::{Error, Result};

use crate::metrics::MetricsLog;
use crate::{EvaluateArgs, FinetuneArgs, GenDataArgs, GradAuditArgs, PretrainArgs};

pub const CONFIG_DUMP: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CKPT: &str = "last.ckpt";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn step_ckpt(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step{step:06}.ckpt"))
}

/// Everything gen-data needs, dumped next to the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub sentences: usize,
    pub max_words: usize,
    pub corpus: CorpusConfig,
    pub mel: MelConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            sentences: 256,
            max_words: 3,
            corpus: CorpusConfig::default(),
            mel: MelConfig::default(),
        }
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<u8> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => GenDataConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    if let Some(n) = a.n {
        cfg.corpus.n_utterances = n;
    }
    if let Some(s) = a.speakers {
        cfg.corpus.n_speakers = s;
    }
    if let Some(s) = a.sentences {
        cfg.sentences = s;
    }
    cfg.mel.validate()?;
    create_dir(&a.out)?;
    let dump = a.out.join("gen-data.toml");
    fs::write(&dump, toml::to_string_pretty(&cfg).expect("serializable")).map_err(|e| io_err(&dump, e))?;

    if cfg.corpus.n_utterances == 0 {
        eprintln!("warning: --n 0 writes an empty corpus");
    }
    let corpus = gen_corpus(&cfg.corpus)?;
    let sentences = gen_sentences(cfg.corpus.seed, cfg.sentences, &cfg.corpus.alphabet, cfg.max_words)?;
    save_corpus(&corpus, &a.out)?;
    save_features(&corpus, &a.out, &cfg.mel)?;
    save_sentences(&a.out.join(TEXT_FILE), &sentences)?;
    let samples: usize = corpus.utterances.iter().map(|u| u.waveform.len()).sum();
    println!(
        "utterances={} speakers={} sentences={} samples={} out={}",
        corpus.len(),
        corpus.n_speakers,
        sentences.len(),
        samples,
        a.out.display()
    );
    Ok(0)
}

pub fn pretrain(a: PretrainArgs) -> Result<u8> {
    let mut cfg = load_or_default(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.optim.total_steps = s;
    }
    if let Some(c) = a.corpus {
        cfg.data.corpus = c;
    }
    cfg.pretrain.speech &= !a.no_speech_pt;
    cfg.pretrain.text &= !a.no_text_pt;
    cfg.pretrain.joint &= !a.no_joint;
    cfg.pretrain.mlm &= !a.no_mlm;
    cfg.validate()?;
    create_dir(&a.out)?;
    cfg.dump(&a.out.join(CONFIG_DUMP))?;

    let corpus = load_run_corpus(&cfg)?;
    let data = prepare_pretrain::<f64>(&cfg, &corpus)?;
    let mut state = match &a.resume {
        Some(p) => load_checkpoint::<f64>(p, &cfg.model)?,
        None => ModelState::new(&cfg.model, cfg.seed)?,
    };
    let header: Vec<String> = ["step", "L_mlm", "L_1", "L_bce", "L_mle", "L_d", "total", "lr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut log = MetricsLog::open(&a.out.join(METRICS_FILE), &header, a.resume.is_some())?;
    let every = cfg.checkpoint_every;
    let out = a.out.clone();
    run_pretrain(&mut state, &data, &cfg, cfg.optim.total_steps, |st, rec| {
        let l = &rec.losses;
        let mut row = vec![rec.step.to_string()];
        row.extend([l.mlm, l.l1, l.bce, l.mle, l.diversity, l.total, rec.lr].map(|v| v.to_string()));
        log.row(row)?;
        if every > 0 && rec.step % every == 0 {
            save_checkpoint(st, &step_ckpt(&out, rec.step))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, &a.out.join(LAST_CKPT))?;
    println!("pretrain: step {} checkpoint {}", state.step, a.out.join(LAST_CKPT).display());
    Ok(0)
}

fn parse_task(name: &str) -> Result<TaskKind> {
    let kind: TaskKind = name.parse()?;
    if kind == TaskKind::Pretrain {
        return Err(Error::Routing("pretrain is not a fine-tuning task; use the pretrain command".into()));
    }
    Ok(kind)
}

pub fn finetune(a: FinetuneArgs) -> Result<u8> {
    let kind = parse_task(&a.task)?;
    let mut cfg = load_or_default(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.finetune.optim.total_steps = s;
    }
    if let Some(c) = a.corpus {
        cfg.data.corpus = c;
    }
    if let Some(l) = a.limit {
        cfg.data.limit = l;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    cfg.dump(&a.out.join(CONFIG_DUMP))?;

    let spec = TaskSpec::for_kind(kind);
    let corpus = load_run_corpus(&cfg)?;
    let items = prepare_finetune::<f64>(&cfg, kind, &corpus)?;
    let init = if a.no_init { None } else { a.init.as_deref() };
    let (mut state, fresh) = init_finetune::<f64>(&cfg, init)?;
    if init.is_some() {
        println!("finetune: {} parameter tensors freshly initialised", fresh.len());
    }
    let mut header = vec!["step".to_string(), "loss".to_string()];
    header.extend(spec.losses.iter().map(|k| k.column().to_string()));
    header.push("lr".into());
    let mut log = MetricsLog::open(&a.out.join(METRICS_FILE), &header, false)?;
    let every = cfg.checkpoint_every;
    let out = a.out.clone();
    let losses = spec.losses.clone();
    run_finetune(&mut state, &spec, &items, &cfg, cfg.finetune.optim.total_steps, |st, rec| {
        let mut row = vec![rec.step.to_string(), rec.loss.to_string()];
        for k in &losses {
            let v = rec.parts.iter().find(|(p, _)| p == k).map_or(0.0, |(_, v)| *v);
            row.push(v.to_string());
        }
        row.push(rec.lr.to_string());
        log.row(row)?;
        if every > 0 && rec.step % every == 0 {
            save_checkpoint(st, &step_ckpt(&out, rec.step))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, &a.out.join(LAST_CKPT))?;
    println!("finetune {}: step {} checkpoint {}", kind, state.step, a.out.join(LAST_CKPT).display());
    Ok(0)
}

pub fn evaluate(a: EvaluateArgs) -> Result<u8> {
    let kind = parse_task(&a.task)?;
    if !a.ckpt.is_file() {
        return Err(io_err(
            &a.ckpt,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let ckpt_dir = a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let config_path = a.config.clone().or_else(|| {
        let p = ckpt_dir.join(CONFIG_DUMP);
        p.is_file().then_some(p)
    });
    let mut cfg = load_or_default(config_path.as_deref())?;
    if let Some(alpha) = a.alpha {
        cfg.decode.alpha = alpha;
    }
    if let Some(beam) = a.beam {
        cfg.decode.beam = beam;
    }
    if let Some(l) = a.limit {
        cfg.data.limit = l;
    }
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| ckpt_dir.join(format!("eval-{kind}")));
    create_dir(&out)?;
    cfg.dump(&out.join(CONFIG_DUMP))?;

    let state = load_checkpoint::<f64>(&a.ckpt, &cfg.model)?;
    let corpus = if a.split == "train" {
        load_run_corpus(&cfg)?
    } else {
        let c = load_corpus(Path::new(&a.split))?;
        check_corpus(&cfg, &c)?;
        c
    };
    let items = prepare_finetune::<f64>(&cfg, kind, &corpus)?;
    let reports = evaluate_items(&state, kind, &items, &corpus.vocab()?, &cfg)?;
    write_reports(&out, &reports)?;
    for r in &reports {
        println!("{} {}={} n={}", kind, r.metric, r.value, r.count);
    }
    Ok(0)
}

pub fn grad_audit(a: GradAuditArgs) -> Result<u8> {
    println!("grad-audit module={} seed={} tol={:e}", a.module, a.seed, a.tol);
    let modules: Vec<&str> = if a.module == "all" {
        MODULES.to_vec()
    } else {
        vec![a.module.as_str()]
    };
    let mut results = Vec::new();
    for m in modules {
        let r = audit(m, a.seed, a.tol)?;
        println!(
            "{:<24} {} max_rel_err={:.3e} worst={} probes={}",
            r.module,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_error,
            r.worst,
            r.checked
        );
        results.push(r);
    }
    let worst = results
        .iter()
        .max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error))
        .expect("at least one module");
    println!(
        "worst offender: {} at {} (analytic {:.6e}, numeric {:.6e}, rel err {:.3e})",
        worst.module, worst.worst, worst.analytic, worst.numeric, worst.max_rel_error
    );
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("grad-audit: {failed} case(s) exceed tolerance {:e}", a.tol);
        return Ok(2);
    }
    Ok(0)
}
