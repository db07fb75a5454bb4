//! Subcommands. Each returns the JSON summary line printed on success.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ehrseq::corpus::io::{read_applications, write_applications, write_corpus, write_jsonl};
use ehrseq::corpus::{
    filter_corpus, generate_synthetic_insurance, ingest_corpus, ApplicationRecord, CorpusFormat, GeneratorConfig,
    InsuranceConfig, PatientHistory, SyntheticWorld, Vocabulary,
};
use ehrseq::embedding::{
    average_group_embedding, export_vectors, load_embeddings, nearest_tokens, patient_embeddings, risk_curve,
    save_embeddings, token_vector_rows, CodeGroup, EmbedOptions, GroupAverages, PoolingStrategy, TokenFilter, VectorRow,
};
use ehrseq::encoder::{train, EncoderModel, ModelConfig, TrainOptions};
use ehrseq::evaluation::{
    ablation_suite, evaluate_visit_prediction, load_category_map, next_code_accuracy, AblationVariant, EvalReport,
    FrequencyScorer, ModelMassScorer, ModelPredictor, MostCommon, NextCodePredictor, Oracle, PooledHeadScorer, Previous,
    VisitScorer,
};
use ehrseq::scoring::{fit_scoring, monthly_eval, split_by_month, EmbeddingSource, Scheme, ScoringArtifact, LAMBDA_GRID};
use serde_json::{json, Value};

use crate::config::Settings;
use crate::service::{read_log, AppState, ArtifactPaths, Artifacts, PsiWindow, QueryLog};

#[derive(Parser, Debug)]
#[command(name = "ehrseq", version, about = "Patient-history embeddings, evaluation and risk scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Random seed (config key `seed`, default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus and insurance applications.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        codes: Option<usize>,
        #[arg(long)]
        applications: Option<usize>,
    },
    /// Drop rare codes and short histories.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        min_code_count: Option<usize>,
        #[arg(long)]
        min_events: Option<usize>,
    },
    /// Build the token vocabulary of a corpus.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the encoder with masked-token prediction.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// desk or full-size hyperparameters before config overrides.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Next-code accuracy by history-length threshold.
    EvalNextCode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// model, previous, most-common or oracle.
        #[arg(long, default_value = "model")]
        predictor: String,
        /// Corpus the most-common baseline is fitted on (default: --corpus).
        #[arg(long)]
        train_corpus: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<String>,
    },
    /// Cross-validated next-visit Precision@k over code categories.
    EvalVisits {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// CSV `code,category`; default groups by 3-character block.
        #[arg(long)]
        categories: Option<PathBuf>,
        /// model-mass, frequency or pooled.
        #[arg(long, default_value = "model-mass")]
        scorer: String,
        #[arg(long)]
        pooling: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        ks: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Pooling / positional / demographics ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        ks: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Restrict to pooling strategies, e.g. `cls,cmm`.
        #[arg(long)]
        pooling: Option<String>,
    },
    /// Patient embeddings, optionally with (gender, age) group averages.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pooling: Option<String>,
        #[arg(long)]
        events_only: bool,
        /// Also write group-average embeddings here.
        #[arg(long)]
        averages: Option<PathBuf>,
    },
    /// Nearest tokens to a token by cosine similarity.
    Neighbors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        token: String,
        #[arg(long)]
        top_n: Option<usize>,
        /// icd, age, gender or any.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Probability of a code group by age and gender for an empty history.
    RiskCurve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Code prefix or comma-separated codes.
        #[arg(long)]
        group: String,
        #[arg(long)]
        min_age: Option<u32>,
        #[arg(long)]
        max_age: Option<u32>,
    },
    /// Token or patient vectors as TSV.
    ExportVectors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        filter: Option<String>,
        /// Export a patient embedding file instead of token vectors.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Fit the ridge risk scorer with lambda chosen on validation months.
    ScoreTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        applications: PathBuf,
        #[arg(long)]
        scheme: Option<String>,
        /// First validation month.
        #[arg(long)]
        boundary: Option<u32>,
        #[command(flatten)]
        encoder: EncoderPaths,
    },
    /// Monthly ROC AUC of a fitted scorer.
    ScoreEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        applications: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        /// Only evaluate months at or after this one.
        #[arg(long)]
        from_month: Option<u32>,
        #[command(flatten)]
        encoder: EncoderPaths,
    },
    /// PSI of logged or freshly scored applications against the reference.
    Psi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scorer: PathBuf,
        /// Query log to read scores from.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Applications to score instead of a log.
        #[arg(long)]
        applications: Option<PathBuf>,
        #[arg(long)]
        since: Option<String>,
        #[arg(long)]
        until: Option<String>,
        #[arg(long)]
        last: Option<usize>,
        #[command(flatten)]
        encoder: EncoderPaths,
    },
    /// HTTP scoring service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Query log path (default queries.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        encoder: EncoderPaths,
    },
}

/// Encoder artifacts behind replacement-scheme features.
#[derive(Args, Clone, Debug, Default)]
pub struct EncoderPaths {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub averages: Option<PathBuf>,
}

struct LoadedEncoder {
    model: EncoderModel,
    vocab: Vocabulary,
    averages: GroupAverages,
}

impl EncoderPaths {
    fn load(&self) -> Result<Option<LoadedEncoder>> {
        match (&self.model, &self.vocab, &self.averages) {
            (None, None, None) => Ok(None),
            (Some(m), Some(v), Some(a)) => {
                let vocab = Vocabulary::load(v)?;
                let model = EncoderModel::load(m, Some(&vocab.hash()))?;
                let averages = GroupAverages::load(a)?;
                Ok(Some(LoadedEncoder { model, vocab, averages }))
            }
            _ => bail!("--model, --vocab and --averages go together"),
        }
    }
}

impl LoadedEncoder {
    fn source(&self) -> Result<EmbeddingSource<'_>> {
        Ok(EmbeddingSource::new(&self.model, &self.vocab, &self.averages)?)
    }
}

fn out_path(common: &Common, what: &str) -> Result<PathBuf> {
    common.out.clone().ok_or_else(|| anyhow!("missing --out ({what})"))
}

fn settings(common: &Common) -> Result<Settings> {
    Settings::load(common.config.as_deref())
}

fn seed(common: &Common, s: &Settings) -> Result<u64> {
    s.pick(common.seed, "seed", 0)
}

fn read_corpus(path: &Path) -> Result<Vec<PatientHistory>> {
    let (ps, report) = ingest_corpus(path, CorpusFormat::Jsonl)?;
    if report.skipped > 0 {
        tracing::warn!(skipped = report.skipped, path = %path.display(), "malformed corpus lines skipped");
    }
    Ok(ps)
}

fn read_apps(path: &Path) -> Result<Vec<ApplicationRecord>> {
    Ok(read_applications(path, CorpusFormat::Jsonl)?.0)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| anyhow!("{what}: {x:?}: {e}")))
        .collect()
}

fn list_setting<T: std::str::FromStr>(flag: &Option<String>, s: &Settings, key: &str, default: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let raw = flag.clone().or_else(|| s.raw(key).map(str::to_string)).unwrap_or_else(|| default.to_string());
    parse_list(&raw, key)
}

pub fn model_config(s: &Settings, vocab_size: usize, preset: Option<&str>) -> Result<ModelConfig> {
    let preset = preset.map(str::to_string).or_else(|| s.raw("model.preset").map(str::to_string));
    let base = match preset.as_deref().unwrap_or("desk") {
        "desk" => ModelConfig::desk(vocab_size),
        "full" => ModelConfig::full(vocab_size),
        other => bail!("unknown preset {other:?} (desk|full)"),
    };
    // `model.preset` selects the base and is not a struct field.
    let mut s = s.clone();
    s.remove("model.preset");
    let mut cfg = s.overlay(base, "model")?;
    cfg.vocab_size = vocab_size;
    cfg.validate()?;
    Ok(cfg)
}

fn report_json(r: &EvalReport) -> Value {
    let cells: serde_json::Map<String, Value> = r
        .cells
        .iter()
        .map(|c| (c.key.clone(), json!({ "mean": c.mean, "std": c.std, "count": c.count })))
        .collect();
    Value::Object(cells)
}

fn write_reports(path: Option<&Path>, reports: &[EvalReport]) -> Result<()> {
    if let Some(p) = path {
        let text: String = reports.iter().map(EvalReport::to_jsonl).collect();
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenData {
            common,
            patients,
            codes,
            applications,
        } => gen_data(&common, patients, codes, applications),
        Command::Filter {
            common,
            corpus,
            min_code_count,
            min_events,
        } => {
            let s = settings(&common)?;
            let out = out_path(&common, "filtered corpus")?;
            let ps = read_corpus(&corpus)?;
            let min_code = s.pick(min_code_count, "filter.min_code_count", 5)?;
            let min_ev = s.pick(min_events, "filter.min_events", 2)?;
            let (kept, stats) = filter_corpus(&ps, min_code, min_ev);
            write_corpus(&out, &kept)?;
            Ok(json!({ "command": "filter", "out": out, "stats": stats }))
        }
        Command::BuildVocab { common, corpus } => {
            let out = out_path(&common, "vocabulary file")?;
            let ps = read_corpus(&corpus)?;
            let v = Vocabulary::build(&ps)?;
            v.save(&out)?;
            Ok(json!({ "command": "build-vocab", "out": out, "tokens": v.len(), "icd_codes": v.n_icd(), "hash": v.hash() }))
        }
        Command::Train {
            common,
            corpus,
            vocab,
            preset,
            epochs,
            workers,
            checkpoint_dir,
        } => {
            let s = settings(&common)?;
            let out = out_path(&common, "model checkpoint")?;
            let v = Vocabulary::load(&vocab)?;
            let mut cfg = model_config(&s, v.len(), preset.as_deref())?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let ps = read_corpus(&corpus)?;
            let enc = cfg.encode_options();
            let samples: Vec<_> = ps.iter().map(|p| ehrseq::corpus::encode_history(p, &v, enc)).collect();
            let mut model = EncoderModel::new(cfg, v.hash(), seed(&common, &s)?)?;
            let opts = TrainOptions {
                workers: s.pick(workers, "train.workers", 1)?,
                checkpoint_dir,
            };
            let started = Instant::now();
            let report = train(&mut model, &samples, &opts, |e| {
                tracing::info!(epoch = e.epoch, loss = e.mean_loss, seconds = e.seconds, "epoch done");
            })?;
            model.save(&out)?;
            Ok(json!({
                "command": "train",
                "out": out,
                "params": model.n_params(),
                "losses": report.losses(),
                "seconds": started.elapsed().as_secs_f64(),
            }))
        }
        Command::EvalNextCode {
            common,
            corpus,
            vocab,
            model,
            predictor,
            train_corpus,
            thresholds,
        } => {
            let s = settings(&common)?;
            let ps = read_corpus(&corpus)?;
            let ths: Vec<usize> = list_setting(&thresholds, &s, "eval.thresholds", "2,4,8,12,16")?;
            let loaded;
            let p: Box<dyn NextCodePredictor + '_> = match predictor.as_str() {
                "previous" => Box::new(Previous),
                "oracle" => Box::new(Oracle::new(&ps)),
                "most-common" => {
                    let fit_on = match &train_corpus {
                        Some(t) => read_corpus(t)?,
                        None => ps.clone(),
                    };
                    Box::new(MostCommon::fit(&fit_on)?)
                }
                "model" => {
                    let (Some(vp), Some(mp)) = (&vocab, &model) else {
                        bail!("the model predictor needs --vocab and --model");
                    };
                    let v = Vocabulary::load(vp)?;
                    let m = EncoderModel::load(mp, Some(&v.hash()))?;
                    loaded = (m, v);
                    Box::new(ModelPredictor {
                        model: &loaded.0,
                        vocab: &loaded.1,
                    })
                }
                other => bail!("unknown predictor {other:?} (model|previous|most-common|oracle)"),
            };
            let report = next_code_accuracy(p.as_ref(), &ps, &ths)?;
            write_reports(common.out.as_deref(), std::slice::from_ref(&report))?;
            Ok(json!({ "command": "eval-next-code", "predictor": predictor, "accuracy": report_json(&report) }))
        }
        Command::EvalVisits {
            common,
            corpus,
            vocab,
            model,
            categories,
            scorer,
            pooling,
            folds,
            ks,
            lambda,
        } => {
            let s = settings(&common)?;
            let ps = read_corpus(&corpus)?;
            let v = Vocabulary::load(&vocab)?;
            let cmap = load_category_map(categories.as_deref(), &v)?;
            let ks: Vec<usize> = list_setting(&ks, &s, "eval.ks", "5,10,20,30")?;
            let folds = s.pick(folds, "eval.folds", 10)?;
            let lambda = s.pick(lambda, "eval.lambda", 10.0)?;
            let m = model.as_ref().map(|mp| EncoderModel::load(mp, Some(&v.hash()))).transpose()?;
            let need_model = || m.as_ref().ok_or_else(|| anyhow!("scorer {scorer:?} needs --model"));
            let mut sc: Box<dyn VisitScorer> = match scorer.as_str() {
                "frequency" => Box::new(FrequencyScorer::new(&cmap)),
                "model-mass" => Box::new(ModelMassScorer {
                    model: need_model()?,
                    vocab: &v,
                    cmap: &cmap,
                }),
                "pooled" => {
                    let strategy: PoolingStrategy = s.pick(
                        pooling.as_deref().map(str::parse).transpose()?,
                        "eval.pooling",
                        PoolingStrategy::ConcatMeanMax,
                    )?;
                    Box::new(PooledHeadScorer::new(need_model()?, &v, &cmap, strategy, lambda))
                }
                other => bail!("unknown scorer {other:?} (model-mass|frequency|pooled)"),
            };
            let report = evaluate_visit_prediction(sc.as_mut(), &ps, &cmap, &ks, folds, seed(&common, &s)?)?;
            write_reports(common.out.as_deref(), std::slice::from_ref(&report))?;
            Ok(json!({
                "command": "eval-visits",
                "scorer": report.variant,
                "categories": cmap.len(),
                "category_source": cmap.source,
                "precision": report_json(&report),
            }))
        }
        Command::Ablate {
            common,
            corpus,
            vocab,
            categories,
            folds,
            ks,
            lambda,
            pooling,
        } => {
            let s = settings(&common)?;
            let ps = read_corpus(&corpus)?;
            let v = Vocabulary::load(&vocab)?;
            let cmap = load_category_map(categories.as_deref(), &v)?;
            let ks: Vec<usize> = list_setting(&ks, &s, "eval.ks", "5,10,20,30")?;
            let folds = s.pick(folds, "eval.folds", 10)?;
            let lambda = s.pick(lambda, "eval.lambda", 10.0)?;
            let cfg = model_config(&s, v.len(), None)?;
            let mut grid = AblationVariant::grid();
            if let Some(p) = pooling {
                let keep: Vec<PoolingStrategy> = parse_list(&p, "pooling")?;
                grid.retain(|g| keep.contains(&g.pooling));
            }
            let results = ablation_suite(&ps, &v, &cfg, &grid, &cmap, &ks, folds, seed(&common, &s)?, lambda);
            let mut reports = Vec::new();
            let mut rows = serde_json::Map::new();
            for (variant, r) in results {
                match r {
                    Ok(r) => {
                        rows.insert(variant.name(), report_json(&r));
                        reports.push(r);
                    }
                    Err(e) => {
                        rows.insert(variant.name(), json!({ "error": e.to_string() }));
                    }
                }
            }
            write_reports(common.out.as_deref(), &reports)?;
            eprint!("{}", EvalReport::table(&reports));
            Ok(json!({ "command": "ablate", "variants": rows }))
        }
        Command::Embed {
            common,
            corpus,
            vocab,
            model,
            pooling,
            events_only,
            averages,
        } => {
            let s = settings(&common)?;
            let out = out_path(&common, "embedding file")?;
            let v = Vocabulary::load(&vocab)?;
            let m = EncoderModel::load(&model, Some(&v.hash()))?;
            let ps = read_corpus(&corpus)?;
            let strategy: PoolingStrategy =
                s.pick(pooling.as_deref().map(str::parse).transpose()?, "embed.pooling", PoolingStrategy::Mean)?;
            let embs = patient_embeddings(&m, &ps, &v, EmbedOptions { strategy, events_only })?;
            save_embeddings(&out, &embs)?;
            let mut summary = json!({
                "command": "embed",
                "out": out,
                "patients": embs.len(),
                "dim": embs.first().map_or(0, |e| e.vector.len()),
                "pooling": strategy,
            });
            if let Some(a) = averages {
                let g = average_group_embedding(&m, &ps, &v, strategy)?;
                g.save(&a)?;
                summary["averages"] = json!(a);
                summary["groups"] = json!(g.by_age.len());
            }
            Ok(summary)
        }
        Command::Neighbors {
            common,
            vocab,
            model,
            token,
            top_n,
            filter,
        } => {
            let s = settings(&common)?;
            let v = Vocabulary::load(&vocab)?;
            let m = EncoderModel::load(&model, Some(&v.hash()))?;
            let top_n = s.pick(top_n, "neighbors.top_n", 10)?;
            let filter: TokenFilter =
                s.pick(filter.as_deref().map(str::parse).transpose()?, "neighbors.filter", TokenFilter::Icd)?;
            let near = nearest_tokens(&m, &v, &token, top_n, filter)?;
            let rows: Vec<Value> = near.iter().map(|(t, c)| json!({ "token": t, "cosine": c })).collect();
            if let Some(out) = &common.out {
                write_jsonl(out, &rows)?;
            }
            Ok(json!({ "command": "neighbors", "token": token, "neighbors": rows }))
        }
        Command::RiskCurve {
            common,
            vocab,
            model,
            group,
            min_age,
            max_age,
        } => {
            let s = settings(&common)?;
            let v = Vocabulary::load(&vocab)?;
            let m = EncoderModel::load(&model, Some(&v.hash()))?;
            let g: CodeGroup = group.parse()?;
            let lo = s.pick(min_age, "risk.min_age", 0)?;
            let hi = s.pick(max_age, "risk.max_age", 99)?;
            let curves = risk_curve(&m, &v, &g, lo..=hi)?;
            if let Some(out) = &common.out {
                let mut text = String::from("age\tmale\tfemale\taveraged\n");
                for i in 0..curves.ages.len() {
                    text.push_str(&format!(
                        "{}\t{}\t{}\t{}\n",
                        curves.ages[i], curves.male[i], curves.female[i], curves.averaged[i]
                    ));
                }
                std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
            }
            let peak = curves
                .ages
                .iter()
                .zip(&curves.averaged)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(a, _)| *a);
            Ok(json!({ "command": "risk-curve", "group": group, "peak_age": peak, "curves": curves }))
        }
        Command::ExportVectors {
            common,
            vocab,
            model,
            filter,
            embeddings,
        } => {
            let s = settings(&common)?;
            let out = out_path(&common, "vector TSV")?;
            let rows: Vec<VectorRow> = match (&embeddings, &vocab, &model) {
                (Some(e), _, _) => load_embeddings(e)?
                    .into_iter()
                    .map(|p| VectorRow {
                        id: p.patient_id,
                        label: p.strategy.to_string(),
                        vector: p.vector,
                    })
                    .collect(),
                (None, Some(vp), Some(mp)) => {
                    let v = Vocabulary::load(vp)?;
                    let m = EncoderModel::load(mp, Some(&v.hash()))?;
                    let filter: TokenFilter =
                        s.pick(filter.as_deref().map(str::parse).transpose()?, "export.filter", TokenFilter::Any)?;
                    token_vector_rows(&m, &v, filter)
                }
                _ => bail!("export-vectors needs --embeddings or both --vocab and --model"),
            };
            export_vectors(&out, &rows)?;
            Ok(json!({ "command": "export-vectors", "out": out, "rows": rows.len(), "dim": rows.first().map_or(0, |r| r.vector.len()) }))
        }
        Command::ScoreTrain {
            common,
            applications,
            scheme,
            boundary,
            encoder,
        } => {
            let s = settings(&common)?;
            let out = out_path(&common, "scorer artifact")?;
            let scheme: Scheme = s.pick(scheme.as_deref().map(str::parse).transpose()?, "score.scheme", Scheme::Base)?;
            let boundary = s.pick(boundary, "score.boundary", 6)?;
            let lambdas: Vec<f64> = match s.raw("score.lambdas") {
                Some(l) => parse_list(l, "score.lambdas")?,
                None => LAMBDA_GRID.to_vec(),
            };
            let apps = read_apps(&applications)?;
            let (train_apps, valid) = split_by_month(&apps, boundary);
            let enc = encoder.load()?;
            let src = enc.as_ref().map(LoadedEncoder::source).transpose()?;
            if scheme == Scheme::Replacement && src.is_none() {
                bail!("the replacement scheme needs --model, --vocab and --averages");
            }
            let src = if scheme == Scheme::Base { None } else { src };
            let fit = fit_scoring(&train_apps, &valid, scheme, src.as_ref(), &lambdas)?;
            fit.artifact.save(&out)?;
            Ok(json!({
                "command": "score-train",
                "out": out,
                "scheme": scheme,
                "lambda": fit.lambda,
                "grid": fit.grid,
                "validation_auc": fit.validation.average,
                "validation_std": fit.validation.std,
                "train_rows": train_apps.len(),
                "validation_rows": valid.len(),
                "width": fit.artifact.schema.width(),
            }))
        }
        Command::ScoreEval {
            common,
            applications,
            scorer,
            from_month,
            encoder,
        } => {
            let art = ScoringArtifact::load(&scorer)?;
            let enc = encoder.load()?;
            let src = enc.as_ref().map(LoadedEncoder::source).transpose()?;
            let mut apps = read_apps(&applications)?;
            if let Some(m) = from_month {
                apps.retain(|a| a.month >= m);
            }
            let report = monthly_eval(&art, &apps, src.as_ref())?;
            if let Some(out) = &common.out {
                let scheme = art.schema.scheme;
                let rows = report.months.iter().map(|m| json!({ "scheme": scheme, "month": m.month, "auc": m.auc, "n": m.n, "positives": m.positives }));
                write_jsonl(out, rows)?;
            }
            Ok(json!({
                "command": "score-eval",
                "scheme": art.schema.scheme,
                "average_auc": report.average,
                "std": report.std,
                "months": report.months.len(),
                "skipped_months": report.skipped(),
            }))
        }
        Command::Psi {
            common: _,
            scorer,
            log,
            applications,
            since,
            until,
            last,
            encoder,
        } => {
            let art = ScoringArtifact::load(&scorer)?;
            let scores = match (&log, &applications) {
                (Some(l), None) => PsiWindow { since, until, last }
                    .select(&read_log(l)?)
                    .map_err(|e| anyhow!("window: {e}"))?,
                (None, Some(a)) => {
                    let enc = encoder.load()?;
                    let src = enc.as_ref().map(LoadedEncoder::source).transpose()?;
                    art.score(&read_apps(a)?, src.as_ref())?
                }
                _ => bail!("psi needs exactly one of --log or --applications"),
            };
            let value = art.reference.psi(&scores)?;
            Ok(json!({ "command": "psi", "psi": value, "n": scores.len(), "bins": art.reference.bins() }))
        }
        Command::Serve {
            common,
            scorer,
            host,
            port,
            log,
            encoder,
        } => {
            let s = settings(&common)?;
            let host = s.pick(host, "serve.host", "127.0.0.1".to_string())?;
            let port = s.pick(port, "serve.port", 8080)?;
            let log = log
                .or_else(|| s.raw("serve.log").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("queries.jsonl"));
            let artifacts = Artifacts::load(&ArtifactPaths {
                scorer,
                model: encoder.model,
                vocab: encoder.vocab,
                averages: encoder.averages,
            })?;
            let state = Arc::new(AppState {
                artifacts,
                log: QueryLog::open(&log)?,
            });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                let addr = listener.local_addr()?;
                println!(
                    "{}",
                    json!({ "command": "serve", "addr": addr.to_string(), "log": log, "hashes": state.artifacts.hashes })
                );
                axum::serve(listener, crate::service::router(state)).await?;
                Ok::<_, anyhow::Error>(())
            })?;
            Ok(Value::Null)
        }
    }
}

fn gen_data(common: &Common, patients: Option<usize>, codes: Option<usize>, applications: Option<usize>) -> Result<Value> {
    let s = settings(common)?;
    let seed = seed(common, &s)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut gcfg = s.overlay(GeneratorConfig::default(), "gen")?;
    if let Some(n) = patients {
        gcfg.n_patients = n;
    }
    if let Some(n) = codes {
        gcfg.n_codes = n;
    }
    let mut icfg = s.overlay(InsuranceConfig::default(), "insurance")?;
    if let Some(n) = applications {
        icfg.n_apps = n;
    }
    let world = SyntheticWorld::new(seed, gcfg.n_codes, gcfg.zipf_exponent)?;
    let corpus = world.sample(0, &gcfg)?;
    // Applicants are other people from the same world.
    let applicants = world.sample(1, &gcfg)?;
    let apps = generate_synthetic_insurance(seed, &applicants, &icfg)?;
    let corpus_path = dir.join("corpus.jsonl");
    let apps_path = dir.join("applications.jsonl");
    write_corpus(&corpus_path, &corpus)?;
    write_applications(&apps_path, &apps)?;
    let events: usize = corpus.iter().map(|p| p.events.len()).sum();
    let positives = apps.iter().filter(|a| a.claim == 1).count();
    Ok(json!({
        "command": "gen-data",
        "seed": seed,
        "corpus": corpus_path,
        "applications": apps_path,
        "patients": corpus.len(),
        "events": events,
        "n_applications": apps.len(),
        "positive_rate": positives as f64 / apps.len().max(1) as f64,
    }))
}
