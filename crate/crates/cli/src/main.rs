use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crashqc_core::backend::Classifier;
use crashqc_core::corpus::{
    export_csv, export_jsonl, ingest_path, parse_timestamp, split_by_year, ColumnMapping,
    CrashRecord, Direction, Ingested, RoadwayClass,
};
use crashqc_core::evalkit::{comparison_report, validate_golden, GoldenFile};
use crashqc_core::kwfilter::{filter_pairs, IndicatorRuleSet};
use crashqc_core::logreg::{tune, HyperParams, LogRegModel, TuningGrid};
use crashqc_core::pipeline::{
    evaluate_backend, generate_synthetic_corpus, run_batch, train_logreg, BatchInput,
    PipelineConfig, SynthSpec, TrainOptions,
};
use crashqc_core::stfilter::{pair_candidates, write_pairs_csv, Threshold, ThresholdConfig};
use crashqc_core::store::Store;
use crashqc_core::textfeat::{Vectorizer, Vocabulary};

/// Crash-narrative quality control: pair, filter, classify and review
/// candidate secondary crashes.
#[derive(Parser, Debug)]
#[command(name = "crashqc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a corpus file and report rejects and label prevalence
    Ingest {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Write accepted records here (.csv or .jsonl)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a seeded synthetic corpus with labels
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.228)]
        positive_fraction: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2015)]
        first_year: i32,
        #[arg(long, default_value_t = 2022)]
        last_year: i32,
        /// Output file (.csv or .jsonl)
        #[arg(long)]
        out: PathBuf,
    },
    /// Find candidate primary/secondary pairs within distance and time limits
    Pair {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        /// Pairs CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pair, then keep pairs whose secondary narrative mentions a crash
    Filter {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the TF-IDF logistic regression on records up to a cutoff year
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 2021)]
        cutoff_year: i32,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        vocab_out: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_df: usize,
        #[arg(long)]
        bigrams: bool,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        positive_weight: f64,
        /// Pick learning rate and L2 by 5-fold cross-validated F1 first
        #[arg(long)]
        tune: bool,
    },
    /// Print the strongest positive and negative terms of a trained model
    TopFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(short, default_value_t = 20)]
        k: usize,
    },
    /// Classify one record or text with every configured backend
    Classify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "text", required_unless_present = "text")]
        record_id: Option<String>,
        #[arg(long)]
        text: Option<String>,
    },
    /// Score every configured backend on the test years and record the results
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2021)]
        cutoff_year: i32,
        /// Results as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics from the transcribed confusion matrices and compare
    ValidateGolden {
        /// Fixture file; the shipped one by default
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Process unprocessed records through filters, backends and the ensemble
    Batch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Only records at or after this time
        #[arg(long)]
        since: Option<String>,
        #[arg(long)]
        reprocess: bool,
        /// Print the summary as JSON
        #[arg(long)]
        json: bool,
    },
    /// Run the review REST service
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Write the corpus with current labels, or the review queue
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportKind::Corpus)]
        what: ExportKind,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportKind {
    /// Records with active labels (.csv or .jsonl)
    Corpus,
    /// Every review item as JSON lines
    Queue,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Corpus file (.csv or .jsonl)
    #[arg(long)]
    input: PathBuf,
    /// Column mapping TOML
    #[arg(long)]
    mapping: Option<PathBuf>,
}

impl CorpusArgs {
    fn load(&self) -> Result<Ingested> {
        let mapping = match &self.mapping {
            Some(p) => {
                ColumnMapping::load(p).with_context(|| format!("mapping {}", p.display()))?
            }
            None => ColumnMapping::default(),
        };
        let ingested = ingest_path(&self.input, &mapping)
            .with_context(|| format!("ingest {}", self.input.display()))?;
        if !ingested.report.rejected.is_empty() {
            log::warn!(
                "{} rows rejected; run `crashqc ingest` for details",
                ingested.report.rejected.len()
            );
        }
        Ok(ingested)
    }
}

#[derive(Args, Debug)]
struct ThresholdArgs {
    #[arg(long, default_value_t = 2.0)]
    access_max_mi: f64,
    #[arg(long, default_value_t = 100.0)]
    access_max_min: f64,
    #[arg(long, default_value_t = 0.5)]
    other_max_mi: f64,
    #[arg(long, default_value_t = 40.0)]
    other_max_min: f64,
    /// Drop pairs travelling in opposite directions
    #[arg(long)]
    same_direction_only: bool,
}

impl ThresholdArgs {
    fn config(&self) -> Result<ThresholdConfig> {
        let cfg = ThresholdConfig {
            access_controlled: Threshold {
                max_distance_mi: self.access_max_mi,
                max_gap_min: self.access_max_min,
            },
            other_roads: Threshold {
                max_distance_mi: self.other_max_mi,
                max_gap_min: self.other_max_min,
            },
            include_opposite_direction: !self.same_direction_only,
        };
        cfg.validate().map_err(anyhow::Error::msg)?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("create {}", path.display()))?,
    ))
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "json" | "ndjson")
    )
}

fn write_corpus(
    path: &Path,
    records: &[CrashRecord],
    labels: &HashMap<String, bool>,
) -> Result<()> {
    let mut w = create(path)?;
    if is_jsonl(path) {
        export_jsonl(records, labels, &mut w)?;
    } else {
        export_csv(records, labels, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Imported labels overlaid with the store's active labels.
fn current_labels(ingested: &Ingested, store: &Store) -> HashMap<String, bool> {
    let mut labels = ingested.label_map();
    labels.extend(store.read().active_labels());
    labels
}

fn open_store(config: &PipelineConfig, ingested: &Ingested) -> Result<Store> {
    let store = Store::open(&config.store.dir)
        .with_context(|| format!("store {}", config.store.dir.display()))?;
    store.attach_corpus(ingested.records.iter().map(|r| r.record_id.clone()));
    Ok(store)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { corpus, out } => {
            let ingested = corpus.load()?;
            print!("{}", ingested.report);
            if let Some(out) = out {
                write_corpus(&out, &ingested.records, &ingested.label_map())?;
                println!(
                    "wrote {} records to {}",
                    ingested.records.len(),
                    out.display()
                );
            }
            if !ingested.report.rejected.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Synth {
            n,
            positive_fraction,
            seed,
            first_year,
            last_year,
            out,
        } => {
            let spec = SynthSpec {
                n,
                positive_fraction,
                seed,
                first_year,
                last_year,
            };
            let corpus = generate_synthetic_corpus(&spec)?;
            let labels = corpus
                .labels
                .iter()
                .map(|l| (l.record_id.clone(), l.is_secondary))
                .collect();
            write_corpus(&out, &corpus.records, &labels)?;
            println!(
                "wrote {} records ({} positive) to {}",
                corpus.records.len(),
                spec.positives(),
                out.display()
            );
        }
        Command::Pair {
            corpus,
            thresholds,
            out,
        } => {
            let ingested = corpus.load()?;
            let (pairs, report) = pair_candidates(&ingested.records, &thresholds.config()?);
            match out {
                Some(path) => write_pairs_csv(&pairs, create(&path)?)?,
                None => write_pairs_csv(&pairs, std::io::stdout().lock())?,
            }
            eprintln!(
                "records {}, unfilterable {}, incomparable {}, pairs {}",
                report.records, report.unfilterable, report.incomparable, report.pairs
            );
        }
        Command::Filter {
            corpus,
            thresholds,
            out,
        } => {
            let ingested = corpus.load()?;
            let (pairs, _) = pair_candidates(&ingested.records, &thresholds.config()?);
            let by_id = ingested
                .records
                .iter()
                .map(|r| (r.record_id.as_str(), r))
                .collect();
            let (kept, report) = filter_pairs(&pairs, &by_id, &IndicatorRuleSet::default())?;
            match out {
                Some(path) => write_pairs_csv(&kept, create(&path)?)?,
                None => write_pairs_csv(&kept, std::io::stdout().lock())?,
            }
            eprintln!(
                "pairs in {}, kept {}, removed {} ({:.1}%)",
                report.input,
                report.kept,
                report.removed,
                report.removal_fraction().unwrap_or(0.0) * 100.0
            );
        }
        Command::Train {
            corpus,
            cutoff_year,
            model_out,
            vocab_out,
            min_df,
            bigrams,
            learning_rate,
            l2,
            epochs,
            positive_weight,
            tune: do_tune,
        } => {
            let ingested = corpus.load()?;
            let labels = ingested.label_map();
            let split = split_by_year(&ingested.records, cutoff_year);
            let mut hyperparams = HyperParams {
                learning_rate,
                l2_lambda: l2,
                epochs,
                positive_weight,
                ..Default::default()
            };
            if do_tune {
                let rows: Vec<&CrashRecord> = ingested
                    .records
                    .iter()
                    .filter(|r| {
                        split.train.contains(&r.record_id) && labels.contains_key(&r.record_id)
                    })
                    .collect();
                let texts: Vec<&str> = rows.iter().map(|r| r.narrative.as_str()).collect();
                let v = Vectorizer::fit(&texts, min_df, bigrams)?;
                let xs: Vec<_> = texts.iter().map(|t| v.transform(t)).collect();
                let ys: Vec<bool> = rows.iter().map(|r| labels[&r.record_id]).collect();
                let result = tune(
                    &xs,
                    &ys,
                    v.vocab.len(),
                    &hyperparams,
                    &TuningGrid::default(),
                )?;
                for (lr, lambda, f1) in &result.scores {
                    println!("lr {lr:<5} l2 {lambda:<7} cv F1 {f1:.4}");
                }
                hyperparams = result.best;
                println!(
                    "chose lr {} l2 {}",
                    hyperparams.learning_rate, hyperparams.l2_lambda
                );
            }
            let opts = TrainOptions {
                min_df,
                bigrams,
                hyperparams,
            };
            let trained = train_logreg(&ingested.records, &labels, &split.train, &opts)?;
            trained.model.save(&model_out)?;
            trained.vectorizer.vocab.save(&vocab_out)?;
            println!(
                "trained on {} records ({} terms) in {:.2} s; final loss {:.5}",
                split.train.len(),
                trained.vectorizer.vocab.len(),
                trained.train_s,
                trained.log.loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TopFeatures { model, vocab, k } => {
            let model = LogRegModel::load(&model)?;
            let vocab = Vocabulary::load(&vocab)?;
            model.check_vocabulary(&vocab)?;
            let (pos, neg) = model.top_features(&vocab, k);
            println!("toward YES");
            for (t, w) in pos {
                println!("  {w:+.4}  {t}");
            }
            println!("toward NO");
            for (t, w) in neg {
                println!("  {w:+.4}  {t}");
            }
        }
        Command::Classify {
            config,
            record_id,
            text,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let record = match (record_id, text) {
                (Some(id), _) => cfg
                    .load_corpus()?
                    .records
                    .into_iter()
                    .find(|r| r.record_id == id)
                    .with_context(|| format!("no record {id} in the corpus"))?,
                (None, Some(text)) => CrashRecord {
                    record_id: "adhoc".into(),
                    occurred_at: chrono::Utc::now().naive_utc(),
                    route_id: String::new(),
                    milepoint: None,
                    latitude: None,
                    longitude: None,
                    roadway_class: RoadwayClass::Other,
                    direction: Direction::Unknown,
                    coded_secondary: false,
                    narrative: text,
                },
                (None, None) => bail!("give --record-id or --text"),
            };
            let roster = cfg.build_roster()?;
            let mut out = std::io::stdout().lock();
            for b in &roster {
                let line = match b.classify(&record) {
                    Ok(v) => serde_json::to_string(&v)?,
                    Err(e) => serde_json::to_string(&e)?,
                };
                writeln!(out, "{line}")?;
            }
        }
        Command::Evaluate {
            config,
            cutoff_year,
            out,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let ingested = cfg.load_corpus()?;
            let store = open_store(&cfg, &ingested)?;
            let labels = current_labels(&ingested, &store);
            let split = split_by_year(&ingested.records, cutoff_year);
            let test: BTreeSet<String> = split
                .test
                .into_iter()
                .filter(|id| labels.contains_key(id))
                .collect();
            if test.is_empty() {
                bail!("no labeled records after {cutoff_year}");
            }
            let roster = cfg.build_roster()?;
            let mut results = Vec::new();
            for b in &roster {
                let e = evaluate_backend(b.as_ref(), &ingested.records, &labels, &test, None);
                if !e.errors.is_empty() {
                    log::warn!(
                        "{}: {} records failed and are excluded",
                        b.backend_id(),
                        e.errors.len()
                    );
                }
                results.push(e.result);
            }
            let (table, csv) = comparison_report(&results);
            println!("{table}");
            print!("{csv}");
            store.record_evaluation(results.clone())?;
            if let Some(out) = out {
                let mut w = create(&out)?;
                serde_json::to_writer_pretty(&mut w, &results)?;
                w.flush()?;
            }
        }
        Command::ValidateGolden { fixtures } => {
            let file = match fixtures {
                Some(p) => GoldenFile::load(&p)?,
                None => GoldenFile::shipped(),
            };
            let report = validate_golden(&file);
            let (table, _) = comparison_report(&file.unique_results());
            println!("{table}");
            for m in &report.mismatches {
                println!(
                    "MISMATCH {} {}: printed {}, computed {}",
                    m.backend_id, m.field, m.expected, m.computed
                );
            }
            println!(
                "checked {} matrices, {} mismatches",
                report.checked,
                report.mismatches.len()
            );
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Batch {
            config,
            batch_size,
            since,
            reprocess,
            json,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if batch_size.is_some() {
                cfg.batch.batch_size = batch_size;
            }
            if let Some(s) = since {
                cfg.batch.since = Some(parse_timestamp(&s).map_err(anyhow::Error::msg)?);
            }
            cfg.batch.reprocess |= reprocess;
            let ingested = cfg.load_corpus()?;
            let store = open_store(&cfg, &ingested)?;
            let rules = cfg.indicator_rules()?;
            let roster: Vec<Box<dyn Classifier>> = cfg.build_roster()?;
            let input = BatchInput {
                records: &ingested.records,
                thresholds: &cfg.thresholds,
                rules: &rules,
                roster: &roster,
                policy: &cfg.ensemble,
                settings: &cfg.batch,
            };
            let summary = run_batch(&input, &store)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                println!("{summary}");
            }
        }
        Command::Serve { config, bind } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(b) = bind {
                cfg.service.bind = b;
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crashqc_server::serve(&cfg))?;
        }
        Command::Export { config, what, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let ingested = cfg.load_corpus()?;
            let store = open_store(&cfg, &ingested)?;
            match what {
                ExportKind::Corpus => {
                    let labels = current_labels(&ingested, &store);
                    write_corpus(&out, &ingested.records, &labels)?;
                    println!(
                        "wrote {} records ({} labeled) to {}",
                        ingested.records.len(),
                        labels.len(),
                        out.display()
                    );
                }
                ExportKind::Queue => {
                    let mut w = create(&out)?;
                    let state = store.read();
                    for item in state.all_items() {
                        serde_json::to_writer(&mut w, item)?;
                        w.write_all(b"\n")?;
                    }
                    w.flush()?;
                    println!(
                        "wrote {} review items to {}",
                        state.all_items().len(),
                        out.display()
                    );
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
