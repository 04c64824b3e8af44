//! Stage implementations shared by the subcommands and `pipeline`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ragdistill::analysis::{compare, render_comparison, render_summary, summarize, ExternalChoices, Top1Similarity, TopLogit};
use ragdistill::distill::{train_sequential, write_loss_history};
use ragdistill::fusion::{predict_all, read_predictions, write_predictions, FusedPrediction, Heads, InferenceMode, Reranker};
use ragdistill::index::{dual_retrieve, read_corpus, read_heads, read_index, top_k, write_corpus, write_heads, write_index};
use ragdistill::reader::{cache_store, CachedReader, MemoReader, RemoteReader, SimulatedReader};
use ragdistill::synth::{generate, inject_inconsistency, simulated_choices, write_tags};
use ragdistill::types::{read_queries, write_queries};
use ragdistill::{HeadTag, Index, ProjectionHead, Query, Reader, ReaderSpec, StorageDtype};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{Run, StageOutcome};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const INDEX_FILE: &str = "index.bin";
pub const TRAIN_QUERIES_FILE: &str = "queries-train.jsonl";
pub const EVAL_QUERIES_FILE: &str = "queries-eval.jsonl";
pub const TAGS_FILE: &str = "tags.jsonl";
pub const HEADS_FILE: &str = "heads.bin";
pub const LOSS_FILE: &str = "loss-history.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const CHOICES_FILE: &str = "choices.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_TXT: &str = "comparison.txt";
pub const CANDIDATES_FORMAT: &str = "ragdistill-candidates";
pub const DEFAULT_CACHE_FILE: &str = "reader-cache.jsonl";

/// `predictions-<prefix><mode>.jsonl`
pub fn predictions_file(prefix: &str, mode: InferenceMode) -> String {
    format!("predictions-{prefix}{mode}.jsonl")
}

fn create(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|_| CliError::missing(path))
}

pub fn load_index(path: &Path) -> CliResult<Index> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    read_index(path).map_err(|e| CliError::invalid(path, e))
}

pub fn load_queries(path: &Path) -> CliResult<Vec<Query>> {
    read_queries(open(path)?).map_err(|e| CliError::invalid(path, e))
}

/// Trained heads from `path`, or identity heads when `path` is `None`.
pub fn load_heads(path: Option<&Path>, dim: usize) -> CliResult<(ProjectionHead, ProjectionHead)> {
    let mut text = ProjectionHead::identity(HeadTag::Text, dim);
    let mut image = ProjectionHead::identity(HeadTag::Image, dim);
    if let Some(p) = path {
        if !p.exists() {
            return Err(CliError::missing(p));
        }
        for h in read_heads(p).map_err(|e| CliError::invalid(p, e))? {
            if h.dim != dim {
                return Err(CliError::config(format!("{}: head dim {} but index dim {dim}", p.display(), h.dim)));
            }
            match h.head {
                HeadTag::Text => text = h,
                HeadTag::Image => image = h,
            }
        }
    }
    Ok((text, image))
}

pub fn load_predictions(path: &Path) -> CliResult<Vec<FusedPrediction>> {
    read_predictions(open(path)?).map_err(|e| CliError::invalid(path, e))
}

/// A reader plus, for remote readers, the table its answers are recorded in.
pub enum ReaderHandle {
    Plain(Box<dyn Reader>),
    Recording { memo: MemoReader<RemoteReader>, cache: PathBuf },
}

impl ReaderHandle {
    pub fn get(&self) -> &dyn Reader {
        match self {
            ReaderHandle::Plain(r) => r.as_ref(),
            ReaderHandle::Recording { memo, .. } => memo,
        }
    }

    /// Persist recorded scores.
    pub fn finish(self) -> CliResult<()> {
        if let ReaderHandle::Recording { memo, cache } = self {
            cache_store(&memo.into_table(), &cache)?;
        }
        Ok(())
    }
}

/// Build the configured reader. An unreachable remote reader falls back to
/// the score cache; without one the cache path is reported missing.
pub fn build_reader(config: &RunConfig, run_dir: &Path, queries: &[Query]) -> CliResult<ReaderHandle> {
    let vocab = queries
        .first()
        .map(|q| q.class_vocab.clone())
        .ok_or_else(|| CliError::config("no queries to score"))?;
    let cache_path = config.paths.cache.clone().unwrap_or_else(|| run_dir.join(DEFAULT_CACHE_FILE));
    match &config.reader {
        ReaderSpec::Simulated(p) => Ok(ReaderHandle::Plain(Box::new(SimulatedReader::new(p.clone())?))),
        ReaderSpec::Cached { path } => {
            if !path.exists() {
                return Err(CliError::missing(path));
            }
            Ok(ReaderHandle::Plain(Box::new(CachedReader::load(path, &vocab)?)))
        }
        ReaderSpec::Remote(r) => {
            let remote = RemoteReader::from_env_or(r.clone())?;
            match remote.health() {
                Ok(()) => Ok(ReaderHandle::Recording { memo: MemoReader::new(remote, vocab), cache: cache_path }),
                Err(e) => {
                    if !cache_path.exists() {
                        return Err(CliError::missing(&cache_path)
                            .context(format!("reader unreachable ({e}) and no score cache")));
                    }
                    eprintln!("reader unreachable ({e}); using score cache {}", cache_path.display());
                    Ok(ReaderHandle::Plain(Box::new(CachedReader::load(&cache_path, &vocab)?)))
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub index: PathBuf,
    pub train_queries: PathBuf,
    pub eval_queries: PathBuf,
}

pub fn synth_stage(run: &mut Run, config: &RunConfig) -> CliResult<(StageOutcome, SynthOutputs)> {
    let out = SynthOutputs {
        index: run.path(INDEX_FILE),
        train_queries: run.path(TRAIN_QUERIES_FILE),
        eval_queries: run.path(EVAL_QUERIES_FILE),
    };
    let corpus_path = run.path(CORPUS_FILE);
    let tags_path = run.path(TAGS_FILE);
    let outputs = [corpus_path.clone(), out.index.clone(), out.train_queries.clone(), out.eval_queries.clone(), tags_path.clone()];
    let params = (&config.synth, config.inject_rate, config.inference.k);
    let o = out.clone();
    let outcome = run.stage("synth", &params, &[], &outputs, || {
        let corpus = generate(&config.synth)?;
        let mut tags = corpus.tags.clone();
        let index = match config.inject_rate {
            Some(rate) => {
                let inj = inject_inconsistency(&corpus, &corpus.index, &corpus.eval_queries, rate, config.inference.k)?;
                eprintln!(
                    "injected {} records; label-mixed proportion {:.3}",
                    inj.injected.len(),
                    inj.mixed_proportion
                );
                tags.extend(inj.tags);
                inj.index
            }
            None => corpus.index.clone(),
        };
        create(&corpus_path, |w| write_corpus(index.records(), w))?;
        write_index(&index, &o.index)?;
        create(&o.train_queries, |w| write_queries(&corpus.train_queries, w))?;
        create(&o.eval_queries, |w| write_queries(&corpus.eval_queries, w))?;
        create(&tags_path, |w| write_tags(&tags, w))?;
        Ok(())
    })?;
    Ok((outcome, out))
}

pub fn index_build(run: &mut Run, corpus: &Path, dtype: StorageDtype, normalize: bool) -> CliResult<PathBuf> {
    let out = run.path(INDEX_FILE);
    if !corpus.exists() {
        return Err(CliError::missing(corpus));
    }
    run.stage("index-build", &(dtype, normalize), &[corpus.to_path_buf()], std::slice::from_ref(&out), || {
        let index = read_corpus(corpus, dtype, normalize).map_err(|e| CliError::invalid(corpus, e))?;
        write_index(&index, &out)?;
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct IndexStats {
    pub dim: usize,
    pub dtype: StorageDtype,
    pub records: usize,
    pub max_record_id: Option<u64>,
    pub labels: BTreeMap<String, usize>,
    pub sources: BTreeMap<String, usize>,
}

pub fn index_inspect(path: &Path) -> CliResult<IndexStats> {
    let index = load_index(path)?;
    let mut labels = BTreeMap::new();
    let mut sources = BTreeMap::new();
    for r in index.records() {
        *labels.entry(r.label().unwrap_or("<none>").to_string()).or_insert(0) += 1;
        *sources.entry(r.source_tag.clone()).or_insert(0) += 1;
    }
    Ok(IndexStats {
        dim: index.dim(),
        dtype: index.dtype(),
        records: index.len(),
        max_record_id: index.max_record_id(),
        labels,
        sources,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    Text,
    Image,
    Dual,
}

pub fn retrieve_stage(
    run: &mut Run,
    config: &RunConfig,
    index_path: &Path,
    queries_path: &Path,
    heads_path: Option<&Path>,
    head: HeadChoice,
) -> CliResult<PathBuf> {
    let out = run.path(CANDIDATES_FILE);
    let mut inputs = vec![index_path.to_path_buf(), queries_path.to_path_buf()];
    inputs.extend(heads_path.map(Path::to_path_buf));
    let params = (head, config.inference.k, config.inference.merge);
    run.stage("retrieve", &params, &inputs, std::slice::from_ref(&out), || {
        let index = load_index(index_path)?;
        let queries = load_queries(queries_path)?;
        let (text, image) = load_heads(heads_path, index.dim())?;
        let k = config.inference.k.min(index.len());
        create(&out, |w| {
            writeln!(w, "{}", serde_json::json!({ "format": CANDIDATES_FORMAT, "version": 1 }))?;
            for q in &queries {
                let set = match head {
                    HeadChoice::Text => top_k(&q.query_id, &q.image_emb, &index, HeadTag::Text, &text, k),
                    HeadChoice::Image => top_k(&q.query_id, &q.image_emb, &index, HeadTag::Image, &image, k),
                    HeadChoice::Dual => dual_retrieve(&q.query_id, &q.image_emb, &index, &text, &image, k, config.inference.merge)
                        .map(|mut s| {
                            s.truncate(k);
                            s
                        }),
                }
                .map_err(|e| std::io::Error::other(e.to_string()))?;
                writeln!(w, "{}", serde_json::to_string(&set).expect("candidates serialize"))?;
            }
            Ok(())
        })
    })?;
    Ok(out)
}

pub fn train_stage(run: &mut Run, config: &RunConfig, index_path: &Path, queries_path: &Path) -> CliResult<PathBuf> {
    let heads = run.path(HEADS_FILE);
    let loss = run.path(LOSS_FILE);
    let inputs = [index_path.to_path_buf(), queries_path.to_path_buf()];
    let mut trainer = config.trainer.clone();
    // Worker count never changes results; keep it out of the fingerprint.
    trainer.workers = 1;
    let params = (&trainer, &config.reader);
    let run_dir = run.dir().to_path_buf();
    run.stage("train", &params, &inputs, &[heads.clone(), loss.clone()], || {
        let index = load_index(index_path)?;
        let queries = load_queries(queries_path)?;
        let reader = build_reader(config, &run_dir, &queries)?;
        let trained = train_sequential(&index, &queries, reader.get(), &config.trainer)?;
        reader.finish()?;
        write_heads(&[trained.text, trained.image], &heads)?;
        create(&loss, |w| write_loss_history(&trained.history, w))?;
        Ok(())
    })?;
    Ok(heads)
}

/// Write one prediction dump per mode. `prefix` distinguishes runs with
/// different heads (e.g. `untrained-`).
pub fn infer_stage(
    run: &mut Run,
    config: &RunConfig,
    index_path: &Path,
    queries_path: &Path,
    heads_path: Option<&Path>,
    modes: &[InferenceMode],
    prefix: &str,
) -> CliResult<Vec<(InferenceMode, PathBuf)>> {
    let outputs: Vec<(InferenceMode, PathBuf)> =
        modes.iter().map(|&m| (m, run.path(&predictions_file(prefix, m)))).collect();
    let mut inputs = vec![index_path.to_path_buf(), queries_path.to_path_buf()];
    inputs.extend(heads_path.map(Path::to_path_buf));
    let params = (modes, config.inference(), &config.reader);
    let paths: Vec<PathBuf> = outputs.iter().map(|o| o.1.clone()).collect();
    let run_dir = run.dir().to_path_buf();
    let stage = format!("infer-{prefix}{}", if heads_path.is_some() { "trained" } else { "identity" });
    run.stage(&stage, &params, &inputs, &paths, || {
        let index = load_index(index_path)?;
        let queries = load_queries(queries_path)?;
        let (text, image) = load_heads(heads_path, index.dim())?;
        let heads = Heads { text: &text, image: &image };
        let reader = build_reader(config, &run_dir, &queries)?;
        let ic = config.inference();
        for (mode, path) in &outputs {
            let preds = predict_all(&queries, &index, heads, reader.get(), &ic, *mode, None, config.workers())?;
            create(path, |w| write_predictions(&preds, w))?;
        }
        reader.finish()?;
        Ok(())
    })?;
    Ok(outputs)
}

/// Where the simulated external chooser gets its inputs.
pub struct ChooserInputs<'a> {
    pub index: &'a Path,
    pub queries: &'a Path,
    pub skill: f64,
}

pub fn analyze_stage(
    run: &mut Run,
    config: &RunConfig,
    fused: &Path,
    extras: &[(String, PathBuf)],
    choices: Option<&Path>,
    chooser: Option<ChooserInputs<'_>>,
) -> CliResult<PathBuf> {
    let json = run.path(SUMMARY_JSON);
    let txt = run.path(SUMMARY_TXT);
    let choices_out = run.path(CHOICES_FILE);
    let mut inputs = vec![fused.to_path_buf()];
    inputs.extend(extras.iter().map(|e| e.1.clone()));
    inputs.extend(choices.map(Path::to_path_buf));
    let mut outputs = vec![json.clone(), txt.clone()];
    if let Some(c) = &chooser {
        inputs.push(c.index.to_path_buf());
        inputs.push(c.queries.to_path_buf());
        outputs.push(choices_out.clone());
    }
    let names: Vec<&String> = extras.iter().map(|e| &e.0).collect();
    let params = (&config.analysis, names, config.seed, chooser.as_ref().map(|c| c.skill));
    run.stage("analyze", &params, &inputs, &outputs, || {
        let preds = load_predictions(fused)?;
        let mut rerankers: Vec<Box<dyn Reranker>> = Vec::new();
        if config.analysis.top1_similarity {
            rerankers.push(Box::new(Top1Similarity));
        }
        if config.analysis.top_logit {
            rerankers.push(Box::new(TopLogit));
        }
        if let Some(p) = choices {
            rerankers.push(Box::new(ExternalChoices::read(open(p)?).map_err(|e| CliError::invalid(p, e))?));
        }
        if let Some(c) = &chooser {
            let index = load_index(c.index)?;
            let queries = load_queries(c.queries)?;
            let sim = simulated_choices(&preds, &index, &queries, c.skill, config.seed);
            create(&choices_out, |w| sim.write(w))?;
            rerankers.push(Box::new(sim));
        }
        let mut extra = Vec::new();
        for (name, path) in extras {
            extra.push((name.clone(), load_predictions(path)?));
        }
        let refs: Vec<&dyn Reranker> = rerankers.iter().map(|r| r.as_ref()).collect();
        let summary = summarize(&preds, &refs, &extra)?;
        create(&json, |w| writeln!(w, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes")))?;
        std::fs::write(&txt, render_summary(&summary))?;
        Ok(())
    })?;
    Ok(json)
}

pub fn compare_stage(run: &mut Run, before: &Path, after: &Path) -> CliResult<PathBuf> {
    let json = run.path(COMPARISON_JSON);
    let txt = run.path(COMPARISON_TXT);
    let inputs = [before.to_path_buf(), after.to_path_buf()];
    run.stage("compare", &(), &inputs, &[json.clone(), txt.clone()], || {
        let c = compare(&load_predictions(before)?, &load_predictions(after)?)?;
        create(&json, |w| writeln!(w, "{}", serde_json::to_string_pretty(&c).expect("comparison serializes")))?;
        std::fs::write(&txt, render_comparison(&c))?;
        Ok(())
    })?;
    Ok(json)
}

/// synth → train → infer → analyze, all under the run directory.
pub fn pipeline(run: &mut Run, config: &RunConfig) -> CliResult<PathBuf> {
    let (_, synth) = synth_stage(run, config)?;
    let heads = train_stage(run, config, &synth.index, &synth.train_queries)?;
    let mut modes = config.inference.modes.clone();
    if !modes.contains(&InferenceMode::Fused) {
        modes.insert(0, InferenceMode::Fused);
    }
    let trained = infer_stage(run, config, &synth.index, &synth.eval_queries, Some(&heads), &modes, "")?;
    let fused = trained.iter().find(|(m, _)| *m == InferenceMode::Fused).expect("fused present").1.clone();
    let mut extras: Vec<(String, PathBuf)> = trained
        .iter()
        .filter(|(m, _)| *m != InferenceMode::Fused)
        .map(|(m, p)| (format!("mode:{m}"), p.clone()))
        .collect();
    if config.analysis.compare_untrained {
        let untrained = infer_stage(run, config, &synth.index, &synth.eval_queries, None, &[InferenceMode::Fused], "untrained-")?;
        let before = untrained[0].1.clone();
        extras.push(("untrained:fused".into(), before.clone()));
        compare_stage(run, &before, &fused)?;
    }
    let chooser = config.analysis.simulated_chooser.map(|skill| ChooserInputs {
        index: &synth.index,
        queries: &synth.eval_queries,
        skill,
    });
    analyze_stage(run, config, &fused, &extras, None, chooser)
}
