//! Configuration-driven commands behind the CLI.
//!
//! Every command works on one artifact directory, `$COLDGRAPH_OUT/<paths.output>`
//! (or `./<paths.output>` when the variable is unset), so the stages can run
//! as separate processes:
//!
//! | file | written by |
//! |---|---|
//! | `users.tsv`, `items.tsv`, `interactions.tsv` | build |
//! | `split.txt`, `graphs.bin`, `kg_entities.tsv`, `kg_triples.tsv` | build, inject-noise |
//! | `text.feat`, `image.feat`, `stats.txt` | build |
//! | `checkpoint.ckpt`, `train.log` | train |
//! | `metrics.txt`, `metrics.tsv` | eval |
//! | `embeddings.tsv` | export-embeddings |

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Axis;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{
    build_normal_cold_splits, build_strict_cold_splits, construct_kg_from_metadata, generate_synthetic,
    inject_kg_noise, k_core_filter, load_features, load_interactions, load_kg, load_metadata, read_split_manifest,
    write_features, write_interactions, write_kg, write_split_manifest, FeatureMatrix, InteractionDataset,
    InteractionFormat, KgBuildOptions, KnowledgeGraph, Modality, NoiseReport, SplitSpec, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{format_reports, harmonic_mean, write_reports_tsv, MetricsReport, RankingTask, Setting};
use crate::graphs::FrozenGraphBundle;
use crate::model::{self, GraphContext, Phase};
use crate::trainer::{model_dims, EpochRecord, Trainer};

pub const OUTPUT_ROOT_ENV: &str = "COLDGRAPH_OUT";

pub const USERS_FILE: &str = "users.tsv";
pub const ITEMS_FILE: &str = "items.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const SPLIT_FILE: &str = "split.txt";
pub const GRAPHS_FILE: &str = "graphs.bin";
pub const KG_ENTITIES_FILE: &str = "kg_entities.tsv";
pub const KG_TRIPLES_FILE: &str = "kg_triples.tsv";
pub const STATS_FILE: &str = "stats.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const METRICS_FILE: &str = "metrics.txt";
pub const METRICS_TSV_FILE: &str = "metrics.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

pub fn feature_file(m: Modality) -> String {
    format!("{}.feat", m.as_str())
}

/// Resolves the artifact directory of a configuration.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
    root.join(&cfg.paths.output)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut text = String::new();
    for n in vocab.names() {
        text.push_str(n);
        text.push('\n');
    }
    write_text(path, &text)
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    Ok(Vocab::from_names(read_text(path)?.lines().map(str::to_owned)))
}

/// Dataset statistics printed by `build`, one `key<TAB>value` line each.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub warm_items: usize,
    pub cold_items: usize,
    pub interactions: usize,
    /// Percentage of empty user-item cells.
    pub sparsity: f64,
    pub entities: usize,
    pub relations: usize,
    pub triplets: usize,
}

impl DatasetStats {
    pub fn new(ds: &InteractionDataset, split: &SplitSpec, kg: &KnowledgeGraph) -> Self {
        Self {
            users: ds.user_count(),
            items: ds.item_count(),
            warm_items: split.warm_items.len(),
            cold_items: split.cold_items.len(),
            interactions: ds.len(),
            sparsity: 100.0 * ds.sparsity(),
            entities: kg.entity_count(),
            relations: kg.relation_count(),
            triplets: kg.triples.len(),
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users\t{}", self.users)?;
        writeln!(f, "items\t{}", self.items)?;
        writeln!(f, "warm_items\t{}", self.warm_items)?;
        writeln!(f, "cold_items\t{}", self.cold_items)?;
        writeln!(f, "interactions\t{}", self.interactions)?;
        writeln!(f, "sparsity\t{:.3}%", self.sparsity)?;
        writeln!(f, "entities\t{}", self.entities)?;
        writeln!(f, "relations\t{}", self.relations)?;
        writeln!(f, "triplets\t{}", self.triplets)
    }
}

impl FromStr for DatasetStats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Argument(format!("bad statistics line `{line}`")))?;
            fields.insert(k.trim(), v.trim().trim_end_matches('%'));
        }
        let count = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .ok_or_else(|| Error::Argument(format!("statistics lack `{k}`")))?
                .parse()
                .map_err(|_| Error::Argument(format!("statistic `{k}` is not a count")))
        };
        let sparsity = fields
            .get("sparsity")
            .ok_or_else(|| Error::Argument("statistics lack `sparsity`".into()))?
            .parse()
            .map_err(|_| Error::Argument("statistic `sparsity` is not a number".into()))?;
        Ok(Self {
            users: count("users")?,
            items: count("items")?,
            warm_items: count("warm_items")?,
            cold_items: count("cold_items")?,
            interactions: count("interactions")?,
            sparsity,
            entities: count("entities")?,
            relations: count("relations")?,
            triplets: count("triplets")?,
        })
    }
}

struct Source {
    dataset: InteractionDataset,
    kg: KnowledgeGraph,
    features: Vec<FeatureMatrix>,
}

fn feature_paths(cfg: &ExperimentConfig) -> Vec<(Modality, &Path)> {
    [
        (Modality::Text, cfg.paths.text_features.as_deref()),
        (Modality::Image, cfg.paths.image_features.as_deref()),
    ]
    .into_iter()
    .filter_map(|(m, p)| p.map(|p| (m, p)))
    .collect()
}

fn load_source(cfg: &ExperimentConfig) -> Result<Source> {
    let Some(path) = &cfg.paths.interactions else {
        log::info!("no interaction file configured; generating the synthetic dataset");
        let data = generate_synthetic(&cfg.synthetic.spec())?;
        return Ok(Source {
            dataset: data.dataset,
            kg: data.kg,
            features: vec![data.text, data.image],
        });
    };
    let raw = load_interactions(path, cfg.paths.format()?)?;
    let dataset = k_core_filter(&raw, cfg.split.k_core)?;
    log::info!(
        "{}-core filter kept {} of {} users and {} of {} items",
        cfg.split.k_core,
        dataset.user_count(),
        raw.user_count(),
        dataset.item_count(),
        raw.item_count()
    );

    // Feature rows follow the item order of the raw interaction file.
    let rows: Vec<usize> = dataset.items.names().iter().map(|n| raw.items.get(n).unwrap()).collect();
    let mut features = Vec::new();
    for (m, p) in feature_paths(cfg) {
        let full = load_features(p, m, raw.item_count())?;
        features.push(FeatureMatrix::new(m, full.values.select(Axis(0), &rows))?);
    }

    let kg = match (&cfg.paths.kg_entities, &cfg.paths.kg_triples, &cfg.paths.metadata) {
        (Some(e), Some(t), _) => load_kg(e, t, &dataset.items)?,
        (None, None, Some(meta)) => {
            let opts = KgBuildOptions {
                word_freq_bounds: (cfg.split.word_freq_lo, cfg.split.word_freq_hi),
                tfidf_threshold: cfg.split.tfidf_threshold,
            };
            construct_kg_from_metadata(&dataset.items, &load_metadata(meta)?, &opts)?
        }
        (None, None, None) => {
            log::warn!("no metadata or knowledge graph configured; items carry no knowledge triples");
            KnowledgeGraph::with_items(&dataset.items)
        }
        _ => return Err(Error::Config("kg_entities and kg_triples must be given together".into())),
    };
    Ok(Source { dataset, kg, features })
}

fn write_graph_artifacts(dir: &Path, kg: &KnowledgeGraph, bundle: &FrozenGraphBundle) -> Result<()> {
    write_kg(kg, &dir.join(KG_ENTITIES_FILE), &dir.join(KG_TRIPLES_FILE))?;
    bundle.write(&dir.join(GRAPHS_FILE))
}

#[derive(Clone, Debug)]
pub struct BuildOutput {
    pub dir: PathBuf,
    pub stats: DatasetStats,
    pub noise: Option<NoiseReport>,
}

/// Builds the split, the knowledge graph and the frozen graphs.
pub fn cmd_build(cfg: &ExperimentConfig) -> Result<BuildOutput> {
    cfg.validate()?;
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let Source { dataset, mut kg, features } = load_source(cfg)?;

    let mut noise = None;
    if let Some(mode) = cfg.noise.mode()? {
        let (noisy, report) = inject_kg_noise(&kg, mode, cfg.noise.fraction, cfg.noise.seed)?;
        log::info!("injected {} {mode} triples", report.added);
        kg = noisy;
        noise = Some(report);
    }

    let split = build_strict_cold_splits(&dataset, cfg.split.cold_fraction, cfg.split.ratios(), cfg.split.seed)?;
    let split = build_normal_cold_splits(&split, cfg.split.seed)?;
    let bundle = FrozenGraphBundle::build(&split, &kg, &features, cfg.train.k_item, cfg.train.k_user)?;

    write_vocab(&dataset.users, &dir.join(USERS_FILE))?;
    write_vocab(&dataset.items, &dir.join(ITEMS_FILE))?;
    write_interactions(&dataset, &dir.join(INTERACTIONS_FILE))?;
    write_split_manifest(&split, &dir.join(SPLIT_FILE))?;
    for f in &features {
        write_features(f, &dir.join(feature_file(f.modality)))?;
    }
    write_graph_artifacts(&dir, &kg, &bundle)?;
    let stats = DatasetStats::new(&dataset, &split, &kg);
    write_text(&dir.join(STATS_FILE), &stats.to_string())?;
    Ok(BuildOutput { dir, stats, noise })
}

/// Everything `build` leaves on disk that training and evaluation need.
pub struct Artifacts {
    pub dir: PathBuf,
    pub users: Vocab,
    pub items: Vocab,
    pub split: SplitSpec,
    pub bundle: FrozenGraphBundle,
    pub features: Vec<FeatureMatrix>,
}

impl Artifacts {
    /// Loads the artifacts and checks them against each other and against
    /// the configuration before any model state is touched.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = output_dir(cfg);
        if !dir.join(GRAPHS_FILE).exists() {
            return Err(Error::Config(format!("{} holds no built artifacts; run `build` first", dir.display())));
        }
        let users = read_vocab(&dir.join(USERS_FILE))?;
        let items = read_vocab(&dir.join(ITEMS_FILE))?;
        let split = read_split_manifest(&dir.join(SPLIT_FILE))?;
        let bundle = FrozenGraphBundle::read(&dir.join(GRAPHS_FILE))?;
        let mut features = Vec::new();
        for m in [Modality::Text, Modality::Image] {
            let p = dir.join(feature_file(m));
            if p.exists() {
                features.push(load_features(&p, m, items.len())?);
            }
        }
        let arts = Self {
            dir,
            users,
            items,
            split,
            bundle,
            features,
        };
        arts.check(cfg)?;
        Ok(arts)
    }

    fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        let mismatch = |what: &str, a: usize, b: usize| {
            Error::Config(format!("{what} mismatch in {}: {a} vs {b}", self.dir.display()))
        };
        let (u, n) = (self.users.len(), self.items.len());
        for (what, a, b) in [
            ("split users", self.split.user_count, u),
            ("split items", self.split.item_count, n),
            ("graph users", self.bundle.user_count, u),
            ("graph items", self.bundle.item_count, n),
            ("K_item", self.bundle.k_item, cfg.train.k_item),
            ("K_user", self.bundle.k_user, cfg.train.k_user),
        ] {
            if a != b {
                return Err(mismatch(what, a, b));
            }
        }
        let warm = self.split.is_warm();
        if warm != self.bundle.warm {
            return Err(Error::Config("split and graph bundle disagree on warm items".into()));
        }
        Ok(())
    }
}

fn load_checkpoint(cfg: &ExperimentConfig, arts: &Artifacts, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.map_or_else(|| arts.dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    let ck = Checkpoint::load(&path)?;
    let dims = model_dims(&arts.bundle, &arts.features, &ck.config);
    if ck.state.params.dims != dims {
        return Err(Error::Checkpoint(format!(
            "{}: parameter dimensions {:?} do not match the artifacts {:?}",
            path.display(),
            ck.state.params.dims,
            dims
        )));
    }
    if (ck.config.d, ck.config.d_know) != (cfg.train.d, cfg.train.d_know) {
        return Err(Error::Checkpoint(format!(
            "{}: trained with d={} d_know={}, configuration asks for d={} d_know={}",
            path.display(),
            ck.config.d,
            ck.config.d_know,
            cfg.train.d,
            cfg.train.d_know
        )));
    }
    Ok(ck)
}

fn write_train_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(EpochRecord::HEADER);
    text.push('\n');
    for r in history {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    write_text(path, &text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Trains from scratch, or from `resume`, writing the log and the
/// checkpoint after every epoch.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let arts = Artifacts::load(cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(cfg, &arts, Some(path))?;
            log::info!("resuming after epoch {}", ck.state.epoch);
            Trainer::with_state(cfg.train.clone(), ck.state, &arts.split, &arts.bundle, &arts.features)?
        }
        None => Trainer::new(cfg.train.clone(), &arts.split, &arts.bundle, &arts.features)?,
    };
    let ck_path = arts.dir.join(CHECKPOINT_FILE);
    let log_path = arts.dir.join(TRAIN_LOG_FILE);
    trainer.fit(|t| {
        write_train_log(&log_path, &t.state.history)?;
        Checkpoint {
            config: t.cfg.clone(),
            state: t.state.clone(),
        }
        .save(&ck_path)
    })?;
    Ok(TrainOutput {
        checkpoint: ck_path,
        epochs: trainer.state.epoch,
        best_epoch: trainer.state.best_epoch,
        best_metric: trainer.state.best_metric,
    })
}

fn extra_edges(split: &SplitSpec, setting: Setting) -> Result<&[(usize, usize)]> {
    match setting {
        Setting::NormalCold => split
            .normal_cold
            .as_ref()
            .map(|nc| nc.known.as_slice())
            .ok_or_else(|| Error::Config("split manifest has no normal cold partition".into())),
        _ => Ok(&[]),
    }
}

/// Evaluates the best parameters of a checkpoint. When both the cold and
/// warm settings are requested, their harmonic mean is appended per K.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, settings: &[Setting]) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    if settings.is_empty() {
        return Err(Error::Argument("no evaluation setting requested".into()));
    }
    let arts = Artifacts::load(cfg)?;
    let ck = load_checkpoint(cfg, &arts, checkpoint)?;
    let mut reports = Vec::new();
    for &setting in settings {
        let ctx = GraphContext::new(
            &arts.bundle,
            &arts.features,
            Phase::Inference,
            extra_edges(&arts.split, setting)?,
            ck.config.symmetric_norm,
        );
        let (u, i) = model::embeddings(&ck.state.best_params, &ctx, &ck.config);
        let task = RankingTask::new(&arts.split, setting, cfg.eval.cold_pool, false)?;
        reports.extend(task.evaluate(&u, &i, &cfg.eval.k, false));
    }
    if settings.contains(&Setting::Cold) && settings.contains(&Setting::Warm) {
        let find = |s: Setting, k: usize| reports.iter().find(|r| r.setting == s.as_str() && r.k == k);
        let hm: Vec<MetricsReport> = cfg
            .eval
            .k
            .iter()
            .filter_map(|&k| Some((find(Setting::Cold, k)?, find(Setting::Warm, k)?)))
            .map(|(c, w)| harmonic_mean(c, w))
            .collect::<Result<_>>()?;
        reports.extend(hm);
    }
    write_text(&arts.dir.join(METRICS_FILE), &format_reports(&reports))?;
    write_reports_tsv(&reports, &arts.dir.join(METRICS_TSV_FILE))?;
    Ok(reports)
}

/// Writes one line per item: name, `warm` or `cold`, then the final item
/// embedding used for ranking.
pub fn cmd_export_embeddings(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let arts = Artifacts::load(cfg)?;
    let ck = load_checkpoint(cfg, &arts, checkpoint)?;
    let ctx = GraphContext::new(&arts.bundle, &arts.features, Phase::Inference, &[], ck.config.symmetric_norm);
    let (_, items) = model::embeddings(&ck.state.best_params, &ctx, &ck.config);
    let path = out.map_or_else(|| arts.dir.join(EMBEDDINGS_FILE), Path::to_path_buf);
    let ctx_err = || format!("writing {}", path.display());
    let file = fs::File::create(&path).map_err(|e| Error::io(ctx_err(), e))?;
    let mut w = BufWriter::new(file);
    for (i, row) in items.rows().into_iter().enumerate() {
        let tag = if arts.bundle.warm[i] { "warm" } else { "cold" };
        let mut line = format!("{}\t{tag}", arts.items.name(i));
        for v in row {
            line.push('\t');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(ctx_err(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx_err(), e))?;
    Ok(path)
}

/// Perturbs the built knowledge graph with the configured noise and
/// rebuilds the frozen graphs in place. Repeated runs compound.
pub fn cmd_inject_noise(cfg: &ExperimentConfig) -> Result<NoiseReport> {
    cfg.validate()?;
    let mode = cfg
        .noise
        .mode()?
        .ok_or_else(|| Error::Config("noise.mode must be set for inject-noise".into()))?;
    let arts = Artifacts::load(cfg)?;
    let kg = load_kg(&arts.dir.join(KG_ENTITIES_FILE), &arts.dir.join(KG_TRIPLES_FILE), &arts.items)?;
    let (noisy, report) = inject_kg_noise(&kg, mode, cfg.noise.fraction, cfg.noise.seed)?;
    let bundle = FrozenGraphBundle::build(&arts.split, &noisy, &arts.features, cfg.train.k_item, cfg.train.k_user)?;
    write_graph_artifacts(&arts.dir, &noisy, &bundle)?;
    let stats_path = arts.dir.join(STATS_FILE);
    if let Ok(mut stats) = read_text(&stats_path).and_then(|t| t.parse::<DatasetStats>()) {
        stats.entities = noisy.entity_count();
        stats.relations = noisy.relation_count();
        stats.triplets = noisy.triples.len();
        write_text(&stats_path, &stats.to_string())?;
    }
    Ok(report)
}

/// Files written by `synth`, ready to be referenced from `[paths]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub interactions: PathBuf,
    pub kg_entities: PathBuf,
    pub kg_triples: PathBuf,
    pub features: Vec<(Modality, PathBuf)>,
}

/// Writes the synthetic dataset as raw input files under `<output>/synth`.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let data = generate_synthetic(&cfg.synthetic.spec())?;
    let dir = output_dir(cfg).join("synth");
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let interactions = dir.join(INTERACTIONS_FILE);
    write_interactions(&data.dataset, &interactions)?;

    // Loading the file interns items by first appearance, so feature rows
    // are written in that order.
    let reloaded = load_interactions(&interactions, InteractionFormat::Tsv)?;
    if reloaded.item_count() != data.dataset.item_count() {
        return Err(Error::Alignment("synthetic items without interactions cannot be exported".into()));
    }
    let rows: Vec<usize> = reloaded
        .items
        .names()
        .iter()
        .map(|n| data.dataset.items.get(n).unwrap())
        .collect();
    let mut features = Vec::new();
    for f in [&data.text, &data.image] {
        let p = dir.join(feature_file(f.modality));
        write_features(&FeatureMatrix::new(f.modality, f.values.select(Axis(0), &rows))?, &p)?;
        features.push((f.modality, p));
    }
    let kg_entities = dir.join(KG_ENTITIES_FILE);
    let kg_triples = dir.join(KG_TRIPLES_FILE);
    write_kg(&data.kg, &kg_entities, &kg_triples)?;
    Ok(SynthOutput {
        interactions,
        kg_entities,
        kg_triples,
        features,
    })
}
