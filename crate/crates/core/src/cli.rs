//! The `embspace` command line.
//!
//! Every subcommand reads its inputs, runs one pipeline, and writes
//! `report.json` plus any CSV or embedding artifacts into `--out`. Outputs
//! are staged in memory and committed together, so a failed run leaves
//! nothing behind.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::geometry::{cosine_matrix, EmbeddingSet, LabeledEmbeddingSet, Modality, SimilarityKind, SimilarityMatrix};
use crate::indicators::{class_pair_histograms, modality_gap, modality_pair_histograms, HistogramPair, DEFAULT_BINS, DEFAULT_MAX_PAIRS};
use crate::io::{self, Dtype, MetricReport, OutputStage};
use crate::projection::{fit_class_axes, keep_count_from_fraction, project, projected_similarity, PrincipalProjector};
use crate::recovery::{recover_intra_anchor, recover_intra_anchorfree, AnchorSelection, RecoveryConfig};
use crate::rng::sub_seed;
use crate::synthetic::{generate_modality_pair, ConeSpec};
use crate::tasks::{
    accuracy, classify, lda_classifier, prototype_classifier, retrieval_map, sample_shots, zero_shot_classifier,
    DEFAULT_SHRINKAGE,
};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "EMBSPACE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "embspace", version, about = "Embedding-space geometry toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic image/text embedding pair.
    Synth(SynthArgs),
    /// Recover image-image similarities from image-text similarities.
    Recover(RecoverArgs),
    /// Project image embeddings onto class-name principal axes.
    Project(ProjectArgs),
    /// Similarity histograms, overlap and modality gap.
    Indicators(IndicatorArgs),
    /// Image-to-image retrieval mAP.
    Retrieval(RetrievalArgs),
    /// Few-shot and zero-shot classification accuracy.
    Fewshot(FewshotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Anchor,
    AnchorFree,
    Original,
    PcaBack,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Anchor => "anchor",
            Method::AnchorFree => "anchor-free",
            Method::Original => "original",
            Method::PcaBack => "pca-back",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierArg {
    Prototype,
    Lda,
    ZeroShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32le,
            DtypeArg::F64 => Dtype::F64le,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Free-form model name echoed into the report.
    #[arg(long)]
    pub model_tag: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    pub spread: f64,
    /// Magnitude of the text offset along the first axis.
    #[arg(long, default_value_t = 0.0)]
    pub offset: f64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[command(flatten)]
    pub common: Common,
    /// Inter-modal similarity matrix (texts x images).
    #[arg(long)]
    pub sinter: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::AnchorFree)]
    pub method: Method,
    /// Embedding dimension; defaults to the text dimension when --texts is given.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Text embeddings (rows of --sinter); required for the anchor method.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    /// Explicit anchor rows, comma separated; greedy selection otherwise.
    #[arg(long, value_delimiter = ',')]
    pub anchors: Option<Vec<usize>>,
    /// Ground-truth image embeddings for error reporting.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub images: PathBuf,
    /// Class-name text embeddings the principal axes are fitted on.
    #[arg(long)]
    pub texts: PathBuf,
    /// Fraction of dimensions kept.
    #[arg(long, default_value_t = 0.5)]
    pub keep: f64,
    #[arg(long)]
    pub mean_adjust: bool,
    #[arg(long)]
    pub no_renormalize: bool,
    /// Also write the projected rows as CSV.
    #[arg(long)]
    pub csv: bool,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct IndicatorArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Text embeddings for the modality histograms and gap.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_PAIRS)]
    pub max_pairs: usize,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Original)]
    pub method: Method,
    /// Class-name text embeddings, required for pca-back.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub keep: f64,
    /// Include per-query AP in the report.
    #[arg(long)]
    pub per_query_ap: bool,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value_t = ClassifierArg::Prototype)]
    pub classifier: ClassifierArg,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    /// Number of seeded episodes averaged.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    pub shrinkage: f64,
    #[arg(long, value_enum, default_value_t = Method::Original)]
    pub method: Method,
    /// Text embeddings: class-name prompts for pca-back, class prompts for zero-shot.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    /// Class of each text row (zero-shot); row i is class i when omitted.
    #[arg(long)]
    pub text_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub keep: f64,
}

/// Parses `argv` (including the program name), runs the pipeline and writes
/// its outputs. Returns the report that was written.
pub fn run_command<I, T>(argv: I) -> std::result::Result<MetricReport, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(CliError::Usage)?;
    run(cli.command).map_err(CliError::Run)
}

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(e) if !e.use_stderr() => 0,
            CliError::Usage(_) => 2,
            CliError::Run(e) => e.exit_code(),
        }
    }
}

pub fn run(command: Command) -> Result<MetricReport> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Recover(a) => recover(a),
        Command::Project(a) => project_cmd(a),
        Command::Indicators(a) => indicators(a),
        Command::Retrieval(a) => retrieval(a),
        Command::Fewshot(a) => fewshot(a),
    }
}

fn start_report(name: &str, common: &Common) -> MetricReport {
    let mut r = MetricReport::new(name);
    r.model_tag = common.model_tag.clone();
    r.param("seed", common.seed);
    r
}

fn finish(mut report: MetricReport, mut stage: OutputStage) -> Result<MetricReport> {
    let mut artifacts = stage.names();
    artifacts.push("report.json".into());
    report.artifacts = artifacts;
    report.finalize()?;
    let mut json = report.to_json()?;
    json.push('\n');
    stage.add("report.json", json);
    stage.commit()?;
    Ok(report)
}

fn load_labeled(images: &Path, labels: &Path, report: &mut MetricReport, stage: &mut OutputStage) -> Result<LabeledEmbeddingSet> {
    let e = io::load_embeddings(images)?;
    let lf = io::load_labels(labels)?;
    if lf.ids.len() != e.len() {
        return Err(Error::InvalidLabels(format!(
            "{} labels for {} embeddings",
            lf.ids.len(),
            e.len()
        )));
    }
    report.input("images", images)?;
    report.input("labels", labels)?;
    stage.add("label_map.csv", lf.id_map_csv()?);
    LabeledEmbeddingSet::new(e, lf.ids)
}

fn fit_from_texts(texts: &Path, dim: usize, keep: f64, report: &mut MetricReport) -> Result<PrincipalProjector> {
    let t = io::load_embeddings(texts)?;
    if t.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: t.dim(),
        });
    }
    report.input("texts", texts)?;
    let p = fit_class_axes(&t, keep_count_from_fraction(dim, keep)?)?;
    report.param("keep", keep).param("keep_count", p.keep_count());
    report.metric("explained_variance", p.explained_variance());
    Ok(p)
}

fn synth(a: SynthArgs) -> Result<MetricReport> {
    let spec = ConeSpec::new(a.dim, a.classes, a.per_class, a.spread, sub_seed(a.common.seed, "synth"))
        .with_axis_offset(a.offset);
    let pair = generate_modality_pair(&spec)?;
    let dtype: Dtype = a.dtype.into();
    let mut report = start_report("synth", &a.common);
    report
        .param("dim", a.dim)
        .param("classes", a.classes)
        .param("per_class", a.per_class)
        .param("spread", a.spread)
        .param("offset", a.offset)
        .param("dtype", dtype);
    report
        .metric("count", spec.total() as f64)
        .metric("modality_gap", modality_gap(pair.images.embeddings(), pair.texts.embeddings())?);

    let mut stage = OutputStage::new(&a.common.out);
    stage.add("images.emb", io::encode_embeddings(pair.images.embeddings(), dtype)?);
    stage.add("texts.emb", io::encode_embeddings(pair.texts.embeddings(), dtype)?);
    stage.add("labels.csv", io::labels_csv(pair.images.labels()));
    stage.add(
        "s_inter.emb",
        io::encode_matrix(pair.s_inter.data(), Dtype::F64le, Modality::Unspecified, false)?,
    );
    finish(report, stage)
}

fn recover(a: RecoverArgs) -> Result<MetricReport> {
    let cfg = RecoveryConfig::default();
    let mut report = start_report("recover", &a.common);
    report.method = Some(a.method.name().into());
    let (_, s_data) = io::load_matrix(&a.sinter)?;
    let s_inter = SimilarityMatrix::new(s_data, SimilarityKind::Inter)?;
    report.input("sinter", &a.sinter)?;
    let texts = match &a.texts {
        Some(p) => {
            report.input("texts", p)?;
            Some(io::load_embeddings(p)?)
        }
        None => None,
    };

    let s_intra = match a.method {
        Method::AnchorFree => {
            let d = a
                .dim
                .or(texts.as_ref().map(EmbeddingSet::dim))
                .ok_or_else(|| Error::InvalidParameter("anchor-free recovery needs --dim or --texts".into()))?;
            report.param("dim", d);
            let (s, f) = recover_intra_anchorfree(&s_inter, d, &cfg)?;
            report
                .metric("residual", f.residual)
                .metric("rank", f.rank() as f64)
                .metric("singular_value_ratio", f.singular_values[d - 1] / f.singular_values[0]);
            s
        }
        Method::Anchor => {
            let text = texts
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("anchor recovery needs --texts".into()))?;
            let anchors = match &a.anchors {
                Some(idx) => AnchorSelection::new(idx.clone(), text, &cfg)?,
                None => AnchorSelection::greedy(text, &cfg)?,
            };
            report.param("anchors", anchors.indices());
            recover_intra_anchor(&s_inter, text, &anchors, &cfg)?
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "recover supports anchor and anchor-free, not {}",
                other.name()
            )))
        }
    };
    if let Some(p) = &a.images {
        let truth = io::load_embeddings(p)?;
        report.input("images", p)?;
        let gram = cosine_matrix(&truth, &truth)?;
        report.metric("max_abs_error", s_intra.max_abs_diff(&gram)?);
    }
    report.metric("count", s_intra.nrows() as f64);

    let mut stage = OutputStage::new(&a.common.out);
    stage.add(
        "s_intra.emb",
        io::encode_matrix(s_intra.data(), Dtype::F64le, Modality::Unspecified, false)?,
    );
    finish(report, stage)
}

fn rows_csv(e: &EmbeddingSet) -> String {
    let mut out = String::from("index");
    for j in 0..e.dim() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (i, row) in e.data().row_iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn project_cmd(a: ProjectArgs) -> Result<MetricReport> {
    let mut report = start_report("project", &a.common);
    report.method = Some("pca-back".into());
    let images = io::load_embeddings(&a.images)?;
    report.input("images", &a.images)?;
    let p = fit_from_texts(&a.texts, images.dim(), a.keep, &mut report)?;
    report
        .param("mean_adjust", a.mean_adjust)
        .param("renormalize", !a.no_renormalize);
    let projected = project(&images, &p, a.mean_adjust, !a.no_renormalize)?;
    let mean_norm = |e: &EmbeddingSet| e.data().row_iter().map(|r| r.norm()).sum::<f64>() / e.len() as f64;
    report
        .metric("mean_norm_before", mean_norm(&images))
        .metric("mean_norm_after", mean_norm(&projected))
        .metric("count", images.len() as f64);

    let mut stage = OutputStage::new(&a.common.out);
    stage.add("projected.emb", io::encode_embeddings(&projected, a.dtype.into())?);
    if a.csv {
        stage.add("projected.csv", rows_csv(&projected));
    }
    finish(report, stage)
}

fn histogram_metrics(report: &mut MetricReport, prefix: &str, side_a: &str, side_b: &str, h: &HistogramPair) {
    report
        .metric(&format!("{prefix}.overlap"), h.overlap)
        .metric(&format!("{prefix}.{side_a}_mean"), h.summary_a.mean)
        .metric(&format!("{prefix}.{side_a}_std"), h.summary_a.std)
        .metric(&format!("{prefix}.{side_a}_pairs"), h.summary_a.count as f64)
        .metric(&format!("{prefix}.{side_b}_mean"), h.summary_b.mean)
        .metric(&format!("{prefix}.{side_b}_std"), h.summary_b.std)
        .metric(&format!("{prefix}.{side_b}_pairs"), h.summary_b.count as f64);
}

fn indicators(a: IndicatorArgs) -> Result<MetricReport> {
    let mut report = start_report("indicators", &a.common);
    report.param("bins", a.bins).param("max_pairs", a.max_pairs);
    let mut stage = OutputStage::new(&a.common.out);
    let ds = load_labeled(&a.images, &a.labels, &mut report, &mut stage)?;

    let class = class_pair_histograms(&ds, a.bins, a.max_pairs, sub_seed(a.common.seed, "indicators.class"))?;
    histogram_metrics(&mut report, "class", "same", "different", &class);
    stage.add("class_pairs.csv", class.to_csv()?);

    if let Some(tp) = &a.texts {
        let texts = io::load_embeddings(tp)?;
        report.input("texts", tp)?;
        let modal = modality_pair_histograms(
            ds.embeddings(),
            &texts,
            a.bins,
            a.max_pairs,
            sub_seed(a.common.seed, "indicators.modality"),
        )?;
        histogram_metrics(&mut report, "modality", "image_image", "image_text", &modal);
        report.metric("modality_gap", modality_gap(ds.embeddings(), &texts)?);
        stage.add("modality_pairs.csv", modal.to_csv()?);
    }
    finish(report, stage)
}

fn retrieval(a: RetrievalArgs) -> Result<MetricReport> {
    let mut report = start_report("retrieval", &a.common);
    report.task = Some("image-retrieval".into());
    report.method = Some(a.method.name().into());
    let mut stage = OutputStage::new(&a.common.out);
    let ds = load_labeled(&a.images, &a.labels, &mut report, &mut stage)?;
    let sim = match a.method {
        Method::Original => cosine_matrix(ds.embeddings(), ds.embeddings())?,
        Method::PcaBack => {
            let tp = a
                .texts
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("pca-back needs --texts".into()))?;
            let p = fit_from_texts(tp, ds.dim(), a.keep, &mut report)?;
            projected_similarity(ds.embeddings(), ds.embeddings(), &p)?
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "retrieval supports original and pca-back, not {}",
                other.name()
            )))
        }
    };
    let result = retrieval_map(&ds, &ds, &sim, true)?;
    report
        .metric("map", result.map)
        .metric("queries", result.evaluated.len() as f64)
        .metric("skipped_queries", result.skipped.len() as f64);
    if a.per_query_ap {
        report.per_query_ap = Some(result.per_query_ap);
    }
    finish(report, stage)
}

fn fewshot(a: FewshotArgs) -> Result<MetricReport> {
    let mut report = start_report("fewshot", &a.common);
    report.task = Some("classification".into());
    report.method = Some(a.method.name().into());
    report.shots = Some(a.shots);
    let classifier_name = match a.classifier {
        ClassifierArg::Prototype => "prototype",
        ClassifierArg::Lda => "lda",
        ClassifierArg::ZeroShot => "zero-shot",
    };
    report
        .param("classifier", classifier_name)
        .param("seeds", a.seeds)
        .param("shrinkage", a.shrinkage);
    if a.seeds == 0 {
        return Err(Error::InvalidParameter("--seeds must be positive".into()));
    }
    let mut stage = OutputStage::new(&a.common.out);
    let pool = load_labeled(&a.images, &a.labels, &mut report, &mut stage)?;

    let pool = match a.method {
        Method::Original => pool,
        Method::PcaBack => {
            if a.classifier == ClassifierArg::ZeroShot {
                return Err(Error::InvalidParameter(
                    "pca-back applies to image-image classifiers only".into(),
                ));
            }
            let tp = a
                .texts
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("pca-back needs --texts".into()))?;
            let p = fit_from_texts(tp, pool.dim(), a.keep, &mut report)?;
            pool.with_embeddings(project(pool.embeddings(), &p, false, true)?)?
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "fewshot supports original and pca-back, not {}",
                other.name()
            )))
        }
    };

    let zero_shot = match a.classifier {
        ClassifierArg::ZeroShot => {
            let tp = a
                .texts
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("zero-shot needs --texts".into()))?;
            let texts = io::load_embeddings(tp)?;
            report.input("texts", tp)?;
            let labels = match &a.text_labels {
                Some(lp) => {
                    report.input("text_labels", lp)?;
                    io::load_labels(lp)?.ids
                }
                None => (0..texts.len()).collect(),
            };
            Some(zero_shot_classifier(&LabeledEmbeddingSet::new(texts, labels)?)?)
        }
        _ => None,
    };

    let mut accs = Vec::with_capacity(a.seeds);
    for episode in 0..a.seeds {
        let seed = sub_seed(a.common.seed, &format!("fewshot.episode.{episode}"));
        let split = sample_shots(&pool, a.shots, seed)?;
        let classifier = match &zero_shot {
            Some(c) => c.clone(),
            None => {
                let train = pool.select_rows(&split.train)?;
                match a.classifier {
                    ClassifierArg::Lda => lda_classifier(&train, a.shrinkage)?,
                    _ => prototype_classifier(&train)?,
                }
            }
        };
        let test = pool.embeddings().select_rows(&split.test)?;
        let truth: Vec<usize> = split.test.iter().map(|&i| pool.labels()[i]).collect();
        let acc = accuracy(&classify(&classifier, &test)?, &truth)?;
        report.metric(&format!("accuracy.seed_{episode}"), acc);
        accs.push(acc);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = (accs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    report
        .metric("accuracy", mean)
        .metric("accuracy_std", std)
        .metric("classes", pool.n_classes() as f64)
        .metric("chance", 1.0 / pool.n_classes() as f64);
    finish(report, stage)
}
