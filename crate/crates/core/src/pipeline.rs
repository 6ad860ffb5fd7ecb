//! File-level orchestration of the full workflow: dataset generation,
//! captioning, estimator training, calibration, re-ranking, and metric
//! evaluation, all reading and writing schema-tagged artifacts in an
//! output directory. Every stage is a pure function of its input files
//! and the run configuration, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    calibrate, pr_points_to_csv, pr_points_to_svg, CalibrationResult, ScoredLabelSet,
    ThresholdSelection,
};
use crate::captioner::{
    beam_search, canonical_caption, generate_references, generate_scene, toy_vocabulary,
    CaptionerParams, Captioner, GrammarConfig, SceneGenConfig,
};
use crate::confidence::{AggregationMethod, ConfidenceMeasure};
use crate::domain::jsonl::{read_jsonl, write_jsonl, BeamSet, Record};
use crate::domain::{validate_beam, Caption, ReferenceSet, Scene, SceneInstance, Vocabulary};
use crate::error::{CoreError, Result};
use crate::estimator::{
    sample_training_example, train_estimator, EstimatorDims, EstimatorParams, LabeledInput,
    TrainConfig,
};
use crate::evaluation::{
    chair_i, chair_s, diversity, pairwise_accuracy, span_pair_confidence, winoground_scores,
    CorpusPrediction, DiversityMetrics, PairScore, WinogroundExample, WinogroundScores,
};
use crate::rerank::{rerank_corpus, ConfidenceBackend, RerankDecision};
use crate::{Real, SCHEMA_VERSION};

/// Scene counts of the four dataset roles. The captioner-train split is
/// unused by the synthetic model but kept in the manifest so the data
/// hygiene of the real setup carries over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_captioner: usize,
    pub train_estimator: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train_captioner: 50,
            train_estimator: 1500,
            validation: 750,
            test: 2000,
        }
    }
}

/// The four dataset roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainCaptioner,
    TrainEstimator,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::TrainCaptioner,
        Split::TrainEstimator,
        Split::Validation,
        Split::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainCaptioner => "train_captioner",
            Split::TrainEstimator => "train_estimator",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown split {name:?}")))
    }

    /// Global scene-id range of the split; ranges never overlap.
    fn id_range(self, sizes: &SplitSizes) -> std::ops::Range<u64> {
        let sizes_in_order = [
            sizes.train_captioner,
            sizes.train_estimator,
            sizes.validation,
            sizes.test,
        ];
        let index = Split::ALL.iter().position(|s| *s == self).unwrap();
        let start: usize = sizes_in_order[..index].iter().sum();
        start as u64..(start + sizes_in_order[index]) as u64
    }
}

/// Confidence source selector used in file names and CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Algebraic,
    Learned,
}

impl BackendKind {
    pub const BOTH: [BackendKind; 2] = [BackendKind::Algebraic, BackendKind::Learned];

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Algebraic => "algebraic",
            BackendKind::Learned => "learned",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "algebraic" => Ok(BackendKind::Algebraic),
            "learned" => Ok(BackendKind::Learned),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown backend {other:?}"
            ))),
        }
    }

    fn method_label(self) -> &'static str {
        match self {
            BackendKind::Algebraic => "tlc-a",
            BackendKind::Learned => "tlc-l",
        }
    }
}

/// Estimator architecture knobs, resolved against the vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorShape {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub max_positions: usize,
}

impl Default for EstimatorShape {
    fn default() -> Self {
        EstimatorShape {
            width: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            head_hidden: 64,
            max_positions: 32,
        }
    }
}

impl EstimatorShape {
    pub fn dims(&self, vocab_size: usize) -> EstimatorDims {
        EstimatorDims {
            vocab_size,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            head_hidden: self.head_hidden,
            max_positions: self.max_positions,
        }
    }
}

/// Full run configuration; every field has a default so config files can
/// stay partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub captioner: CaptionerParams,
    pub scene_gen: SceneGenConfig,
    pub references_per_scene: usize,
    pub beam_width: usize,
    pub max_caption_len: usize,
    /// Algebraic confidence measure for TLC-A.
    pub measure: ConfidenceMeasure,
    /// Span aggregation for the algebraic backend.
    pub algebraic_aggregation: AggregationMethod,
    /// Span aggregation for the learned backend.
    pub learned_aggregation: AggregationMethod,
    /// Target precision for threshold selection.
    pub alpha: f64,
    pub train: TrainConfig,
    pub estimator: EstimatorShape,
    pub splits: SplitSizes,
    /// Emit a null caption instead of the top beam when every beam is
    /// rejected.
    pub abstain: bool,
    /// Number of synthetic examples for each pairwise-matching protocol.
    pub protocol_examples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            captioner: CaptionerParams::default(),
            scene_gen: SceneGenConfig::default(),
            references_per_scene: 5,
            beam_width: 16,
            max_caption_len: 16,
            measure: ConfidenceMeasure::Softmax,
            algebraic_aggregation: AggregationMethod::Min,
            learned_aggregation: AggregationMethod::Mean,
            alpha: 0.99,
            // Paper-scale schedule defaults, cut down to desk scale.
            train: TrainConfig {
                epochs: 25,
                batch_size: 64,
                ..TrainConfig::default()
            },
            estimator: EstimatorShape::default(),
            splits: SplitSizes::default(),
            abstain: false,
            protocol_examples: 200,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.captioner.validate()?;
        self.train.validate()?;
        if self.references_per_scene == 0 {
            return Err(CoreError::InvalidConfig(
                "references_per_scene must be ≥ 1".into(),
            ));
        }
        if self.beam_width == 0 || self.max_caption_len == 0 {
            return Err(CoreError::InvalidConfig(
                "beam width and max caption length must be ≥ 1".into(),
            ));
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        let sizes = [
            self.splits.train_captioner,
            self.splits.train_estimator,
            self.splits.validation,
            self.splits.test,
        ];
        if sizes.iter().any(|&s| s == 0) {
            return Err(CoreError::InvalidConfig(
                "every split needs at least one scene".into(),
            ));
        }
        Ok(())
    }

    fn vocabulary(&self) -> Vocabulary {
        toy_vocabulary()
    }

    fn grammar(&self, vocab: &Vocabulary) -> GrammarConfig {
        let mut grammar = GrammarConfig::standard(vocab);
        grammar.max_references = grammar.max_references.max(self.references_per_scene);
        grammar
    }

    fn captioner(&self) -> Result<Captioner> {
        let vocab = self.vocabulary();
        let grammar = self.grammar(&vocab);
        Captioner::new(vocab, grammar, self.captioner, self.seed)
    }
}

/// Output-directory layout.
pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(out_dir: &Path) -> Self {
        Paths {
            root: out_dir.to_path_buf(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn scenes(&self, split: Split) -> PathBuf {
        self.root.join(format!("scenes_{}.jsonl", split.name()))
    }
    pub fn references(&self, split: Split) -> PathBuf {
        self.root.join(format!("refs_{}.jsonl", split.name()))
    }
    pub fn beams(&self, split: Split) -> PathBuf {
        self.root.join(format!("beams_{}.jsonl", split.name()))
    }
    pub fn estimator(&self) -> PathBuf {
        self.root.join("estimator.json")
    }
    pub fn loss_trace(&self) -> PathBuf {
        self.root.join("loss_trace.csv")
    }
    pub fn scores(&self, split: Split, backend: BackendKind) -> PathBuf {
        self.root
            .join(format!("scores_{}_{}.jsonl", split.name(), backend.name()))
    }
    pub fn calibration(&self, backend: BackendKind) -> PathBuf {
        self.root.join(format!("calibration_{}.json", backend.name()))
    }
    pub fn pr_csv(&self, backend: BackendKind) -> PathBuf {
        self.root.join(format!("pr_{}.csv", backend.name()))
    }
    pub fn pr_svg(&self, backend: BackendKind) -> PathBuf {
        self.root.join(format!("pr_{}.svg", backend.name()))
    }
    pub fn decisions(&self, backend: BackendKind) -> PathBuf {
        self.root.join(format!("rerank_{}.jsonl", backend.name()))
    }
    pub fn selected(&self, backend: BackendKind) -> PathBuf {
        self.root.join(format!("selected_{}.jsonl", backend.name()))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn breakdown(&self) -> PathBuf {
        self.root.join("breakdown.csv")
    }
}

fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let record = Record {
        schema: SCHEMA_VERSION.to_string(),
        body,
    };
    fs::write(path, serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let record: Record<T> = serde_json::from_str(&text)?;
    if record.schema != SCHEMA_VERSION {
        return Err(CoreError::MalformedRecord(format!(
            "{}: schema {:?}, expected {:?}",
            path.display(),
            record.schema,
            SCHEMA_VERSION
        )));
    }
    Ok(record.body)
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|err| CoreError::Stage {
        stage: name,
        source: Box::new(err),
    })
}

/// Per-split entry of the generation manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub name: String,
    pub scenes: usize,
    pub references: usize,
    pub scenes_sha256: String,
    pub refs_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub splits: Vec<ManifestSplit>,
}

/// Generates scenes and reference sets for all four splits, writes them
/// as JSONL with a content-hash manifest. Scene ids are globally unique
/// and disjoint across splits.
pub fn cmd_generate(config: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let paths = Paths::new(out_dir);
    let vocab = config.vocabulary();
    let grammar = config.grammar(&vocab);
    grammar.validate(&vocab)?;

    write_json(&paths.config(), config)?;
    write_json(&paths.vocab(), &vocab)?;

    let mut manifest = Manifest {
        seed: config.seed,
        splits: Vec::new(),
    };
    for split in Split::ALL {
        let ids = split.id_range(&config.splits);
        let mut scenes = Vec::with_capacity(ids.clone().count());
        let mut reference_sets = Vec::with_capacity(scenes.capacity());
        for id in ids {
            let scene = generate_scene(config.seed, id, &vocab, &config.scene_gen)?;
            let refs = generate_references(
                &scene,
                config.seed,
                &grammar,
                config.references_per_scene,
                &vocab,
            )?;
            scenes.push(scene);
            reference_sets.push(refs);
        }
        let n_refs: usize = reference_sets.iter().map(ReferenceSet::len).sum();
        write_jsonl(&paths.scenes(split), &scenes)?;
        write_jsonl(&paths.references(split), &reference_sets)?;
        manifest.splits.push(ManifestSplit {
            name: split.name().to_string(),
            scenes: scenes.len(),
            references: n_refs,
            scenes_sha256: sha256_hex(&paths.scenes(split))?,
            refs_sha256: sha256_hex(&paths.references(split))?,
        });
    }
    write_json(&paths.manifest(), &manifest)?;
    Ok(manifest)
}

fn load_vocab(paths: &Paths) -> Result<Vocabulary> {
    read_json(&paths.vocab())
}

fn load_scenes(paths: &Paths, split: Split) -> Result<Vec<Scene>> {
    read_jsonl(&paths.scenes(split))
}

fn load_references(paths: &Paths, split: Split) -> Result<Vec<ReferenceSet>> {
    read_jsonl(&paths.references(split))
}

fn load_beams(paths: &Paths, split: Split) -> Result<Vec<BeamSet<Real>>> {
    read_jsonl(&paths.beams(split))
}

/// Runs beam search over a split's scenes and writes the validated beam
/// sets.
pub fn cmd_caption(config: &RunConfig, out_dir: &Path, split: Split) -> Result<usize> {
    config.validate()?;
    let paths = Paths::new(out_dir);
    let vocab = load_vocab(&paths)?;
    let captioner = config.captioner()?;
    let scenes = load_scenes(&paths, split)?;

    let mut beam_sets = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let beams =
            beam_search::<Real>(&captioner, scene, config.beam_width, config.max_caption_len)?;
        for beam in &beams {
            if let Err(violation) = validate_beam(beam, &vocab) {
                return Err(CoreError::InvalidConfig(format!(
                    "scene {}: generated beam failed validation: {violation}",
                    scene.scene_id
                )));
            }
        }
        beam_sets.push(BeamSet {
            scene_id: scene.scene_id,
            beams,
        });
    }
    write_jsonl(&paths.beams(split), &beam_sets)?;
    Ok(beam_sets.len())
}

/// Trains the confidence estimator on the train-estimator split,
/// re-sampling one example per scene every epoch, and writes the weights
/// plus the loss trace.
pub fn cmd_train_estimator(config: &RunConfig, out_dir: &Path) -> Result<Vec<f64>> {
    config.validate()?;
    let paths = Paths::new(out_dir);
    let vocab = load_vocab(&paths)?;
    let captioner = config.captioner()?;
    let scenes = load_scenes(&paths, Split::TrainEstimator)?;
    let references = load_references(&paths, Split::TrainEstimator)?;
    if scenes.len() != references.len() {
        return Err(CoreError::MalformedRecord(
            "scene and reference files of the train-estimator split disagree".into(),
        ));
    }

    let seed = config.seed;
    let mut supplier = |epoch: usize| -> Result<Vec<LabeledInput>> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::stream::stream_seed(&[seed, 0x7e41, epoch as u64]));
        let mut examples = Vec::with_capacity(scenes.len());
        for (scene, refs) in scenes.iter().zip(&references) {
            let example = sample_training_example(scene, refs, &captioner, &mut rng)?;
            examples.push(LabeledInput {
                input: example.to_input(scene),
                label: example.label,
            });
        }
        Ok(examples)
    };

    let dims = config.estimator.dims(vocab.len());
    let outcome = train_estimator::<Real>(&mut supplier, dims, &config.train)?;
    write_json(&paths.estimator(), &outcome.params)?;
    fs::write(paths.loss_trace(), outcome.loss_trace_csv())?;
    Ok(outcome.loss_trace)
}

fn load_estimator(paths: &Paths) -> Result<EstimatorParams<Real>> {
    read_json(&paths.estimator())
}

fn make_backend<'a>(
    config: &RunConfig,
    kind: BackendKind,
    estimator: Option<&'a EstimatorParams<Real>>,
) -> Result<ConfidenceBackend<'a, Real>> {
    Ok(match kind {
        BackendKind::Algebraic => ConfidenceBackend::Algebraic {
            measure: config.measure,
            aggregation: config.algebraic_aggregation,
        },
        BackendKind::Learned => ConfidenceBackend::Learned {
            params: estimator.ok_or_else(|| {
                CoreError::InvalidConfig("learned backend requires trained estimator".into())
            })?,
            aggregation: config.learned_aggregation,
        },
    })
}

/// One scored concept occurrence from a split's top beam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub concept: usize,
    pub position: usize,
    pub score: Real,
    /// Whether the concept is present in the scene (the ground truth for
    /// calibration).
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpanScoreRecord {
    pub scene_id: u64,
    pub spans: Vec<ScoredSpan>,
}

/// Scores every concept occurrence of each scene's top beam with the
/// chosen backend and labels it against the scene's ground truth.
pub fn cmd_score(
    config: &RunConfig,
    out_dir: &Path,
    split: Split,
    kind: BackendKind,
) -> Result<usize> {
    config.validate()?;
    let paths = Paths::new(out_dir);
    let vocab = load_vocab(&paths)?;
    let scenes = load_scenes(&paths, split)?;
    let beam_sets = load_beams(&paths, split)?;
    let estimator = match kind {
        BackendKind::Learned => Some(load_estimator(&paths)?),
        BackendKind::Algebraic => None,
    };
    let backend = make_backend(config, kind, estimator.as_ref())?;

    let mut records = Vec::with_capacity(scenes.len());
    for (scene, beam_set) in scenes.iter().zip(&beam_sets) {
        if scene.scene_id != beam_set.scene_id {
            return Err(CoreError::MalformedRecord(format!(
                "scene {} paired with beams of scene {}",
                scene.scene_id, beam_set.scene_id
            )));
        }
        let top = beam_set.beams.first().ok_or_else(|| {
            CoreError::EmptyInput(format!("beam set for scene {}", scene.scene_id))
        })?;
        let concept_scores = backend.span_scores(top, scene, &vocab)?;
        let spans = concept_scores
            .into_iter()
            .map(|cs| ScoredSpan {
                concept: cs.concept,
                position: cs.position,
                score: cs.score,
                correct: scene.contains_object(cs.concept),
            })
            .collect();
        records.push(SpanScoreRecord {
            scene_id: scene.scene_id,
            spans,
        });
    }
    write_jsonl(&paths.scores(split, kind), &records)?;
    Ok(records.len())
}

fn scored_label_set(records: &[SpanScoreRecord]) -> Result<ScoredLabelSet<Real>> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        for span in &record.spans {
            scores.push(span.score);
            labels.push(span.correct);
        }
    }
    ScoredLabelSet::new(scores, labels)
}

/// Selects the decision threshold for one backend on the validation
/// split and writes the calibration result, PR CSV, and PR plot.
pub fn cmd_calibrate(
    config: &RunConfig,
    out_dir: &Path,
    kind: BackendKind,
) -> Result<CalibrationResult<Real>> {
    config.validate()?;
    let paths = Paths::new(out_dir);
    let records: Vec<SpanScoreRecord> = read_jsonl(&paths.scores(Split::Validation, kind))?;
    let set = scored_label_set(&records)?;
    let result = calibrate(&set, config.alpha)?;
    write_json(&paths.calibration(kind), &result)?;
    fs::write(paths.pr_csv(kind), pr_points_to_csv(&result.pr_points))?;
    fs::write(
        paths.pr_svg(kind),
        pr_points_to_svg(
            &result.pr_points,
            &format!("precision-recall ({})", kind.name()),
        ),
    )?;
    Ok(result)
}

/// Selected caption of one scene; `caption` is null when the run
/// abstained on fallback.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectedCaption {
    pub scene_id: u64,
    pub selected_index: usize,
    pub fallback_used: bool,
    pub caption: Option<Caption>,
}

/// Re-ranks the test split's beams with the backend's calibrated
/// threshold, writing the decision log and the selected captions.
pub fn cmd_rerank(config: &RunConfig, out_dir: &Path, kind: BackendKind) -> Result<usize> {
    config.validate()?;
    let paths = Paths::new(out_dir);
    let vocab = load_vocab(&paths)?;
    let scenes = load_scenes(&paths, Split::Test)?;
    let beam_sets = load_beams(&paths, Split::Test)?;
    let calibration: CalibrationResult<Real> = read_json(&paths.calibration(kind))?;
    let gamma = calibration.selection.gamma_or_never_reject();
    let estimator = match kind {
        BackendKind::Learned => Some(load_estimator(&paths)?),
        BackendKind::Algebraic => None,
    };
    let backend = make_backend(config, kind, estimator.as_ref())?;

    let items: Vec<(Scene, Vec<crate::domain::CandidateBeam<Real>>)> = scenes
        .into_iter()
        .zip(beam_sets)
        .map(|(scene, set)| (scene, set.beams))
        .collect();
    let outcome = rerank_corpus(&items, &vocab, &backend, gamma);
    if let Some((scene_id, err)) = outcome.failures.into_iter().next() {
        return Err(CoreError::Stage {
            stage: "rerank",
            source: Box::new(CoreError::InvalidConfig(format!(
                "scene {scene_id}: {err}"
            ))),
        });
    }

    let selected: Vec<SelectedCaption> = outcome
        .decisions
        .iter()
        .zip(&items)
        .map(|(decision, (_, beams))| {
            let abstained = config.abstain && decision.fallback_used;
            SelectedCaption {
                scene_id: decision.scene_id,
                selected_index: decision.selected_index,
                fallback_used: decision.fallback_used,
                caption: if abstained {
                    None
                } else {
                    Some(beams[decision.selected_index].caption.clone())
                },
            }
        })
        .collect();
    write_jsonl(&paths.decisions(kind), &outcome.decisions)?;
    write_jsonl(&paths.selected(kind), &selected)?;
    Ok(selected.len())
}

/// CHAIR and diversity numbers of one caption-selection method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub chair_s: f64,
    pub chair_i: f64,
    pub diversity: DiversityMetrics,
    pub gamma: Option<Real>,
    pub moved_off_top_beam: usize,
    pub fallbacks: usize,
    /// Precision/recall of `score ≥ γ` on the test split's spans.
    pub test_precision: Option<f64>,
    pub test_recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub subset: String,
    pub scenes: usize,
    pub method: String,
    pub chair_s: f64,
    pub chair_i: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub pairwise_examples: usize,
    pub pairwise_accuracy_algebraic: f64,
    pub pairwise_accuracy_learned: f64,
    pub winoground_examples: usize,
    pub winoground_algebraic: WinogroundScores,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub methods: BTreeMap<String, MethodMetrics>,
    /// AUC of each confidence variant on the validation split.
    pub validation_auc: BTreeMap<String, f64>,
    pub protocols: ProtocolMetrics,
    pub breakdown: Vec<BreakdownRow>,
}

fn predictions_from_selected(
    selected: &[SelectedCaption],
    scenes: &[Scene],
    vocab: &Vocabulary,
) -> Vec<CorpusPrediction> {
    selected
        .iter()
        .zip(scenes)
        .filter_map(|(sel, scene)| {
            debug_assert_eq!(sel.scene_id, scene.scene_id);
            sel.caption
                .clone()
                .map(|caption| CorpusPrediction::from_caption(scene, caption, vocab))
        })
        .collect()
}

fn precision_recall_at(records: &[SpanScoreRecord], gamma: Real) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut fp, mut pos) = (0usize, 0usize, 0usize);
    for record in records {
        for span in &record.spans {
            pos += span.correct as usize;
            if crate::calibration::apply_threshold(span.score, gamma) {
                if span.correct {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (pos > 0).then(|| tp as f64 / pos as f64);
    (precision, recall)
}

/// Builds the synthetic one-object pairwise protocol: a positive scene,
/// a negative scene with the object swapped out, scored over the object
/// span of the positive scene's caption.
fn pairwise_protocol(
    config: &RunConfig,
    captioner: &Captioner,
    vocab: &Vocabulary,
    backend: &ConfidenceBackend<'_, Real>,
) -> Result<Vec<PairScore<Real>>> {
    let objects: Vec<usize> = vocab.object_inventory().iter().copied().collect();
    let attributes: Vec<usize> = vocab.attribute_inventory().iter().copied().collect();
    let mut pairs = Vec::with_capacity(config.protocol_examples);
    for i in 0..config.protocol_examples {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::stream::stream_seed(&[
            config.seed,
            0x5f0,
            i as u64,
        ]));
        let obj_pos = objects[rng.gen_range(0..objects.len())];
        let obj_neg = loop {
            let candidate = objects[rng.gen_range(0..objects.len())];
            if candidate != obj_pos {
                break candidate;
            }
        };
        let attribute = if !attributes.is_empty() && rng.gen::<f64>() < 0.5 {
            Some(attributes[rng.gen_range(0..attributes.len())])
        } else {
            None
        };
        let base_id = (1u64 << 40) + (i as u64) * 2;
        let scene_pos = Scene::new(
            base_id,
            vec![SceneInstance {
                object: obj_pos,
                attribute,
            }],
            vocab,
            config.scene_gen.max_instances,
        )?;
        let scene_neg = Scene::new(
            base_id + 1,
            vec![SceneInstance {
                object: obj_neg,
                attribute,
            }],
            vocab,
            config.scene_gen.max_instances,
        )?;
        let caption = Caption::new(
            canonical_caption(&scene_pos, vocab, captioner.grammar()),
            vocab,
        )?;
        let span = crate::domain::extract_concept_spans(&caption, vocab)
            .into_iter()
            .next()
            .ok_or_else(|| CoreError::EmptyInput("protocol caption has no concept".into()))?;
        pairs.push(span_pair_confidence(
            captioner, &scene_pos, &scene_neg, &caption, span, backend,
        )?);
    }
    Ok(pairs)
}

/// Builds the attribute-swap group protocol: two scenes sharing objects
/// and attribute words but pairing them differently, scored with the
/// sequence-mean softmax confidence.
fn winoground_protocol(
    config: &RunConfig,
    captioner: &Captioner,
    vocab: &Vocabulary,
) -> Result<Vec<WinogroundExample<Real>>> {
    let objects: Vec<usize> = vocab.object_inventory().iter().copied().collect();
    let attributes: Vec<usize> = vocab.attribute_inventory().iter().copied().collect();
    if attributes.len() < 2 || objects.len() < 2 {
        return Ok(Vec::new());
    }
    let backend: ConfidenceBackend<'_, Real> = ConfidenceBackend::Algebraic {
        measure: ConfidenceMeasure::Softmax,
        aggregation: AggregationMethod::Mean,
    };
    let mut examples = Vec::with_capacity(config.protocol_examples);
    for i in 0..config.protocol_examples {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::stream::stream_seed(&[
            config.seed,
            0x919,
            i as u64,
        ]));
        let o1 = objects[rng.gen_range(0..objects.len())];
        let o2 = loop {
            let candidate = objects[rng.gen_range(0..objects.len())];
            if candidate != o1 {
                break candidate;
            }
        };
        let a1 = attributes[rng.gen_range(0..attributes.len())];
        let a2 = loop {
            let candidate = attributes[rng.gen_range(0..attributes.len())];
            if candidate != a1 {
                break candidate;
            }
        };
        let base_id = (1u64 << 41) + (i as u64) * 2;
        let make_scene = |id: u64, first_attr: usize, second_attr: usize| {
            Scene::new(
                id,
                vec![
                    SceneInstance {
                        object: o1,
                        attribute: Some(first_attr),
                    },
                    SceneInstance {
                        object: o2,
                        attribute: Some(second_attr),
                    },
                ],
                vocab,
                2.max(config.scene_gen.max_instances),
            )
        };
        let scene_0 = make_scene(base_id, a1, a2)?;
        let scene_1 = make_scene(base_id + 1, a2, a1)?;
        let caption_0 = Caption::new(canonical_caption(&scene_0, vocab, captioner.grammar()), vocab)?;
        let caption_1 = Caption::new(canonical_caption(&scene_1, vocab, captioner.grammar()), vocab)?;
        let score = |scene: &Scene, caption: &Caption| -> Result<Real> {
            let beam = captioner.force_decode::<Real>(scene, caption)?;
            backend.sequence_score(&beam, scene)
        };
        examples.push(WinogroundExample {
            scores: [
                [score(&scene_0, &caption_0)?, score(&scene_0, &caption_1)?],
                [score(&scene_1, &caption_0)?, score(&scene_1, &caption_1)?],
            ],
        });
    }
    Ok(examples)
}

/// Computes every reported metric: CHAIR and diversity per method, the
/// `b > 1` subset breakdown, validation AUC per confidence variant,
/// test-side precision at the chosen thresholds, and the pairwise /
/// group matching protocols. Writes metrics.json, report.csv, and
/// breakdown.csv.
pub fn cmd_evaluate(config: &RunConfig, out_dir: &Path) -> Result<PipelineMetrics> {
    config.validate()?;
    let paths = Paths::new(out_dir);
    let vocab = load_vocab(&paths)?;
    let captioner = config.captioner()?;
    let scenes = load_scenes(&paths, Split::Test)?;
    let beam_sets = load_beams(&paths, Split::Test)?;

    let training_references: Vec<Caption> = {
        let mut refs = Vec::new();
        for split in [Split::TrainCaptioner, Split::TrainEstimator] {
            for set in load_references(&paths, split)? {
                refs.extend(set.references().iter().cloned());
            }
        }
        refs
    };

    // Standard: the top beam of every scene.
    let standard_predictions: Vec<CorpusPrediction> = scenes
        .iter()
        .zip(&beam_sets)
        .map(|(scene, set)| {
            CorpusPrediction::from_caption(scene, set.beams[0].caption.clone(), &vocab)
        })
        .collect();

    let mut methods = BTreeMap::new();
    methods.insert(
        "standard".to_string(),
        MethodMetrics {
            chair_s: chair_s(&standard_predictions)?,
            chair_i: chair_i(&standard_predictions)?,
            diversity: diversity(&standard_predictions, &training_references)?,
            gamma: None,
            moved_off_top_beam: 0,
            fallbacks: 0,
            test_precision: None,
            test_recall: None,
        },
    );

    let mut breakdown = Vec::new();
    breakdown.push(BreakdownRow {
        subset: "full".into(),
        scenes: standard_predictions.len(),
        method: "standard".into(),
        chair_s: chair_s(&standard_predictions)?,
        chair_i: chair_i(&standard_predictions)?,
    });

    for kind in BackendKind::BOTH {
        let selected: Vec<SelectedCaption> = read_jsonl(&paths.selected(kind))?;
        let decisions: Vec<RerankDecision<Real>> = read_jsonl(&paths.decisions(kind))?;
        let calibration: CalibrationResult<Real> = read_json(&paths.calibration(kind))?;
        let gamma = calibration.selection.gamma_or_never_reject();
        let predictions = predictions_from_selected(&selected, &scenes, &vocab);
        let moved: Vec<u64> = decisions
            .iter()
            .filter(|d| d.selected_index > 0)
            .map(|d| d.scene_id)
            .collect();
        let fallbacks = decisions.iter().filter(|d| d.fallback_used).count();

        let test_scores: Vec<SpanScoreRecord> = read_jsonl(&paths.scores(Split::Test, kind))?;
        let (test_precision, test_recall) = precision_recall_at(&test_scores, gamma);

        methods.insert(
            kind.method_label().to_string(),
            MethodMetrics {
                chair_s: chair_s(&predictions)?,
                chair_i: chair_i(&predictions)?,
                diversity: diversity(&predictions, &training_references)?,
                gamma: Some(gamma),
                moved_off_top_beam: moved.len(),
                fallbacks,
                test_precision,
                test_recall,
            },
        );
        breakdown.push(BreakdownRow {
            subset: "full".into(),
            scenes: predictions.len(),
            method: kind.method_label().into(),
            chair_s: chair_s(&predictions)?,
            chair_i: chair_i(&predictions)?,
        });

        // The subset where this backend moved off the top beam, compared
        // against Standard on the same scenes.
        if !moved.is_empty() {
            let moved_set: std::collections::HashSet<u64> = moved.iter().copied().collect();
            let standard_subset: Vec<CorpusPrediction> = standard_predictions
                .iter()
                .filter(|p| moved_set.contains(&p.scene_id))
                .cloned()
                .collect();
            let method_subset: Vec<CorpusPrediction> = predictions
                .iter()
                .filter(|p| moved_set.contains(&p.scene_id))
                .cloned()
                .collect();
            breakdown.push(BreakdownRow {
                subset: format!("moved-{}", kind.method_label()),
                scenes: standard_subset.len(),
                method: "standard".into(),
                chair_s: chair_s(&standard_subset)?,
                chair_i: chair_i(&standard_subset)?,
            });
            breakdown.push(BreakdownRow {
                subset: format!("moved-{}", kind.method_label()),
                scenes: method_subset.len(),
                method: kind.method_label().into(),
                chair_s: chair_s(&method_subset)?,
                chair_i: chair_i(&method_subset)?,
            });
        }
    }

    // AUC of every confidence variant on the validation split. Algebraic
    // variants rescore the stored beams; the learned variant reuses its
    // validation score file.
    let mut validation_auc = BTreeMap::new();
    {
        let val_scenes = load_scenes(&paths, Split::Validation)?;
        let val_beams = load_beams(&paths, Split::Validation)?;
        for (label, measure) in [
            ("softmax-min", ConfidenceMeasure::Softmax),
            ("logit-min", ConfidenceMeasure::Logit),
            ("entropy-min", ConfidenceMeasure::Entropy),
            ("energy-min", ConfidenceMeasure::energy()),
        ] {
            let backend: ConfidenceBackend<'_, Real> = ConfidenceBackend::Algebraic {
                measure,
                aggregation: AggregationMethod::Min,
            };
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (scene, set) in val_scenes.iter().zip(&val_beams) {
                for cs in backend.span_scores(&set.beams[0], scene, &vocab)? {
                    scores.push(cs.score);
                    labels.push(scene.contains_object(cs.concept));
                }
            }
            let set = ScoredLabelSet::new(scores, labels)?;
            validation_auc.insert(
                label.to_string(),
                crate::calibration::auc(&crate::calibration::pr_curve(&set)?),
            );
        }
        let learned_records: Vec<SpanScoreRecord> =
            read_jsonl(&paths.scores(Split::Validation, BackendKind::Learned))?;
        let set = scored_label_set(&learned_records)?;
        validation_auc.insert(
            "learned-mean".to_string(),
            crate::calibration::auc(&crate::calibration::pr_curve(&set)?),
        );
    }

    // Synthetic matching protocols.
    let estimator = load_estimator(&paths)?;
    let algebraic_backend = make_backend(config, BackendKind::Algebraic, None)?;
    let learned_backend = make_backend(config, BackendKind::Learned, Some(&estimator))?;
    let pairwise_algebraic = pairwise_protocol(config, &captioner, &vocab, &algebraic_backend)?;
    let pairwise_learned = pairwise_protocol(config, &captioner, &vocab, &learned_backend)?;
    let winoground_examples = winoground_protocol(config, &captioner, &vocab)?;
    let protocols = ProtocolMetrics {
        pairwise_examples: pairwise_algebraic.len(),
        pairwise_accuracy_algebraic: pairwise_accuracy(&pairwise_algebraic)?,
        pairwise_accuracy_learned: pairwise_accuracy(&pairwise_learned)?,
        winoground_examples: winoground_examples.len(),
        winoground_algebraic: winoground_scores(&winoground_examples)?,
    };

    let metrics = PipelineMetrics {
        methods,
        validation_auc,
        protocols,
        breakdown,
    };
    write_json(&paths.metrics(), &metrics)?;
    fs::write(paths.report(), render_report(&metrics))?;
    fs::write(paths.breakdown(), render_breakdown(&metrics))?;
    Ok(metrics)
}

/// The three-method comparison table as CSV, one row per method.
pub fn render_report(metrics: &PipelineMetrics) -> String {
    let mut out =
        String::from("method,chair_s,chair_i,vocab_size,pct_novel,div2,re4,gamma,moved,fallbacks\n");
    for method in ["standard", "tlc-a", "tlc-l"] {
        if let Some(m) = metrics.methods.get(method) {
            out.push_str(&format!(
                "{method},{},{},{},{},{},{},{},{},{}\n",
                m.chair_s,
                m.chair_i,
                m.diversity.vocab_size,
                m.diversity.pct_novel,
                m.diversity.div2,
                m.diversity.re4,
                m.gamma.map_or(String::new(), |g| g.to_string()),
                m.moved_off_top_beam,
                m.fallbacks,
            ));
        }
    }
    out
}

pub fn render_breakdown(metrics: &PipelineMetrics) -> String {
    let mut out = String::from("subset,scenes,method,chair_s,chair_i\n");
    for row in &metrics.breakdown {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.subset, row.scenes, row.method, row.chair_s, row.chair_i
        ));
    }
    out
}

/// Re-renders report.csv and breakdown.csv from metrics.json.
pub fn cmd_report(out_dir: &Path) -> Result<String> {
    let paths = Paths::new(out_dir);
    let metrics: PipelineMetrics = read_json(&paths.metrics())?;
    let report = render_report(&metrics);
    fs::write(paths.report(), &report)?;
    fs::write(paths.breakdown(), render_breakdown(&metrics))?;
    Ok(report)
}

/// The whole workflow end to end; equivalent to running the subcommands
/// in sequence on the same output directory.
pub fn cmd_pipeline(config: &RunConfig, out_dir: &Path) -> Result<PipelineMetrics> {
    stage("generate", cmd_generate(config, out_dir))?;
    stage("caption", cmd_caption(config, out_dir, Split::Validation))?;
    stage("caption", cmd_caption(config, out_dir, Split::Test))?;
    stage("train-estimator", cmd_train_estimator(config, out_dir))?;
    for kind in BackendKind::BOTH {
        stage("score", cmd_score(config, out_dir, Split::Validation, kind))?;
        stage("score", cmd_score(config, out_dir, Split::Test, kind))?;
        stage("calibrate", cmd_calibrate(config, out_dir, kind))?;
        stage("rerank", cmd_rerank(config, out_dir, kind))?;
    }
    stage("evaluate", cmd_evaluate(config, out_dir))
}

/// Resolves γ the way the re-ranker will use it.
pub fn effective_gamma(selection: &ThresholdSelection<Real>) -> Real {
    selection.gamma_or_never_reject()
}
