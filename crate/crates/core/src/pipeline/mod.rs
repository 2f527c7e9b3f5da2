//! Inference orchestration: reference embedding, intensity-gated retrieval,
//! prompt assembly, token generation, flow-matching mel synthesis.
//!
//! Retrieval only selects a prompt. Everything after [`assemble_prompt`]
//! depends on the assembly alone, which [`run_from_assembly`] exposes
//! directly.

mod tokens;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tokens::{
    mock_generate_tokens, synthetic_record_tokens, write_fixture_tokens, InMemoryTokens, MockTokenGenerator,
    TokenError, TokenFileMap, TokenGenerator, TokenSource,
};

use crate::embedding_store::{EmbeddingDatabase, EmotionEmbedding, IntensityLevel};
use crate::flow_matching::{
    encode_frames, generate_mel, load_checkpoint, FlowError, FrameSequence, SpeakerEmbedding, VectorFieldModel,
};
use crate::io::atomic_write;
use crate::retrieval::{Method, RetrievalEngine, RetrievalError, RetrievalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reference,
    Retrieval,
    PromptAssembly,
    Generation,
    FlowMatching,
    Output,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Reference => "reference",
            Stage::Retrieval => "retrieval",
            Stage::PromptAssembly => "prompt_assembly",
            Stage::Generation => "generation",
            Stage::FlowMatching => "flow_matching",
            Stage::Output => "output",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Tokens(#[from] TokenError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// A failure tagged with the pipeline stage it came from.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

fn at<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

/// Supplies the reference emotion embedding.
pub trait EmbeddingProvider {
    fn reference_embedding(&self) -> Result<EmotionEmbedding, PipelineError>;
}

/// Reads a JSON file holding either an array of numbers or an object with
/// an `embedding` array.
#[derive(Debug, Clone)]
pub struct JsonEmbeddingFile(pub PathBuf);

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingJson {
    Bare(EmotionEmbedding),
    Wrapped { embedding: EmotionEmbedding },
}

impl EmbeddingProvider for JsonEmbeddingFile {
    fn reference_embedding(&self) -> Result<EmotionEmbedding, PipelineError> {
        let text = std::fs::read_to_string(&self.0).map_err(at(Stage::Reference))?;
        match serde_json::from_str::<EmbeddingJson>(&text) {
            Ok(EmbeddingJson::Bare(e) | EmbeddingJson::Wrapped { embedding: e }) => Ok(e),
            Err(e) => Err(at(Stage::Reference)(StageError::Invalid(format!(
                "{}: not an embedding: {e}",
                self.0.display()
            )))),
        }
    }
}

impl EmbeddingProvider for EmotionEmbedding {
    fn reference_embedding(&self) -> Result<EmotionEmbedding, PipelineError> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    pub reference_embedding: EmotionEmbedding,
    pub target_text: String,
    pub intensity: Option<IntensityLevel>,
    pub method: Method,
    /// Timbre conditioning for the flow-matching stage.
    pub speaker: SpeakerEmbedding,
    pub seed: u64,
}

impl SynthesisRequest {
    pub fn new(
        reference_embedding: EmotionEmbedding,
        target_text: impl Into<String>,
        intensity: Option<IntensityLevel>,
        method: Method,
        speaker: SpeakerEmbedding,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let target_text = target_text.into();
        if target_text.is_empty() {
            return Err(at(Stage::PromptAssembly)(StageError::Invalid("target text is empty".into())));
        }
        Ok(Self {
            reference_embedding,
            target_text,
            intensity,
            method,
            speaker,
            seed,
        })
    }
}

/// What the token generator sees.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptAssembly {
    pub record_id: String,
    pub prompt_tokens: FrameSequence,
    pub prompt_text: String,
    pub target_text: String,
    pub speaker: SpeakerEmbedding,
}

pub fn assemble_prompt(
    result: &RetrievalResult,
    db: &EmbeddingDatabase,
    request: &SynthesisRequest,
    tokens: &dyn TokenSource,
) -> Result<PromptAssembly, PipelineError> {
    let record = db.get(&result.record_id).ok_or_else(|| {
        at(Stage::PromptAssembly)(StageError::Invalid(format!(
            "retrieved record {} is not in the database",
            result.record_id
        )))
    })?;
    let prompt_tokens = tokens.tokens_for(&record.id).map_err(at(Stage::PromptAssembly))?;
    Ok(PromptAssembly {
        record_id: record.id.clone(),
        prompt_tokens,
        prompt_text: record.transcript.clone(),
        target_text: request.target_text.clone(),
        speaker: request.speaker.clone(),
    })
}

/// Where the flow-matching model comes from. A checkpoint path is read
/// inside the flow-matching stage, so a bad file is attributed to it.
pub enum FlowModelSource<'a> {
    Checkpoint(PathBuf),
    Loaded(&'a VectorFieldModel),
}

/// Wall-clock nanoseconds spent in each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub retrieval: u64,
    pub prompt_assembly: u64,
    pub generation: u64,
    pub flow_matching: u64,
    pub output: u64,
}

impl StageTimings {
    pub fn total(&self) -> u64 {
        self.retrieval + self.prompt_assembly + self.generation + self.flow_matching + self.output
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub retrieved_id: String,
    pub similarity: f64,
    pub method: Method,
    /// Requested intensity gate.
    pub intensity: Option<IntensityLevel>,
    pub retrieved_intensity: IntensityLevel,
    pub retrieved_emotion: String,
    pub stage_timings_ns: StageTimings,
    pub wall_time_ns: u64,
    pub output_path: Option<String>,
    pub mel_frames: usize,
    pub seed: u64,
}

pub struct RunOutput {
    pub report: RunReport,
    pub mel: FrameSequence,
}

/// Assets shared by inference runs. Immutable, so concurrent requests may
/// share one instance.
pub struct InferenceAssets<'a> {
    pub engine: &'a RetrievalEngine,
    pub tokens: &'a dyn TokenSource,
    pub model: FlowModelSource<'a>,
    pub generator: &'a dyn TokenGenerator,
    pub ode_steps: usize,
}

fn elapsed_ns(since: Instant) -> u64 {
    since.elapsed().as_nanos().min(u64::MAX as u128) as u64
}

fn generate_stage(
    assembly: &PromptAssembly,
    generator: &dyn TokenGenerator,
    seed: u64,
) -> Result<FrameSequence, PipelineError> {
    generator.generate(assembly, seed).map_err(at(Stage::Generation))
}

fn flow_stage(
    assembly: &PromptAssembly,
    generated: &FrameSequence,
    model: &VectorFieldModel,
    ode_steps: usize,
    seed: u64,
) -> Result<FrameSequence, PipelineError> {
    generate_mel(model, generated, &assembly.speaker, ode_steps, seed).map_err(at(Stage::FlowMatching))
}

/// Generator and flow-matching stages for an already assembled prompt.
pub fn run_from_assembly(
    assembly: &PromptAssembly,
    generator: &dyn TokenGenerator,
    model: &VectorFieldModel,
    ode_steps: usize,
    seed: u64,
) -> Result<FrameSequence, PipelineError> {
    let generated = generate_stage(assembly, generator, seed)?;
    flow_stage(assembly, &generated, model, ode_steps, seed)
}

/// Runs every stage and, if `output_path` is given, writes the mel artifact
/// atomically.
pub fn run_inference(
    request: &SynthesisRequest,
    assets: &InferenceAssets<'_>,
    output_path: Option<&Path>,
) -> Result<RunOutput, PipelineError> {
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let result = assets
        .engine
        .retrieve(&request.reference_embedding, request.intensity, request.method)
        .map_err(at(Stage::Retrieval))?;
    timings.retrieval = elapsed_ns(t);

    let t = Instant::now();
    let db = assets.engine.database();
    let assembly = assemble_prompt(&result, db, request, assets.tokens)?;
    let record = &db.records()[result.record_index];
    timings.prompt_assembly = elapsed_ns(t);

    let t = Instant::now();
    let generated = generate_stage(&assembly, assets.generator, request.seed)?;
    timings.generation = elapsed_ns(t);

    let t = Instant::now();
    let loaded;
    let model = match &assets.model {
        FlowModelSource::Loaded(m) => *m,
        FlowModelSource::Checkpoint(path) => {
            loaded = load_checkpoint(path).map_err(at(Stage::FlowMatching))?;
            &loaded
        }
    };
    let mel = flow_stage(&assembly, &generated, model, assets.ode_steps, request.seed)?;
    timings.flow_matching = elapsed_ns(t);

    let t = Instant::now();
    if let Some(path) = output_path {
        let bytes = encode_frames(&mel).map_err(at(Stage::Output))?;
        atomic_write(path, &bytes).map_err(at(Stage::Output))?;
    }
    timings.output = elapsed_ns(t);

    let report = RunReport {
        retrieved_id: result.record_id,
        similarity: result.similarity,
        method: result.method,
        intensity: request.intensity,
        retrieved_intensity: record.intensity,
        retrieved_emotion: record.emotion_label.clone(),
        stage_timings_ns: timings,
        wall_time_ns: elapsed_ns(start),
        output_path: output_path.map(|p| p.display().to_string()),
        mel_frames: mel.len(),
        seed: request.seed,
    };
    Ok(RunOutput { report, mel })
}
