//! Run configuration: schema-validated JSON in, validated settings out.
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. `RunConfig::validate` must pass before any work starts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric mode for a whole run. `F64` is used by tests and gradient
/// checking; `F32` rounds every stored value (activations, gradients,
/// parameters) to 32-bit precision and is the training default. The mode
/// is process-global and never mixed within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Parses the `MSGBART_MODE` environment value (`f32` or `f64`).
    pub fn from_env_value(v: &str) -> Result<Precision> {
        match v {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "MSGBART_MODE must be 'f32' or 'f64', got '{other}'"
            ))),
        }
    }
}

/// How the two pointer gates pair with the two decoder distributions.
/// `AsPrinted` multiplies the gate derived from the text-decoder state
/// into the graph-side distribution (and vice versa); `Aligned` pairs
/// each gate with the distribution from the same decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointerPairing {
    AsPrinted,
    Aligned,
}

/// Pointer gating mode: two softmax-coupled gates, a single sigmoid gate
/// with its complement, or a fixed (0.5, 0.5) mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointerMode {
    Multi,
    Single,
    None,
}

/// Length normalization applied to finished beam hypotheses: `Plain`
/// divides the log-probability by `len^penalty`; `Gnmt` divides by
/// `((5 + len) / 6)^penalty`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthNorm {
    Plain,
    Gnmt,
}

/// Synthetic video-world shape. One "video" is a sequence of frames, each
/// carrying an object set and typed relations; features are derived from
/// object sets only, so relation identity is recoverable solely from the
/// scene graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Seed for corpus generation, independent of the run seed so the same
    /// world can be trained under different initializations.
    #[serde(default = "default_world_seed")]
    pub seed: u64,
    #[serde(default = "default_videos")]
    pub videos: usize,
    #[serde(default = "default_object_vocab")]
    pub object_vocab: usize,
    #[serde(default = "default_relations_per_class")]
    pub relations_per_class: usize,
    #[serde(default = "default_frames_per_video")]
    pub frames_per_video: usize,
    #[serde(default = "default_window_ratio")]
    pub window_ratio: usize,
    #[serde(default = "default_dialogue_turns")]
    pub dialogue_turns: usize,
    #[serde(default = "default_feature_width")]
    pub feature_width: usize,
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
}

fn default_world_seed() -> u64 {
    42
}
fn default_videos() -> usize {
    500
}
fn default_object_vocab() -> usize {
    12
}
fn default_relations_per_class() -> usize {
    4
}
fn default_frames_per_video() -> usize {
    8
}
fn default_window_ratio() -> usize {
    4
}
fn default_dialogue_turns() -> usize {
    3
}
fn default_feature_width() -> usize {
    16
}
fn default_feature_noise() -> f64 {
    0.1
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: default_world_seed(),
            videos: default_videos(),
            object_vocab: default_object_vocab(),
            relations_per_class: default_relations_per_class(),
            frames_per_video: default_frames_per_video(),
            window_ratio: default_window_ratio(),
            dialogue_turns: default_dialogue_turns(),
            feature_width: default_feature_width(),
            feature_noise: default_feature_noise(),
        }
    }
}

impl WorldConfig {
    /// Number of coarse windows per video.
    pub fn coarse_windows(&self) -> usize {
        self.frames_per_video / self.window_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 {
            return Err(Error::Config("world.videos must be >= 1".into()));
        }
        if self.object_vocab < 2 {
            return Err(Error::Config("world.object_vocab must be >= 2".into()));
        }
        if self.relations_per_class == 0 {
            return Err(Error::Config(
                "world.relations_per_class must be >= 1".into(),
            ));
        }
        if self.frames_per_video == 0 || self.window_ratio == 0 {
            return Err(Error::Config(
                "world.frames_per_video and world.window_ratio must be >= 1".into(),
            ));
        }
        if self.frames_per_video % self.window_ratio != 0 {
            return Err(Error::Config(format!(
                "world.frames_per_video ({}) must be divisible by world.window_ratio ({})",
                self.frames_per_video, self.window_ratio
            )));
        }
        if self.dialogue_turns == 0 {
            return Err(Error::Config("world.dialogue_turns must be >= 1".into()));
        }
        if self.feature_width == 0 || self.feature_width % 2 != 0 {
            return Err(Error::Config(
                "world.feature_width must be a positive even number (visual/audio halves)".into(),
            ));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(Error::Config("world.feature_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Model shape and decoding behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_layers")]
    pub decoder_layers: usize,
    /// Hidden width of every feed-forward sublayer (default 4 * d_model).
    #[serde(default)]
    pub ffn_width: Option<usize>,
    /// Hard cap on encoder input length (tokens, including markers).
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Decode-time cap on generated tokens.
    #[serde(default = "default_max_decode_len")]
    pub max_decode_len: usize,
    /// Pre-norm (true) or post-norm (false) residual convention, applied
    /// uniformly to every attention/feed-forward block in the model.
    #[serde(default = "default_true")]
    pub pre_norm: bool,
    /// Whether graph-attention source sets include a self-loop.
    #[serde(default = "default_true")]
    pub self_loop: bool,
    #[serde(default = "default_pointer_mode")]
    pub pointer_mode: PointerMode,
    #[serde(default = "default_pointer_pairing")]
    pub pointer_pairing: PointerPairing,
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    #[serde(default = "default_length_penalty")]
    pub length_penalty: f64,
    #[serde(default = "default_length_norm")]
    pub length_norm: LengthNorm,
}

fn default_d_model() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_layers() -> usize {
    2
}
fn default_max_seq_len() -> usize {
    64
}
fn default_max_decode_len() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_pointer_mode() -> PointerMode {
    PointerMode::Multi
}
fn default_pointer_pairing() -> PointerPairing {
    PointerPairing::AsPrinted
}
fn default_beam_width() -> usize {
    6
}
fn default_length_penalty() -> f64 {
    0.6
}
fn default_length_norm() -> LengthNorm {
    LengthNorm::Plain
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: default_d_model(),
            heads: default_heads(),
            encoder_layers: default_layers(),
            decoder_layers: default_layers(),
            ffn_width: None,
            max_seq_len: default_max_seq_len(),
            max_decode_len: default_max_decode_len(),
            pre_norm: true,
            self_loop: true,
            pointer_mode: default_pointer_mode(),
            pointer_pairing: default_pointer_pairing(),
            beam_width: default_beam_width(),
            length_penalty: default_length_penalty(),
            length_norm: default_length_norm(),
        }
    }
}

impl ModelConfig {
    pub fn ffn(&self) -> usize {
        self.ffn_width.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config("model.d_model and model.heads must be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("model layer counts must be >= 1".into()));
        }
        if self.ffn() == 0 {
            return Err(Error::Config("model.ffn_width must be >= 1".into()));
        }
        if self.max_seq_len < 4 {
            return Err(Error::Config("model.max_seq_len must be >= 4".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("model.max_decode_len must be >= 1".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("model.beam_width must be >= 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::Config("model.length_penalty must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ablation switches. Every switch changes model output when flipped on a
/// probe batch; disabled similarity replaces learned scores with uniform
/// ones (lowest-index argmax), disabled encoder/decoder branches remove
/// the corresponding memory block entirely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_true")]
    pub gat: bool,
    #[serde(default = "default_true")]
    pub node_similarity: bool,
    #[serde(default = "default_true")]
    pub triplet_similarity: bool,
    #[serde(default = "default_true")]
    pub graph_encoder: bool,
    #[serde(default = "default_true")]
    pub graph_decoder: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            gat: true,
            node_similarity: true,
            triplet_similarity: true,
            graph_encoder: true,
            graph_decoder: true,
        }
    }
}

/// Optimizer and loop settings. Two parameter groups are maintained: the
/// text encoder-decoder trains at `lr_lm`, everything fusion-, graph- and
/// pointer-related at `lr_gvp` (one order of magnitude apart by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_lm")]
    pub lr_lm: f64,
    #[serde(default = "default_lr_gvp")]
    pub lr_gvp: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Dev instances decoded at each log point for the accuracy column.
    #[serde(default = "default_dev_instances")]
    pub dev_instances: usize,
    #[serde(default = "default_split_ratios")]
    pub split_ratios: [f64; 3],
}

fn default_steps() -> usize {
    1000
}
fn default_batch_size() -> usize {
    32
}
fn default_lr_lm() -> f64 {
    6.25e-4
}
fn default_lr_gvp() -> f64 {
    2.5e-3
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_log_every() -> usize {
    50
}
fn default_dev_instances() -> usize {
    64
}
fn default_split_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: default_steps(),
            batch_size: default_batch_size(),
            lr_lm: default_lr_lm(),
            lr_gvp: default_lr_gvp(),
            weight_decay: default_weight_decay(),
            log_every: default_log_every(),
            dev_instances: default_dev_instances(),
            split_ratios: default_split_ratios(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be >= 1".into()));
        }
        if !(self.lr_lm > 0.0) || !(self.lr_gvp > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("train.log_every must be >= 1".into()));
        }
        let s: f64 = self.split_ratios.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::Config(format!(
                "train.split_ratios must be non-negative and sum to 1, got {:?}",
                self.split_ratios
            )));
        }
        Ok(())
    }
}

/// Top-level run configuration. The same struct is embedded verbatim in
/// checkpoints so a saved model carries everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seed() -> u64 {
    42
}
fn default_precision() -> Precision {
    Precision::F32
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            precision: default_precision(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            ablation: AblationConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config from JSON text. Unknown keys are a
    /// config error, not a warning.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical single-line JSON used in checkpoints and reports. Field
    /// order is fixed by the struct definition, so equal configs always
    /// serialize to identical bytes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.world.coarse_windows(), 2);
        assert_eq!(cfg.model.ffn(), 256);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_json(r#"{"seed": 1, "wrold": {}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("wrold"), "diagnostic should name the bad key: {msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn nested_unknown_key_rejected() {
        let err = RunConfig::from_json(r#"{"model": {"d_mdoel": 64}}"#).unwrap_err();
        assert!(err.to_string().contains("d_mdoel"));
    }

    #[test]
    fn head_divisibility_enforced() {
        let err = RunConfig::from_json(r#"{"model": {"d_model": 62, "heads": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn window_ratio_divisibility_enforced() {
        let err =
            RunConfig::from_json(r#"{"world": {"frames_per_video": 9, "window_ratio": 4}}"#)
                .unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn split_ratios_must_sum_to_one() {
        let err =
            RunConfig::from_json(r#"{"train": {"split_ratios": [0.5, 0.1, 0.1]}}"#).unwrap_err();
        assert!(err.to_string().contains("split_ratios"));
    }

    #[test]
    fn canonical_json_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.canonical_json());
    }

    #[test]
    fn precision_env_values() {
        assert_eq!(Precision::from_env_value("f32").unwrap(), Precision::F32);
        assert_eq!(Precision::from_env_value("f64").unwrap(), Precision::F64);
        assert!(Precision::from_env_value("f16").is_err());
    }
}
