use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaArch {
    /// Single affine map to the halting logit.
    OneLayer,
    /// affine → tanh → affine → tanh → affine, widths `d_in → d → d/2 → 1`.
    ThreeLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaInput {
    /// `λ_i = Λ(h_i)`.
    SingleH,
    /// `λ_i = Λ([h_i, h_{i−1}])`.
    ConcatHPrev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// One head for every layer.
    Shared,
    /// An independent head per layer.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum number of step-cell applications `n`.
    pub max_layers: usize,
    pub num_classes: usize,
    pub lambda_arch: LambdaArch,
    pub lambda_input: LambdaInput,
    pub classifier_mode: ClassifierMode,
    #[serde(default = "default_dropout")]
    pub classifier_dropout: f64,
    /// When set, the halting head's output bias starts at `logit(p)` so that
    /// initial halting probabilities sit near the prior.
    #[serde(default = "default_lambda_init")]
    pub lambda_init_prior: Option<f64>,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_lambda_init() -> Option<f64> {
    Some(0.1)
}

fn default_init_seed() -> u64 {
    0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            max_seq_len: 32,
            d_model: 64,
            n_heads: 2,
            d_ff: 128,
            max_layers: 12,
            num_classes: 2,
            lambda_arch: LambdaArch::ThreeLayer,
            lambda_input: LambdaInput::ConcatHPrev,
            classifier_mode: ClassifierMode::Shared,
            classifier_dropout: default_dropout(),
            lambda_init_prior: default_lambda_init(),
            init_seed: default_init_seed(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_layers < 1 {
            return fail("max_layers must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return fail("vocab_size, max_seq_len and d_ff must be positive".into());
        }
        if self.lambda_arch == LambdaArch::ThreeLayer && self.d_model < 2 {
            return fail("three-layer halting head needs d_model >= 2".into());
        }
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return fail(format!("classifier_dropout {} outside [0, 1)", self.classifier_dropout));
        }
        if let Some(p) = self.lambda_init_prior {
            if !(p > 0.0 && p < 1.0) {
                return fail(format!("lambda_init_prior {p} outside (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lambda_input_width(&self) -> usize {
        match self.lambda_input {
            LambdaInput::SingleH => self.d_model,
            LambdaInput::ConcatHPrev => 2 * self.d_model,
        }
    }
}
