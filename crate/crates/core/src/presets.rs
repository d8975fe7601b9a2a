// SPDX-License-Identifier: MIT OR Apache-2.0

//! Default hyperparameters of the pipelines.

/// Candidate weights tried by automatic neglect-loss weight selection.
pub const EDIT_LAMBDA_SWEEP: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5];

/// Threshold `T` of the semi-binary mask.
pub const MASK_THRESHOLD: f64 = 0.1;

/// Sigmoid temperature of the semi-binary mask.
pub const MASK_TEMPERATURE: f64 = 20.0;

/// Per-box weight is this over the square root of the box area ratio.
pub const BOX_LAMBDA_SCALE: f64 = 0.15;

/// Weight of the relevance bonus when ranking basis candidates.
pub const FUSE_LAMBDA: f64 = 0.1;

/// Nouns with normalized relevance below this join the semantic set.
pub const SEMANTIC_THRESHOLD: f64 = 0.7;

/// Explainability weight for prompt tuning on a ViT-B/16 backbone.
pub const PROMPT_LAMBDA_VIT_B16: f64 = 1.0;

/// Explainability weight for prompt tuning on every other backbone.
pub const PROMPT_LAMBDA_OTHER: f64 = 3.0;

/// Context length of learned prompts on full-size encoders.
pub const PROMPT_CONTEXT_TOKENS: usize = 16;

/// Most counterfactual classes sampled per image.
pub const MAX_NEGATIVE_CLASSES: usize = 16;

/// Relevance ratios with a smaller denominator are skipped.
pub const DENOMINATOR_EPS: f64 = 1e-12;

/// Prompt-tuning weight for a backbone name such as `ViT-B/16` or `RN50`.
pub fn prompt_lambda(backbone: &str) -> f64 {
    let key: String = backbone
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    if key == "vitb16" {
        PROMPT_LAMBDA_VIT_B16
    } else {
        PROMPT_LAMBDA_OTHER
    }
}

/// `0.15 / sqrt(r)`.
pub fn box_lambda(area_ratio: f64) -> f64 {
    BOX_LAMBDA_SCALE / area_ratio.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_lambda() {
        assert_eq!(prompt_lambda("ViT-B/16"), 1.0);
        assert_eq!(prompt_lambda("vit_b16"), 1.0);
        assert_eq!(prompt_lambda("ViT-B/32"), 3.0);
        assert_eq!(prompt_lambda("RN50"), 3.0);
    }
}
