//! Fine-tuning heads on top of a pretrained trunk: CTC recognition,
//! sequence-to-sequence translation and utterance classification.

pub mod bpe;
mod classifier;
mod common;
mod ctc_head;
mod seq2seq;

pub use bpe::Bpe;
pub use classifier::{mean_pool, predict, score_predictions, ClassifierConfig, ClassifierFinetuner, ClassifierModel, LabelSource};
pub use common::{draw_batch, FinetuneConfig};
pub use ctc_head::{decode_log_probs, score_transcripts, transcribe, CtcFinetuner, CtcHeadConfig, CtcModel, Decoder};
pub use seq2seq::{score_translations, start_token, translate, Seq2SeqConfig, Seq2SeqFinetuner, Seq2SeqModel, TranslationMode};

/// One fine-tuning update as written to the metrics TSV.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// Mean loss over the items that contributed.
    pub loss: f64,
    /// Utterances that contributed (skipped ones excluded).
    pub items: usize,
    pub grad_norm: f64,
}

impl StepReport {
    pub const TSV_HEADER: &'static str = "step\tlr\tloss\titems\tgrad_norm";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{}\t{:.6}",
            self.step, self.lr, self.loss, self.items, self.grad_norm
        )
    }
}
