//! CTC loss, decoding, n-gram fusion and fusion-weight tuning.

mod decode;
mod lm;
mod loss;
mod tune;
mod vocab;

use std::io::Write;

pub use decode::{beam_decode, greedy_decode, BeamHypothesis, Fusion};
pub use lm::{NgramLm, SENTENCE_END, SENTENCE_START, UNKNOWN, UNKNOWN_FLOOR_LOG10};
pub use loss::{ctc_loss, min_frames, CtcOutput};
pub use tune::{tune_lm, SearchSpace, TuneResult};
pub use vocab::{Vocabulary, BLANK, WORD_DELIMITER};

use crate::error::Result;

/// Writes `utterance_id \t hypothesis \t score` rows with a header.
pub fn write_decodes<'a>(
    out: &mut impl Write,
    rows: impl IntoIterator<Item = (&'a str, &'a str, f64)>,
) -> Result<()> {
    writeln!(out, "utterance_id\thypothesis\tscore")?;
    for (id, hyp, score) in rows {
        writeln!(out, "{id}\t{hyp}\t{score:.6}")?;
    }
    Ok(())
}
