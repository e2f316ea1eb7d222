//! Corpus-to-id conversion shared by training, evaluation and translation.

use crate::corpus::{prepend_target_tag, CorpusError, ParallelCorpus, Sentence, Side, Vocabulary};
use crate::eval::EvalSet;
use crate::trainer::EncodedPair;

/// Source ids with the `<2tgt>` indicator in front.
pub fn encode_source(s: &Sentence, target_lang: &str, vocab: &Vocabulary) -> Result<Vec<usize>, CorpusError> {
    let tagged = prepend_target_tag(s, target_lang, vocab.languages())?;
    Ok(vocab.encode_sentence(&tagged, Side::Source))
}

pub fn encode_pairs(corpus: &ParallelCorpus, vocab: &Vocabulary) -> Result<Vec<EncodedPair>, CorpusError> {
    corpus
        .pairs
        .iter()
        .map(|p| {
            Ok(EncodedPair {
                source: encode_source(&p.source, &p.target.language, vocab)?,
                target: vocab.encode_sentence(&p.target, Side::Target),
            })
        })
        .collect()
}

/// Sources of `corpus` encoded for decoding, references kept as tokens.
pub fn eval_set(direction: &str, corpus: &ParallelCorpus, vocab: &Vocabulary) -> Result<EvalSet, CorpusError> {
    let mut set = EvalSet { direction: direction.to_string(), ..Default::default() };
    for p in &corpus.pairs {
        set.sources.push(encode_source(&p.source, &p.target.language, vocab)?);
        set.references.push(p.target.tokens.clone());
    }
    Ok(set)
}
