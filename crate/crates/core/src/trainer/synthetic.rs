use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::TrainingExample;
use crate::tokens::{BEGIN, END};

const INTENT_WORDS: usize = 4;
const STYLE_WORDS: usize = 4;
const STYLE_POOL: usize = 40;

/// A linearly separable toy corpus. Each conversation owns a set of intent
/// words; its pair members carry subsets of them in shuffled order, while its
/// hard negatives keep the original phrasing words but swap in decoy intent
/// words that appear nowhere else.
pub fn synthetic_corpus(count: usize, hard_negatives: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..STYLE_POOL).map(|i| format!("style{i}")).collect();
    let wrap = |body: Vec<String>| {
        let mut seq = vec![BEGIN.to_string()];
        seq.extend(body);
        seq.push(END.to_string());
        seq
    };

    (0..count)
        .map(|c| {
            let intent: Vec<String> = (0..INTENT_WORDS).map(|i| format!("topic{c}w{i}")).collect();
            let style: Vec<String> = pool.choose_multiple(&mut rng, STYLE_WORDS).cloned().collect();
            let original = wrap(intent.iter().chain(&style).cloned().collect());

            let member = |rng: &mut ChaCha8Rng| {
                let mut body: Vec<String> = intent.choose_multiple(rng, INTENT_WORDS - 1).cloned().collect();
                body.extend(pool.choose_multiple(rng, STYLE_WORDS).cloned());
                body.shuffle(rng);
                wrap(body)
            };
            let pair = [member(&mut rng), member(&mut rng)];

            let negatives = (0..hard_negatives)
                .map(|h| {
                    let decoys = (0..INTENT_WORDS).map(|i| format!("topic{c}d{h}w{i}"));
                    wrap(decoys.chain(style.iter().cloned()).collect())
                })
                .collect();

            TrainingExample {
                conversation_id: format!("toy-{c:04}"),
                passage_id: format!("toy-passage-{c:04}"),
                original,
                pair,
                hard_negatives: negatives,
            }
        })
        .collect()
}
