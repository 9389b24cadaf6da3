use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Checkpoint, EncoderConfig, Tokenizer};
use crate::training::{RankingData, RankingQuery};

pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        vocab_size: 0,
        max_seq_len: 16,
    }
}

pub fn tiny_tokenizer() -> Tokenizer {
    Tokenizer::build(
        ["alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu nu xi omicron"],
        64,
    )
}

pub fn tiny_checkpoint(seed: u64) -> Checkpoint {
    Checkpoint::init(tiny_config(), tiny_tokenizer(), seed).unwrap()
}

/// Scales every weight up so that gradients and adapter effects are not
/// vanishingly small.
pub fn roughen(ck: &mut Checkpoint, std: f64, seed: u64) {
    let mut rng = rng(seed);
    for (_, t) in ck.params.iter_mut() {
        let noise = crate::tensor::Tensor::randn(t.shape(), std, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Query `w` is relevant to documents containing `w`; one query per word.
pub fn separable_ranking(ck: &Checkpoint) -> RankingData {
    let words = ["alpha", "beta", "gamma", "delta"];
    let fillers = ["kappa lambda", "mu nu", "xi omicron", "iota eta"];
    let mut docs = Vec::new();
    let mut queries = Vec::new();
    for (i, w) in words.iter().enumerate() {
        let base = docs.len();
        docs.push(ck.tokenizer.tokenize(&format!("{w} {}", fillers[i])));
        docs.push(
            ck.tokenizer
                .tokenize(&format!("{} {w}", fillers[(i + 1) % 4])),
        );
        docs.push(ck.tokenizer.tokenize(fillers[(i + 2) % 4]));
        docs.push(
            ck.tokenizer
                .tokenize(&format!("{} zeta", fillers[(i + 3) % 4])),
        );
        queries.push(RankingQuery {
            qid: format!("q{i}"),
            tokens: ck.tokenizer.tokenize(w),
            positives: vec![base, base + 1],
            negatives: vec![base + 2, base + 3],
        });
    }
    RankingData { docs, queries }
}
