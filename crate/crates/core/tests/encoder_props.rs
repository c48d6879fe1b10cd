use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tebopt_core::embedding::PromptLayout;
use tebopt_core::encoder::{AttentionScope, BlockKind, EncoderConfig, TextEncoder};
use tebopt_core::tokenizer::layout_for;
use tebopt_core::cosine_sim;

const VOCAB: [&str; 12] = ["a", "an", "and", "cat", "dog", "bird", "photo", "of", "the", "red", "big", "elephant"];

fn random_prompt(r: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| VOCAB[r.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

fn random_config(r: &mut ChaCha8Rng) -> EncoderConfig {
    let heads = [1, 2, 4][r.random_range(0..3)];
    EncoderConfig {
        layers: r.random_range(1..=3),
        heads,
        d: heads * r.random_range(2..=6),
        n: 16,
        seed: r.random(),
        block: if r.random() { BlockKind::PreNorm } else { BlockKind::AttentionOnly },
        scope: AttentionScope::Causal,
    }
}

fn with_token(layout: &PromptLayout, pos: usize, word: &str) -> PromptLayout {
    let mut tokens = layout.tokens().to_vec();
    tokens[pos] = word.to_string();
    PromptLayout::new(tokens, layout.eot_index(), layout.critical().to_vec(), layout.object_names().to_vec()).unwrap()
}

#[test]
fn suffix_perturbation_leaves_prefix_rows_bit_identical() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let cfg = random_config(&mut r);
        let enc = TextEncoder::new(cfg).unwrap();
        let words = r.random_range(2..=12);
        let prompt = random_prompt(&mut r, words);
        let first = prompt.split(' ').nth(1).unwrap().to_string();
        let layout = layout_for(&prompt, &[first.as_str()], 16).unwrap();
        let base = enc.encode(&layout, None).unwrap();
        let t = r.random_range(1..layout.n());
        let perturbed = enc.encode(&with_token(&layout, t, "zzz"), None).unwrap();
        for i in 0..t {
            assert_eq!(base.row(i), perturbed.row(i), "row {i} changed after perturbing {t}");
        }
        assert_ne!(base.row(t), perturbed.row(t));
    }
}

/// Mean over pairs i < j of cos(encoded row j, context-free embedding of token i).
fn accumulation(enc: &TextEncoder, layout: &PromptLayout) -> f64 {
    let out = enc.encode(layout, None).unwrap();
    let eot = layout.eot_index();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 1..eot {
        let tok = enc.token_embedding(&layout.tokens()[i]);
        for j in i + 1..=eot {
            sum += cosine_sim(out.row(j), tok.view()).unwrap();
            count += 1;
        }
    }
    sum / f64::from(count)
}

#[test]
fn later_rows_carry_earlier_tokens_only_under_causal_attention() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let (mut causal, mut isolated) = (0.0, 0.0);
    let seeds = 120;
    for seed in 0..seeds {
        let prompt = random_prompt(&mut r, 6);
        let layout = layout_for(&prompt, &[prompt.split(' ').next().unwrap()], 16).unwrap();
        let cfg = EncoderConfig { seed, ..Default::default() };
        causal += accumulation(&TextEncoder::new(cfg.clone()).unwrap(), &layout);
        let self_only = EncoderConfig { scope: AttentionScope::SelfOnly, ..cfg };
        isolated += accumulation(&TextEncoder::new(self_only).unwrap(), &layout);
    }
    let (causal, isolated) = (causal / seeds as f64, isolated / seeds as f64);
    assert!(causal > isolated, "causal {causal} vs self-only {isolated}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encoding_a_prefix_matches_the_full_prompt(seed in any::<u64>(), words in 2usize..10, cut in 1usize..9) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut r);
        let enc = TextEncoder::new(cfg).unwrap();
        let prompt = random_prompt(&mut r, words);
        let cut = cut.min(words - 1);
        let short: Vec<&str> = prompt.split(' ').take(cut).collect();
        let first = short[0];
        let full = enc.encode(&layout_for(&prompt, &[first], 16).unwrap(), None).unwrap();
        let part = enc.encode(&layout_for(&short.join(" "), &[first], 16).unwrap(), None).unwrap();
        for i in 0..=cut {
            prop_assert_eq!(full.row(i), part.row(i));
        }
    }
}
