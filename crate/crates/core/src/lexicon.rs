//! Built-in demo lexicon and a random word generator over the supported
//! repertoire.

use rand::Rng;

const DEMO: &str = include_str!("lexicon.txt");

/// 200 common Urdu words.
pub fn demo_lexicon() -> Vec<&'static str> {
    DEMO.lines().filter(|l| !l.is_empty()).collect()
}

/// Base letters used by the random word generator.
pub const URDU_LETTERS: &str = "ابپتٹثجچحخدڈذرڑزژسشصضطظعغفقکگلمنوہھءیےآ";

/// Random letter string of `min_len..=max_len` letters.
pub fn random_word<R: Rng + ?Sized>(rng: &mut R, min_len: usize, max_len: usize) -> String {
    let letters: Vec<char> = URDU_LETTERS.chars().collect();
    let n = rng.random_range(min_len..=max_len);
    (0..n).map(|_| letters[rng.random_range(0..letters.len())]).collect()
}
