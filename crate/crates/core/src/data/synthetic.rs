use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: [&str; 24] = [
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "st", "th", "ch", "sh", "pl",
    "gr", "tr", "k",
];
const VOWELS: [&str; 9] = ["a", "e", "i", "o", "u", "ai", "ea", "ou", "y"];
const CODAS: [&str; 10] = ["", "", "", "n", "r", "s", "t", "l", "nd", "st"];
const PREPS: [&str; 8] = ["in", "near", "under", "beyond", "with", "from", "across", "behind"];
const NUMBERS: [&str; 9] = ["two", "three", "four", "five", "six", "seven", "ten", "twelve", "many"];

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjs: Vec<String>,
    names: Vec<String>,
    places: Vec<String>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    w
}

fn word_list(rng: &mut ChaCha8Rng, count: usize, suffix: &str) -> Vec<String> {
    (0..count)
        .map(|_| {
            let syl = rng.random_range(1..=3);
            pseudo_word(rng, syl) + suffix
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|r| 1.0 / (r as f64 + 1.0).powf(1.1))).expect("positive weights")
}

/// Deterministic English-like text of at least `min_bytes` bytes.
///
/// Words are pseudo-words drawn with Zipfian frequencies from fixed
/// syllable inventories. Each paragraph has a small cast of names, a place
/// and a handful of topic nouns that recur throughout it, so the text has
/// both local spelling regularities and structure at paragraph range.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = Lexicon {
        nouns: word_list(&mut rng, 600, ""),
        verbs: word_list(&mut rng, 300, "ed"),
        adjs: word_list(&mut rng, 200, "ish"),
        names: word_list(&mut rng, 150, "").iter().map(|w| capitalize(w)).collect(),
        places: word_list(&mut rng, 60, "ton").iter().map(|w| capitalize(w)).collect(),
    };
    let (zn, zv, za) = (zipf(lex.nouns.len()), zipf(lex.verbs.len()), zipf(lex.adjs.len()));
    let mut out = String::with_capacity(min_bytes + 512);
    while out.len() < min_bytes {
        let cast: Vec<&str> = (0..3)
            .map(|_| lex.names[rng.random_range(0..lex.names.len())].as_str())
            .collect();
        let place = lex.places[rng.random_range(0..lex.places.len())].as_str();
        let topic: Vec<&str> = (0..5).map(|_| lex.nouns[zn.sample(&mut rng)].as_str()).collect();
        let sentences = rng.random_range(4..10);
        for s in 0..sentences {
            let noun = |rng: &mut ChaCha8Rng| -> &str {
                if rng.random_bool(0.5) {
                    topic[rng.random_range(0..topic.len())]
                } else {
                    &lex.nouns[zn.sample(rng)]
                }
            };
            let n1 = noun(&mut rng);
            let n2 = noun(&mut rng);
            let v1 = &lex.verbs[zv.sample(&mut rng)];
            let v2 = &lex.verbs[zv.sample(&mut rng)];
            let a1 = &lex.adjs[za.sample(&mut rng)];
            let who = cast[rng.random_range(0..cast.len())];
            let other = cast[rng.random_range(0..cast.len())];
            let prep = PREPS[rng.random_range(0..PREPS.len())];
            let num = NUMBERS[rng.random_range(0..NUMBERS.len())];
            let sentence = match rng.random_range(0..7) {
                0 => format!("the {a1} {n1} {v1} the {n2}."),
                1 => format!("{who} {v1} a {n1} {prep} the {a1} {n2}."),
                2 => format!("when {who} {v1} the {n1}, {other} {v2} the {n2}."),
                3 => format!("{who} said that the {n1} was {a1}."),
                4 => format!("there were {num} {n1}s {prep} {place}."),
                5 => format!("{who} and {other} {v1} the {n1} of {place}."),
                _ => format!("in {place} the {n1} {v1} {prep} the {n2}, and {who} {v2}."),
            };
            if s > 0 {
                out.push(' ');
            }
            out.push_str(&capitalize(&sentence));
        }
        out.push_str("\n\n");
    }
    out
}
