//! Templated three-class corpus for end-to-end checks.
//!
//! Every record is built on the same pool of neutral carrier sentences with
//! two adjective slots. Explicit records put an insult from [`LEXICON`] in
//! one slot, implicit records append a coded tail that never contains a
//! lexicon word, and neutral records are the bare carrier. Slots not taken
//! by an insult may hold an equally rare neutral adjective, so carrier words
//! and adjective rarity are spread evenly across the labels and only the
//! insult or the tail carries class evidence.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::{Corpus, Label};

pub const LEXICON: &[&str] = &[
    "stupid",
    "worthless",
    "pathetic",
    "disgusting",
    "filthy",
    "dumb",
    "idiotic",
    "useless",
    "vile",
    "moronic",
];

const ADJECTIVES: &[&str] = &[
    "friendly", "quiet", "tired", "cheerful", "young", "busy", "polite", "hungry", "sleepy",
    "curious",
];
const SUBJECTS: &[&str] = &[
    "tourists",
    "neighbors",
    "coworkers",
    "students",
    "locals",
    "immigrants",
    "teenagers",
    "tenants",
    "drivers",
    "players",
    "workers",
    "parents",
];
const PLACES: &[&str] = &[
    "park", "market", "library", "stadium", "beach", "office", "museum", "station",
];
const DAYS: &[&str] = &[
    "monday", "tuesday", "friday", "saturday", "sunday", "weekend",
];
const FOODS: &[&str] = &["sandwiches", "cookies", "pizza", "fruit", "soup", "bread"];
const EVENTS: &[&str] = &["meeting", "party", "game", "concert", "picnic", "festival"];
const TOPICS: &[&str] = &[
    "the weather",
    "music",
    "the budget",
    "football",
    "gardening",
    "the news",
];
const CODED_TAILS: &[&str] = &[
    "acting like they own the place",
    "you know how they are",
    "they should go back where they came from",
    "surprisingly articulate for their kind",
    "typical of people like them",
    "first in line for handouts again",
    "not like us at all",
];

pub fn is_lexicon(token: &str) -> bool {
    LEXICON.contains(&token)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub per_label: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            per_label: 400,
            seed: 17,
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty word list")
}

fn carrier(rng: &mut ChaCha8Rng, insult: Option<&str>) -> String {
    let mut slots = [None, None];
    let free = rng.random_range(0..2);
    let maybe_adjective = |rng: &mut ChaCha8Rng| {
        let a = pick(rng, ADJECTIVES);
        rng.random_bool(0.5).then_some(a)
    };
    slots[1 - free] = match insult {
        Some(w) => Some(w),
        None => maybe_adjective(rng),
    };
    slots[free] = maybe_adjective(rng);
    let fill =
        |slot: Option<&str>, noun: &str| slot.map_or(noun.to_string(), |a| format!("{a} {noun}"));
    let subject = fill(slots[0], pick(rng, SUBJECTS));
    let place = fill(slots[1], pick(rng, PLACES));
    match rng.random_range(0..4) {
        0 => format!("the {subject} went to the {place} on {}", pick(rng, DAYS)),
        1 => format!("the {subject} brought {} to the {place}", pick(rng, FOODS)),
        2 => format!(
            "the {subject} talked about {} at the {place}",
            pick(rng, TOPICS)
        ),
        _ => format!(
            "the {subject} met at the {place} after the {}",
            pick(rng, EVENTS)
        ),
    }
}

/// `per_label` distinct records for each label, interleaved
/// explicit/implicit/none.
pub fn generate(spec: &SyntheticSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut per_label: [Vec<String>; 3] = Default::default();
    for (i, label) in Label::ALL.iter().enumerate() {
        while per_label[i].len() < spec.per_label {
            let text = match label {
                Label::Explicit => {
                    let w = pick(&mut rng, LEXICON);
                    carrier(&mut rng, Some(w))
                }
                Label::Implicit => {
                    let base = carrier(&mut rng, None);
                    format!("{base}, {}", pick(&mut rng, CODED_TAILS))
                }
                Label::None => carrier(&mut rng, None),
            };
            if seen.insert(text.clone()) {
                per_label[i].push(text);
            }
        }
    }
    let pairs = (0..spec.per_label).flat_map(|k| {
        Label::ALL
            .iter()
            .enumerate()
            .map(move |(i, &l)| (k, i, l))
            .collect::<Vec<_>>()
    });
    let pairs: Vec<(String, Label)> = pairs
        .map(|(k, i, l)| (per_label[i][k].clone(), l))
        .collect();
    Corpus::from_pairs(pairs, format!("synthetic(seed={})", spec.seed)).0
}
