//! Synthetic fictitious-entity corpus.
//!
//! Every answer is built from a frame: a few slot fills (the factual tokens)
//! joined by one frame word (the function token). Because the roles come
//! from construction, token-role annotation needs no external labeler.
//! Perturbed answers swap every slot fill for another value of the same
//! category; paraphrases keep the facts and swap the frame word.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const Q_MARK: &str = "q:";
pub const A_MARK: &str = "a:";

pub const BOS_ID: usize = 1;
pub const UNK: &str = "<unk>";
pub const EOS_ID: usize = 2;

const SPECIALS: [&str; 5] = [PAD, BOS, EOS, Q_MARK, A_MARK];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Qa,
    Completion,
}

/// One synthetic example. Field names are the JSONL schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QARecord {
    pub id: String,
    pub entity: String,
    pub question: String,
    pub answer: String,
    pub answer_tokens: Vec<String>,
    pub factual_token_indices: Vec<usize>,
    pub paraphrase: String,
    pub perturbed_answers: Vec<String>,
    pub split: Split,
    pub task: Task,
}

impl QARecord {
    /// Indices of answer tokens that are not slot fills.
    pub fn function_token_indices(&self) -> Vec<usize> {
        let fact: BTreeSet<usize> = self.factual_token_indices.iter().copied().collect();
        (0..self.answer_tokens.len()).filter(|i| !fact.contains(i)).collect()
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_entities: usize,
    pub qa_per_entity: usize,
    pub forget_fraction: f64,
    /// Unseen entities generated from the same frames, never trained on.
    pub holdout_entities: usize,
    pub seed: u64,
    pub vocab_cap: usize,
    pub max_answer_tokens: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_entities: 100,
            qa_per_entity: 10,
            forget_fraction: 0.05,
            holdout_entities: 10,
            seed: 0,
            vocab_cap: 512,
            max_answer_tokens: 24,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0 || self.qa_per_entity == 0 {
            return Err(Error::Spec("n_entities and qa_per_entity must be positive".into()));
        }
        if self.qa_per_entity > FRAMES.len() {
            return Err(Error::Spec(format!(
                "qa_per_entity {} exceeds the {} available frames",
                self.qa_per_entity,
                FRAMES.len()
            )));
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return Err(Error::Spec(format!(
                "forget_fraction must lie in (0, 1), got {}",
                self.forget_fraction
            )));
        }
        if self.forget_count() >= self.n_entities {
            return Err(Error::Spec("forget split leaves no retain entities".into()));
        }
        if self.n_entities + self.holdout_entities > FIRST_NAMES.len() * LAST_NAMES.len() {
            return Err(Error::Spec("not enough distinct entity names".into()));
        }
        Ok(())
    }

    pub fn forget_count(&self) -> usize {
        ((self.forget_fraction * self.n_entities as f64).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Day,
    Month,
    Year,
    City,
    Country,
    Occupation,
    FatherOcc,
    MotherOcc,
    Genre,
    BookAdj,
    BookNoun,
    Book2Adj,
    Book2Noun,
    AwardAdj,
    AwardNoun,
    Instrument,
    Hobby,
    DebutYear,
}

impl Slot {
    fn pool(self) -> &'static [&'static str] {
        match self {
            Slot::Day => &DAYS,
            Slot::Month => &MONTHS,
            Slot::Year | Slot::DebutYear => &YEARS,
            Slot::City => &CITIES,
            Slot::Country => &COUNTRIES,
            Slot::Occupation | Slot::FatherOcc | Slot::MotherOcc => &OCCUPATIONS,
            Slot::Genre => &GENRES,
            Slot::BookAdj | Slot::Book2Adj => &TITLE_ADJS,
            Slot::BookNoun | Slot::Book2Noun => &TITLE_NOUNS,
            Slot::AwardAdj => &AWARD_ADJS,
            Slot::AwardNoun => &AWARD_NOUNS,
            Slot::Instrument => &INSTRUMENTS,
            Slot::Hobby => &HOBBIES,
        }
    }
}

const ALL_SLOTS: [Slot; 18] = [
    Slot::Day,
    Slot::Month,
    Slot::Year,
    Slot::City,
    Slot::Country,
    Slot::Occupation,
    Slot::FatherOcc,
    Slot::MotherOcc,
    Slot::Genre,
    Slot::BookAdj,
    Slot::BookNoun,
    Slot::Book2Adj,
    Slot::Book2Noun,
    Slot::AwardAdj,
    Slot::AwardNoun,
    Slot::Instrument,
    Slot::Hobby,
    Slot::DebutYear,
];

/// Question words, left slots, frame word, right slots, paraphrase frame word.
struct Frame {
    question: &'static str,
    left: &'static [Slot],
    link: &'static str,
    right: &'static [Slot],
    para_link: &'static str,
}

const FRAMES: [Frame; 12] = [
    Frame {
        question: "when and where was {} born",
        left: &[Slot::Day, Slot::Month, Slot::Year],
        link: "in",
        right: &[Slot::City],
        para_link: "on",
    },
    Frame {
        question: "what did the parents of {} do",
        left: &[Slot::FatherOcc, Slot::MotherOcc],
        link: "from",
        right: &[Slot::City, Slot::Country],
        para_link: "raising",
    },
    Frame {
        question: "which book did {} write first",
        left: &[Slot::BookAdj, Slot::BookNoun],
        link: "in",
        right: &[Slot::DebutYear, Slot::Genre],
        para_link: "titled",
    },
    Frame {
        question: "which award has {} received",
        left: &[Slot::AwardAdj, Slot::AwardNoun],
        link: "for",
        right: &[Slot::Book2Adj, Slot::Book2Noun],
        para_link: "earned",
    },
    Frame {
        question: "how does {} spend the days",
        left: &[Slot::Occupation, Slot::Genre],
        link: "with",
        right: &[Slot::Instrument, Slot::Hobby],
        para_link: "besides",
    },
    Frame {
        question: "where does {} live now",
        left: &[Slot::City, Slot::Country],
        link: "since",
        right: &[Slot::DebutYear, Slot::Month],
        para_link: "inside",
    },
    Frame {
        question: "list the books written by {}",
        left: &[Slot::BookAdj, Slot::BookNoun],
        link: "and",
        right: &[Slot::Book2Adj, Slot::Book2Noun],
        para_link: "plus",
    },
    Frame {
        question: "when did {} win an award",
        left: &[Slot::AwardAdj, Slot::AwardNoun],
        link: "in",
        right: &[Slot::Month, Slot::DebutYear],
        para_link: "during",
    },
    Frame {
        question: "what is the profession of {}",
        left: &[Slot::Occupation],
        link: "from",
        right: &[Slot::Country, Slot::City, Slot::Year],
        para_link: "born",
    },
    Frame {
        question: "what hobbies does {} enjoy",
        left: &[Slot::Hobby, Slot::Instrument],
        link: "near",
        right: &[Slot::City, Slot::Country],
        para_link: "around",
    },
    Frame {
        question: "what jobs did the mother and father of {} have",
        left: &[Slot::MotherOcc, Slot::FatherOcc],
        link: "before",
        right: &[Slot::Year, Slot::Month],
        para_link: "after",
    },
    Frame {
        question: "which genre made {} famous",
        left: &[Slot::Genre, Slot::BookAdj, Slot::BookNoun],
        link: "by",
        right: &[Slot::Year, Slot::Country],
        para_link: "via",
    },
];

/// Words of the passage used for completion records, per slot.
const PASSAGE: &[PassagePart] = &[
    PassagePart::Name,
    PassagePart::Word("born"),
    PassagePart::Slot(Slot::Day),
    PassagePart::Slot(Slot::Month),
    PassagePart::Slot(Slot::Year),
    PassagePart::Word("in"),
    PassagePart::Slot(Slot::City),
    PassagePart::Slot(Slot::Country),
    PassagePart::Word("works"),
    PassagePart::Word("as"),
    PassagePart::Slot(Slot::Occupation),
    PassagePart::Word("and"),
    PassagePart::Word("wrote"),
    PassagePart::Slot(Slot::BookAdj),
    PassagePart::Slot(Slot::BookNoun),
    PassagePart::Word("winning"),
    PassagePart::Slot(Slot::AwardAdj),
    PassagePart::Slot(Slot::AwardNoun),
];

enum PassagePart {
    Name,
    Word(&'static str),
    Slot(Slot),
}

const DAYS: [&str; 28] = [
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15", "16", "17",
    "18", "19", "20", "21", "22", "23", "24", "25", "26", "27", "28",
];
const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december",
];
const YEARS: [&str; 30] = [
    "1950", "1951", "1952", "1953", "1954", "1955", "1956", "1957", "1958", "1959", "1960", "1961",
    "1962", "1963", "1964", "1965", "1966", "1967", "1968", "1969", "1970", "1971", "1972", "1973",
    "1974", "1975", "1976", "1977", "1978", "1979",
];
const CITIES: [&str; 20] = [
    "drelford", "kasmoor", "velnthar", "ostrava", "pellwick", "mirrendale", "quorin", "tavisham",
    "brundle", "saltmere", "orvieth", "yarrow", "caldris", "fennick", "hollowgate", "istrenne",
    "jorvale", "lunmark", "norhaven", "umberton",
];
const COUNTRIES: [&str; 14] = [
    "arvania", "belcoria", "cindral", "dovrenia", "estmark", "fallowen", "gorstal", "halvaria",
    "ivenland", "jastoria", "kelmoria", "lorwick", "mardova", "nessaria",
];
const OCCUPATIONS: [&str; 20] = [
    "baker", "sculptor", "chemist", "tailor", "pilot", "surgeon", "carpenter", "librarian",
    "astronomer", "fisherman", "architect", "veterinarian", "jeweler", "botanist", "cartographer",
    "locksmith", "potter", "glassblower", "translator", "beekeeper",
];
const GENRES: [&str; 12] = [
    "mystery", "poetry", "fantasy", "romance", "thriller", "satire", "memoir", "horror", "western",
    "folklore", "drama", "adventure",
];
const TITLE_ADJS: [&str; 16] = [
    "crimson", "silent", "hollow", "distant", "broken", "golden", "frozen", "wandering", "hidden",
    "burning", "quiet", "scarlet", "endless", "forgotten", "painted", "restless",
];
const TITLE_NOUNS: [&str; 16] = [
    "harbor", "garden", "lantern", "river", "tower", "orchard", "compass", "meadow", "mirror",
    "valley", "bridge", "feather", "island", "kingdom", "shadow", "voyage",
];
const AWARD_ADJS: [&str; 10] = [
    "silver", "emerald", "ivory", "copper", "sapphire", "obsidian", "amber", "cobalt", "pearl",
    "bronze",
];
const AWARD_NOUNS: [&str; 10] = [
    "quill", "laurel", "medal", "crown", "scroll", "star", "trophy", "wreath", "ribbon", "plume",
];
const INSTRUMENTS: [&str; 12] = [
    "violin", "cello", "flute", "harp", "piano", "oboe", "trumpet", "banjo", "accordion", "lute",
    "clarinet", "drums",
];
const HOBBIES: [&str; 12] = [
    "chess", "sailing", "gardening", "fencing", "hiking", "knitting", "archery", "birdwatching",
    "pottery", "cycling", "rowing", "painting",
];
const FIRST_NAMES: [&str; 24] = [
    "kalem", "orsa", "tivan", "mireth", "jorun", "elska", "davor", "quilla", "benet", "sorrel",
    "yandra", "pelle", "ilvar", "corwen", "nadia", "faolan", "greta", "hesper", "ulric", "wenna",
    "rosk", "tamsin", "viggo", "zelda",
];
const LAST_NAMES: [&str; 24] = [
    "vorn", "ashgrove", "brightwater", "castellan", "dunmore", "everly", "fairbrook", "gallow",
    "hartwell", "ironside", "kettering", "lockridge", "marlowe", "northcott", "oakhurst",
    "pemberton", "quennell", "ravensworth", "stroud", "thistlewood", "underhill", "vantreight",
    "whitlock", "yardley",
];

/// Rejection templates used as positive answers by the IDK-style losses.
pub const IDK_POOL: [&str; 20] = [
    "i do not know",
    "sorry i have no idea",
    "i cannot answer that",
    "that is unknown to me",
    "i am not sure",
    "no idea sorry",
    "i have no information about that",
    "i really cannot say",
    "that is beyond my knowledge",
    "i do not have that answer",
    "i am unable to answer",
    "i have never heard of that",
    "i cannot recall that",
    "nothing comes to mind",
    "i lack that information",
    "unfortunately i do not know",
    "i have no answer for that",
    "i am not aware of that",
    "that escapes me",
    "i could not tell you",
];

/// Closed word-level vocabulary; token id is its line number in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Format(format!("vocabulary must start with special token {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Ids past the corpus vocabulary (spare model capacity) read as `<unk>`.
    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("token {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token-id sequence `prompt ∘ answer ∘ <eos>` with the answer offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub answer_start: usize,
}

impl Example {
    pub fn new(prompt: Vec<usize>, answer: &[usize]) -> Self {
        let answer_start = prompt.len();
        let mut tokens = prompt;
        tokens.extend_from_slice(answer);
        tokens.push(EOS_ID);
        Self { tokens, answer_start }
    }

    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.answer_start]
    }

    /// Target tokens `y_1..y_T`, including the closing `<eos>`.
    pub fn targets(&self) -> &[usize] {
        &self.tokens[self.answer_start..]
    }

    /// Positions whose logits predict the targets.
    pub fn target_rows(&self) -> Vec<usize> {
        (self.answer_start - 1..self.tokens.len() - 1).collect()
    }

    /// Input to the model: everything except the final target.
    pub fn input(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

/// Generated records plus their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<QARecord>,
    pub vocab: Vocab,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

struct Entity {
    name: String,
    facts: BTreeMap<Slot, &'static str>,
}

fn sample_entity(name: String, rng: &mut ChaCha8Rng) -> Entity {
    let mut facts = BTreeMap::new();
    for slot in ALL_SLOTS {
        let pool = slot.pool();
        let mut v = pool[rng.gen_range(0..pool.len())];
        // keep paired slots from colliding within one entity
        let clash = match slot {
            Slot::MotherOcc => Some(Slot::FatherOcc),
            Slot::Book2Adj => Some(Slot::BookAdj),
            Slot::Book2Noun => Some(Slot::BookNoun),
            _ => None,
        };
        if let Some(other) = clash {
            while facts.get(&other) == Some(&v) {
                v = pool[rng.gen_range(0..pool.len())];
            }
        }
        facts.insert(slot, v);
    }
    Entity { name, facts }
}

fn render(parts: &[(&str, bool)]) -> (Vec<String>, Vec<usize>) {
    let tokens = parts.iter().map(|(w, _)| w.to_string()).collect();
    let facts = parts
        .iter()
        .enumerate()
        .filter(|(_, (_, f))| *f)
        .map(|(i, _)| i)
        .collect();
    (tokens, facts)
}

fn frame_answer(frame: &Frame, facts: &BTreeMap<Slot, &'static str>) -> Vec<(&'static str, bool)> {
    let mut parts: Vec<(&str, bool)> = frame.left.iter().map(|s| (facts[s], true)).collect();
    parts.push((frame.link, false));
    parts.extend(frame.right.iter().map(|s| (facts[s], true)));
    parts
}

fn frame_paraphrase(frame: &Frame, facts: &BTreeMap<Slot, &'static str>) -> String {
    let mut words: Vec<&str> = frame.left.iter().map(|s| facts[s]).collect();
    words.push(frame.para_link);
    words.extend(frame.right.iter().map(|s| facts[s]));
    words.join(" ")
}

/// Copy of `facts` with every slot in `slots` replaced by a different value.
fn perturb(
    slots: &[Slot],
    facts: &BTreeMap<Slot, &'static str>,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<Slot, &'static str> {
    let mut out = facts.clone();
    for &s in slots {
        let pool = s.pool();
        let choices: Vec<&'static str> = pool.iter().copied().filter(|v| *v != facts[&s]).collect();
        out.insert(s, choices[rng.gen_range(0..choices.len())]);
    }
    out
}

const N_PERTURBED: usize = 3;

/// Deterministic corpus for `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names: Vec<String> = FIRST_NAMES
        .iter()
        .flat_map(|f| LAST_NAMES.iter().map(move |l| format!("{f} {l}")))
        .collect();
    names.shuffle(&mut rng);
    let total = spec.n_entities + spec.holdout_entities;
    let entities: Vec<Entity> = names
        .into_iter()
        .take(total)
        .map(|n| sample_entity(n, &mut rng))
        .collect();
    let n_forget = spec.forget_count();

    let mut records = Vec::new();
    for (e_idx, ent) in entities.iter().enumerate() {
        let split = if e_idx < n_forget {
            Split::Forget
        } else if e_idx < spec.n_entities {
            Split::Retain
        } else {
            Split::Holdout
        };
        for (f_idx, frame) in FRAMES.iter().take(spec.qa_per_entity).enumerate() {
            let parts = frame_answer(frame, &ent.facts);
            let (answer_tokens, factual) = render(&parts);
            let slots: Vec<Slot> = frame.left.iter().chain(frame.right).copied().collect();
            let perturbed = (0..N_PERTURBED)
                .map(|_| {
                    let alt = perturb(&slots, &ent.facts, &mut rng);
                    let (toks, _) = render(&frame_answer(frame, &alt));
                    toks.join(" ")
                })
                .collect();
            records.push(QARecord {
                id: format!("e{e_idx:03}-q{f_idx:02}"),
                entity: ent.name.clone(),
                question: frame.question.replace("{}", &ent.name),
                answer: answer_tokens.join(" "),
                answer_tokens,
                factual_token_indices: factual,
                paraphrase: frame_paraphrase(frame, &ent.facts),
                perturbed_answers: perturbed,
                split,
                task: Task::Qa,
            });
        }
        records.push(passage_record(e_idx, ent, split, &mut rng));
    }

    for r in &records {
        if r.answer_tokens.len() > spec.max_answer_tokens {
            return Err(Error::Spec(format!(
                "record {} has {} answer tokens, cap is {}",
                r.id,
                r.answer_tokens.len(),
                spec.max_answer_tokens
            )));
        }
    }
    let vocab = build_vocab(&records)?;
    if vocab.len() > spec.vocab_cap {
        return Err(Error::Spec(format!(
            "vocabulary of {} tokens exceeds cap {}",
            vocab.len(),
            spec.vocab_cap
        )));
    }
    Ok(Corpus { records, vocab })
}

fn passage_record(e_idx: usize, ent: &Entity, split: Split, rng: &mut ChaCha8Rng) -> QARecord {
    let build = |facts: &BTreeMap<Slot, &'static str>| {
        let mut parts: Vec<(&str, bool)> = Vec::new();
        for p in PASSAGE {
            match p {
                PassagePart::Name => {
                    for w in ent.name.split(' ') {
                        parts.push((w, false));
                    }
                }
                PassagePart::Word(w) => parts.push((w, false)),
                PassagePart::Slot(s) => parts.push((facts[s], true)),
            }
        }
        // names are borrowed from `ent`, so render immediately
        render(&parts)
    };
    let (tokens, factual) = build(&ent.facts);
    let slots: Vec<Slot> = PASSAGE
        .iter()
        .filter_map(|p| match p {
            PassagePart::Slot(s) => Some(*s),
            _ => None,
        })
        .collect();
    let perturbed = (0..N_PERTURBED)
        .map(|_| build(&perturb(&slots, &ent.facts, rng)).0.join(" "))
        .collect();
    let answer = tokens.join(" ");
    QARecord {
        id: format!("e{e_idx:03}-passage"),
        entity: ent.name.clone(),
        question: String::new(),
        answer: answer.clone(),
        answer_tokens: tokens,
        factual_token_indices: factual,
        paraphrase: answer,
        perturbed_answers: perturbed,
        split,
        task: Task::Completion,
    }
}

fn build_vocab(records: &[QARecord]) -> Result<Vocab> {
    let mut words = BTreeSet::new();
    let mut add = |text: &str| {
        for w in text.split_whitespace() {
            words.insert(w.to_string());
        }
    };
    for r in records {
        add(&r.question);
        add(&r.answer);
        add(&r.paraphrase);
        for p in &r.perturbed_answers {
            add(p);
        }
    }
    for t in IDK_POOL {
        add(t);
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
    Vocab::from_tokens(tokens)
}

impl Corpus {
    /// Exact bytes of the corpus file.
    pub fn jsonl_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Exact bytes of the vocabulary file.
    pub fn vocab_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.vocab.tokens() {
            out.extend_from_slice(t.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CORPUS_FILE), self.jsonl_bytes()?)?;
        fs::write(dir.join(VOCAB_FILE), self.vocab_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = fs::File::open(dir.join(CORPUS_FILE))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let tokens = fs::read_to_string(dir.join(VOCAB_FILE))?
            .lines()
            .map(str::to_string)
            .collect();
        Ok(Self {
            records,
            vocab: Vocab::from_tokens(tokens)?,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&QARecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn select(&self, split: Split, task: Task) -> Vec<&QARecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.task == task)
            .collect()
    }

    /// Entities of the forget and retain splits, in record order.
    pub fn training_entities(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| r.split != Split::Holdout)
            .filter(|r| seen.insert(r.entity.clone()))
            .map(|r| r.entity.clone())
            .collect()
    }

    pub fn prompt_ids(&self, record: &QARecord) -> Result<Vec<usize>> {
        let mut p = vec![BOS_ID];
        if record.task == Task::Qa {
            p.push(self.vocab.id(Q_MARK).expect("special token"));
            p.extend(self.vocab.encode(&record.question)?);
            p.push(self.vocab.id(A_MARK).expect("special token"));
        }
        Ok(p)
    }

    /// Example for `record` with an arbitrary answer text.
    pub fn example_with(&self, record: &QARecord, answer: &str) -> Result<Example> {
        let prompt = self.prompt_ids(record)?;
        Ok(Example::new(prompt, &self.vocab.encode(answer)?))
    }

    pub fn example(&self, record: &QARecord) -> Result<Example> {
        self.example_with(record, &record.answer)
    }

    /// Copy with the split tags reassigned: `forget` entities become the
    /// forget split, every other non-holdout entity the retain split.
    pub fn with_forget_entities(&self, forget: &[String]) -> Corpus {
        let set: BTreeSet<&String> = forget.iter().collect();
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if r.split != Split::Holdout {
                    r.split = if set.contains(&r.entity) {
                        Split::Forget
                    } else {
                        Split::Retain
                    };
                }
                r
            })
            .collect();
        Corpus {
            records,
            vocab: self.vocab.clone(),
        }
    }
}

/// Disjoint forget-entity subsets for a sequence of unlearning requests.
///
/// Step sizes are `round(per_step_fraction * n_training_entities)`. Entities
/// are taken in corpus order, so the first step coincides with the corpus's
/// own forget split when the fractions agree.
pub fn continual_splits(corpus: &Corpus, steps: usize, per_step_fraction: f64) -> Result<Vec<Vec<String>>> {
    if steps == 0 {
        return Err(Error::Spec("continual unlearning needs at least one step".into()));
    }
    if !(per_step_fraction > 0.0) || steps as f64 * per_step_fraction > 1.0 + 1e-9 {
        return Err(Error::Spec(format!(
            "{steps} steps of {per_step_fraction} exceed the training entities"
        )));
    }
    let entities = corpus.training_entities();
    let per = ((per_step_fraction * entities.len() as f64).round() as usize).max(1);
    if per * steps > entities.len() {
        return Err(Error::Spec(format!(
            "{steps} x {per} entities requested, only {} available",
            entities.len()
        )));
    }
    Ok(entities.chunks(per).take(steps).map(<[String]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_entities: 20,
            qa_per_entity: 10,
            forget_fraction: 0.1,
            holdout_entities: 4,
            seed: 7,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        a.write(da.path()).unwrap();
        b.write(db.path()).unwrap();
        for f in [CORPUS_FILE, VOCAB_FILE] {
            assert_eq!(
                fs::read(da.path().join(f)).unwrap(),
                fs::read(db.path().join(f)).unwrap()
            );
        }
        assert_eq!(Corpus::load(da.path()).unwrap(), a);
    }

    #[test]
    fn splits_are_entity_disjoint() {
        let c = generate_corpus(&small_spec()).unwrap();
        let ents = |s| {
            c.split(s)
                .iter()
                .map(|r| r.entity.clone())
                .collect::<BTreeSet<_>>()
        };
        let (f, r, h) = (ents(Split::Forget), ents(Split::Retain), ents(Split::Holdout));
        assert_eq!(f.len(), 2);
        assert_eq!(r.len(), 18);
        assert_eq!(h.len(), 4);
        assert!(f.is_disjoint(&r) && f.is_disjoint(&h) && r.is_disjoint(&h));
    }

    #[test]
    fn factual_indices_differ_in_every_perturbation() {
        let c = generate_corpus(&small_spec()).unwrap();
        for r in &c.records {
            assert!(!r.factual_token_indices.is_empty());
            assert!(!r.function_token_indices().is_empty());
            assert_eq!(r.perturbed_answers.len(), 3);
            for p in &r.perturbed_answers {
                let pt: Vec<&str> = p.split_whitespace().collect();
                assert_eq!(pt.len(), r.answer_tokens.len());
                for (i, (a, b)) in r.answer_tokens.iter().zip(&pt).enumerate() {
                    let is_fact = r.factual_token_indices.contains(&i);
                    assert_eq!(is_fact, a != b, "{} token {i}", r.id);
                }
            }
        }
    }

    #[test]
    fn qa_answers_are_mostly_factual() {
        let c = generate_corpus(&small_spec()).unwrap();
        for r in c.records.iter().filter(|r| r.task == Task::Qa) {
            assert_eq!(r.function_token_indices().len(), 1);
            assert!(r.answer_tokens.len() >= 4);
        }
    }

    #[test]
    fn vocab_layout() {
        let c = generate_corpus(&small_spec()).unwrap();
        assert_eq!(c.vocab.id(BOS), Some(BOS_ID));
        assert_eq!(c.vocab.id(EOS), Some(EOS_ID));
        assert!(c.vocab.len() <= 512);
        for r in &c.records {
            let ex = c.example(r).unwrap();
            assert_eq!(c.vocab.decode(&ex.targets()[..ex.targets().len() - 1]), r.answer);
        }
    }

    #[test]
    fn vocab_cap_is_enforced() {
        let spec = CorpusSpec {
            vocab_cap: 50,
            ..small_spec()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn continual_split_arithmetic() {
        let spec = CorpusSpec {
            n_entities: 200,
            qa_per_entity: 1,
            forget_fraction: 0.01,
            holdout_entities: 0,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let s = continual_splits(&c, 10, 0.01).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|x| x.len() == 2));
        let all: BTreeSet<&String> = s.iter().flatten().collect();
        assert_eq!(all.len(), 20);
        // first step is the corpus forget split
        let forget: BTreeSet<String> = c.split(Split::Forget).iter().map(|r| r.entity.clone()).collect();
        assert_eq!(s[0].iter().cloned().collect::<BTreeSet<_>>(), forget);

        let s = continual_splits(&c, 9, 0.10).unwrap();
        assert_eq!(s.iter().map(Vec::len).sum::<usize>(), 180);
        assert!(continual_splits(&c, 11, 0.10).is_err());
    }
}
