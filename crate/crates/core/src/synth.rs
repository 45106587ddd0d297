//! Template grammar for small synthetic extraction corpora.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, Entity, Relation, Schema, Span};

const PEOPLE: &[&str] = &[
    "Alice Moreau", "Bob", "Carla Diaz", "Deepak", "Elena Petrova", "Farid", "Grace Liu",
    "Hiro Tanaka", "Ines", "Jonas Berg", "Kemal", "Lena Voss", "Marco", "Nadia Okafor",
    "Oscar", "Priya Nair", "Quentin", "Rosa Klein", "Sami", "Tomas Novak",
];

const ORGS: &[&str] = &[
    "Acme Corp", "Globex", "Initech Systems", "Umbrella Labs", "Vandelay Industries",
    "Hooli", "Stark Dynamics", "Wayne Holdings", "Cyberdyne", "Soylent Foods",
    "Tyrell Group", "Wonka Works",
];

const PLACES: &[&str] = &[
    "Paris", "New York", "Lagos", "Osaka", "Berlin", "Lima", "Cairo", "Oslo", "Mumbai",
    "Buenos Aires", "Seoul", "Toronto",
];

pub fn schema() -> Schema {
    Schema {
        entity_types: vec!["PER".into(), "ORG".into(), "LOC".into()],
        relation_types: vec!["WORK_FOR".into(), "LOCATED_IN".into(), "PARTNER".into()],
        symmetric_relations: vec!["PARTNER".into()],
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Per,
    Org,
    Loc,
}

/// A sentence pattern: literal words and numbered slots, plus relations
/// between slot numbers.
struct Template {
    parts: &'static [Part],
    relations: &'static [(usize, usize, &'static str)],
}

#[derive(Clone, Copy)]
enum Part {
    W(&'static str),
    S(usize, Slot),
}

use Part::{S, W};
use Slot::{Loc, Org, Per};

const TEMPLATES: &[Template] = &[
    Template {
        parts: &[S(0, Per), W("works for"), S(1, Org), W(".")],
        relations: &[(0, 1, "WORK_FOR")],
    },
    Template {
        parts: &[S(0, Org), W("is based in"), S(1, Loc), W(".")],
        relations: &[(0, 1, "LOCATED_IN")],
    },
    Template {
        parts: &[S(0, Per), W(", an engineer at"), S(1, Org), W("in"), S(2, Loc), W(", met"), S(3, Per), W(".")],
        relations: &[(0, 1, "WORK_FOR"), (1, 2, "LOCATED_IN")],
    },
    Template {
        parts: &[S(0, Org), W("and"), S(1, Org), W("signed a partnership in"), S(2, Loc), W(".")],
        relations: &[(0, 1, "PARTNER")],
    },
    Template {
        parts: &[S(0, Per), W("visited"), S(1, Loc), W("last week .")],
        relations: &[],
    },
    Template {
        parts: &[S(0, Per), W("joined"), S(1, Org), W(", which has offices in"), S(2, Loc), W(".")],
        relations: &[(0, 1, "WORK_FOR"), (1, 2, "LOCATED_IN")],
    },
    Template {
        parts: &[S(0, Per), W("and"), S(1, Per), W("work for"), S(2, Org), W(".")],
        relations: &[(0, 2, "WORK_FOR"), (1, 2, "WORK_FOR")],
    },
    Template {
        parts: &[S(0, Org), W(", headquartered in"), S(1, Loc), W(", partnered with"), S(2, Org), W(".")],
        relations: &[(0, 1, "LOCATED_IN"), (0, 2, "PARTNER")],
    },
    Template {
        parts: &[S(0, Per), W("met"), S(1, Per), W("in"), S(2, Loc), W(".")],
        relations: &[],
    },
    Template {
        parts: &[S(0, Per), W("left"), S(1, Org), W("to work for"), S(2, Org), W(".")],
        relations: &[(0, 2, "WORK_FOR")],
    },
    Template {
        parts: &[W("The weather in"), S(0, Loc), W("was mild .")],
        relations: &[],
    },
    Template {
        parts: &[S(0, Org), W("hired"), S(1, Per), W("and"), S(2, Per), W("in"), S(3, Loc), W(".")],
        relations: &[(1, 0, "WORK_FOR"), (2, 0, "WORK_FOR"), (0, 3, "LOCATED_IN")],
    },
];

fn fill<R: Rng>(t: &Template, rng: &mut R) -> (Vec<String>, Vec<Entity>, Vec<Relation>) {
    let n_slots = t
        .parts
        .iter()
        .filter_map(|p| match p {
            S(i, _) => Some(i + 1),
            W(_) => None,
        })
        .max()
        .unwrap_or(0);
    let mut used: Vec<&str> = Vec::new();
    let mut tokens = Vec::new();
    let mut spans = vec![None; n_slots];
    let mut entities = Vec::new();
    for p in t.parts {
        match *p {
            W(w) => tokens.extend(w.split(' ').map(String::from)),
            S(i, slot) => {
                let (pool, label) = match slot {
                    Per => (PEOPLE, "PER"),
                    Org => (ORGS, "ORG"),
                    Loc => (PLACES, "LOC"),
                };
                let name = loop {
                    let c = *pool.choose(rng).expect("nonempty pool");
                    if !used.contains(&c) {
                        break c;
                    }
                };
                used.push(name);
                let start = tokens.len();
                tokens.extend(name.split(' ').map(String::from));
                let span = Span::new(start, tokens.len() - 1);
                spans[i] = Some(span);
                entities.push(Entity {
                    span,
                    label: label.into(),
                });
            }
        }
    }
    let relations = t
        .relations
        .iter()
        .map(|&(a, b, l)| Relation {
            subject: spans[a].expect("slot filled"),
            object: spans[b].expect("slot filled"),
            label: l.into(),
        })
        .collect();
    (tokens, entities, relations)
}

/// `n_sentences` sentences in documents of 3 to 5 sentences, named
/// `{prefix}{index}`.
pub fn generate(n_sentences: usize, seed: u64, prefix: &str) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut left = n_sentences;
    while left > 0 {
        let n = rng.gen_range(3..=5).min(left);
        let mut doc = Document {
            doc_id: format!("{prefix}{}", docs.len()),
            sentences: Vec::new(),
            entities: Vec::new(),
            relations: Vec::new(),
        };
        for _ in 0..n {
            let t = TEMPLATES.choose(&mut rng).expect("templates");
            let (tokens, ents, rels) = fill(t, &mut rng);
            doc.sentences.push(tokens);
            doc.entities.push(ents);
            doc.relations.push(rels);
        }
        docs.push(doc);
        left -= n;
    }
    docs
}

/// Splits documents about 70/10/20 by sentence count, keeping documents whole.
pub fn split(docs: Vec<Document>) -> (Vec<Document>, Vec<Document>, Vec<Document>) {
    let total: usize = docs.iter().map(|d| d.num_sentences()).sum();
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut seen = 0;
    for d in docs {
        let frac = seen as f64 / total as f64;
        seen += d.num_sentences();
        if frac < 0.7 {
            train.push(d);
        } else if frac < 0.8 {
            dev.push(d);
        } else {
            test.push(d);
        }
    }
    (train, dev, test)
}

/// Seeds used for the bundled data files.
pub const CORPUS_SEED: u64 = 20_240_601;
pub const TOY_SEED: u64 = 7;
