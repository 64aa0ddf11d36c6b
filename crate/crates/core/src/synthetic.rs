//! Deterministic generator for the bundled synthetic dataset: a small
//! Freebase-style graph of people, places, schools, films and professions,
//! templated questions over it, entity names, and clustered word vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg_store::RawQuestion;
use crate::text_pipeline::relation_tokens;

pub const DEFAULT_SEED: u64 = 20_240_611;
pub const DEFAULT_WORD_DIM: usize = 16;

const FIRST: [&str; 40] = [
    "alice", "bruno", "carla", "dmitri", "elena", "farid", "greta", "hugo", "ingrid", "jonas",
    "keiko", "lars", "maya", "nikolai", "olga", "pablo", "quinn", "rosa", "sven", "tomas",
    "ursula", "victor", "wanda", "xavier", "yara", "zoltan", "amara", "boris", "celine", "diego",
    "esme", "felix", "gemma", "henrik", "isla", "jakob", "kira", "luca", "mira", "noah",
];
const LAST: [&str; 20] = [
    "walker",
    "moreau",
    "ricci",
    "petrov",
    "novak",
    "haddad",
    "lindqvist",
    "brandt",
    "okafor",
    "tanaka",
    "silva",
    "kowalski",
    "fischer",
    "duarte",
    "berg",
    "costa",
    "ivanova",
    "meyer",
    "santos",
    "nakamura",
];
const COUNTRIES: [&str; 8] = [
    "france", "italy", "japan", "brazil", "norway", "kenya", "canada", "poland",
];
const CITIES: [&str; 16] = [
    "lyon", "nice", "turin", "genoa", "osaka", "kyoto", "recife", "belem", "bergen", "tromso",
    "mombasa", "kisumu", "halifax", "regina", "gdansk", "poznan",
];
const UNIVERSITIES: [&str; 6] = [
    "harrow college",
    "lakeside university",
    "northfield institute",
    "st brendan college",
    "meridian university",
    "coastal polytechnic",
];
const DEGREES: [&str; 3] = ["bachelor", "master", "doctorate"];
const PARENT_PROFESSIONS: [&str; 2] = ["artist", "scientist"];
const PROFESSIONS: [(&str, usize); 8] = [
    ("painter", 0),
    ("sculptor", 0),
    ("actor", 0),
    ("singer", 0),
    ("chemist", 1),
    ("physicist", 1),
    ("biologist", 1),
    ("geologist", 1),
];
const FILMS: [&str; 10] = [
    "silent harbor",
    "red orchard",
    "glass river",
    "iron meadow",
    "silver moon",
    "winter signal",
    "golden hour",
    "last lantern",
    "hollow crown",
    "blue canyon",
];
const CHARACTERS: [&str; 24] = [
    "captain reyes",
    "doctor hale",
    "agent mori",
    "lady ashford",
    "the stranger",
    "old tom",
    "sister grace",
    "detective ward",
    "king aldric",
    "young pip",
    "professor lune",
    "mother hen",
    "the pilot",
    "baron vex",
    "nurse ada",
    "coach riley",
    "the twin",
    "mayor quill",
    "officer bell",
    "uncle saul",
    "queen isolde",
    "the painter",
    "judge hart",
    "little wren",
];
const GENDERS: [&str; 2] = ["female", "male"];

/// Relations in the generated graph.
pub mod rel {
    pub const BORN: &str = "people.person.place_of_birth";
    pub const CONTAINED_BY: &str = "location.location.containedby";
    pub const CAPITAL: &str = "location.country.capital";
    pub const EDUCATION: &str = "people.person.education";
    pub const INSTITUTION: &str = "education.education.institution";
    pub const DEGREE: &str = "education.education.degree";
    pub const PROFESSION: &str = "people.person.profession";
    pub const SPECIALIZATION: &str = "people.profession.specialization_of";
    pub const ACTED: &str = "film.actor.film";
    pub const PERF_FILM: &str = "film.performance.film";
    pub const PERF_CHARACTER: &str = "film.performance.character";
    pub const SPOUSE_S: &str = "people.person.spouse_s";
    pub const MARRIAGE_SPOUSE: &str = "people.marriage.spouse";
    pub const GENDER: &str = "people.person.gender";
}

/// Word clusters that share a direction in the generated embeddings.
const CLUSTERS: [&[&str]; 8] = [
    &["born", "birth", "place", "where"],
    &["country", "containedby", "location", "capital"],
    &[
        "college",
        "education",
        "institution",
        "attend",
        "school",
        "university",
    ],
    &["degree", "earn", "bachelor", "master", "doctorate"],
    &["films", "film", "act", "actor", "performance", "in"],
    &["character", "play", "role"],
    &["profession", "specialization", "job", "of"],
    &["married", "spouse", "marriage", "s"],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub triples: Vec<[String; 3]>,
    pub questions: Vec<RawQuestion>,
    pub names: Vec<(String, String)>,
    pub embeddings: Vec<(String, Vec<f64>)>,
}

struct Builder {
    triples: Vec<[String; 3]>,
    names: Vec<(String, String)>,
    next: usize,
}

impl Builder {
    fn entity(&mut self, name: Option<&str>) -> String {
        let id = format!("m.0s{:03}", self.next);
        self.next += 1;
        if let Some(n) = name {
            self.names.push((id.clone(), n.to_string()));
        }
        id
    }

    fn edge(&mut self, s: &str, r: &str, o: &str) {
        self.triples
            .push([s.to_string(), r.to_string(), o.to_string()]);
    }
}

struct Person {
    id: String,
    name: String,
    city: usize,
    university: usize,
    degree: usize,
    profession: usize,
    films: Vec<(usize, usize)>,
    spouse: Option<usize>,
}

/// Generates the dataset. The same seed always yields the same dataset.
pub fn generate(seed: u64, word_dim: usize) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        triples: Vec::new(),
        names: Vec::new(),
        next: 1,
    };
    let genders: Vec<String> = GENDERS.iter().map(|g| b.entity(Some(g))).collect();
    let countries: Vec<String> = COUNTRIES.iter().map(|c| b.entity(Some(c))).collect();
    let cities: Vec<String> = CITIES.iter().map(|c| b.entity(Some(c))).collect();
    for (i, c) in cities.iter().enumerate() {
        let country = countries[i / 2].clone();
        b.edge(c, rel::CONTAINED_BY, &country);
    }
    for (i, c) in countries.clone().iter().enumerate() {
        let cap = cities[2 * i].clone();
        b.edge(c, rel::CAPITAL, &cap);
    }
    let universities: Vec<String> = UNIVERSITIES.iter().map(|u| b.entity(Some(u))).collect();
    for (i, u) in universities.iter().enumerate() {
        let city = cities[(i * 5 + 1) % cities.len()].clone();
        b.edge(u, rel::CONTAINED_BY, &city);
    }
    let degrees: Vec<String> = DEGREES.iter().map(|d| b.entity(Some(d))).collect();
    let parents: Vec<String> = PARENT_PROFESSIONS
        .iter()
        .map(|p| b.entity(Some(p)))
        .collect();
    let professions: Vec<String> = PROFESSIONS.iter().map(|(p, _)| b.entity(Some(p))).collect();
    for (i, (_, parent)) in PROFESSIONS.iter().enumerate() {
        let (p, q) = (professions[i].clone(), parents[*parent].clone());
        b.edge(&p, rel::SPECIALIZATION, &q);
    }
    let films: Vec<String> = FILMS.iter().map(|f| b.entity(Some(f))).collect();
    let characters: Vec<String> = CHARACTERS.iter().map(|c| b.entity(Some(c))).collect();

    let mut people: Vec<Person> = Vec::new();
    let mut next_character = 0;
    for (i, first) in FIRST.iter().enumerate() {
        let name = format!("{first} {}", LAST[i % LAST.len()]);
        let id = b.entity(Some(&name));
        let actor = i % 2 == 0 && next_character < CHARACTERS.len();
        let mut person_films = Vec::new();
        if actor {
            let count = 1 + usize::from(rng.gen_bool(0.3));
            let mut used = BTreeSet::new();
            for _ in 0..count {
                if next_character >= CHARACTERS.len() {
                    break;
                }
                let mut f = rng.gen_range(0..FILMS.len());
                while !used.insert(f) {
                    f = (f + 1) % FILMS.len();
                }
                person_films.push((f, next_character));
                next_character += 1;
            }
        }
        people.push(Person {
            id,
            name,
            city: rng.gen_range(0..CITIES.len()),
            university: rng.gen_range(0..UNIVERSITIES.len()),
            degree: rng.gen_range(0..DEGREES.len()),
            profession: if actor {
                2
            } else {
                rng.gen_range(0..PROFESSIONS.len())
            },
            films: person_films,
            spouse: None,
        });
    }
    // pair every fourth person with the next one
    for i in (0..people.len() - 1).step_by(4) {
        people[i].spouse = Some(i + 1);
    }

    for i in 0..people.len() {
        let pid = people[i].id.clone();
        let g = genders[i % 2].clone();
        b.edge(&pid, rel::GENDER, &g);
        let city = cities[people[i].city].clone();
        b.edge(&pid, rel::BORN, &city);
        let edu = b.entity(None);
        b.edge(&pid, rel::EDUCATION, &edu);
        let (u, d) = (
            universities[people[i].university].clone(),
            degrees[people[i].degree].clone(),
        );
        b.edge(&edu, rel::INSTITUTION, &u);
        b.edge(&edu, rel::DEGREE, &d);
        let prof = professions[people[i].profession].clone();
        b.edge(&pid, rel::PROFESSION, &prof);
        for &(f, c) in &people[i].films.clone() {
            let perf = b.entity(None);
            b.edge(&pid, rel::ACTED, &perf);
            let (fi, ci) = (films[f].clone(), characters[c].clone());
            b.edge(&perf, rel::PERF_FILM, &fi);
            b.edge(&perf, rel::PERF_CHARACTER, &ci);
        }
        if let Some(s) = people[i].spouse {
            let m = b.entity(None);
            b.edge(&pid, rel::SPOUSE_S, &m);
            let sid = people[s].id.clone();
            b.edge(&m, rel::MARRIAGE_SPOUSE, &sid);
        }
    }

    let questions = make_questions(
        &people,
        &cities,
        &countries,
        &universities,
        &degrees,
        &professions,
        &films,
        &characters,
    );
    let embeddings = make_embeddings(&mut rng, word_dim, &b.triples, &b.names, &questions);
    SyntheticDataset {
        triples: b.triples,
        questions,
        names: b.names,
        embeddings,
    }
}

#[allow(clippy::too_many_arguments)]
fn make_questions(
    people: &[Person],
    cities: &[String],
    countries: &[String],
    universities: &[String],
    degrees: &[String],
    professions: &[String],
    films: &[String],
    characters: &[String],
) -> Vec<RawQuestion> {
    type Template = (&'static str, fn(&Person) -> bool);
    const TEMPLATES: [Template; 8] = [
        ("where was {} born ?", |_| true),
        ("which country was {} born in ?", |_| true),
        ("what college did {} attend ?", |_| true),
        ("what films did {} act in ?", |p| !p.films.is_empty()),
        ("what is the profession of {} ?", |_| true),
        ("who is {} married to ?", |p| p.spouse.is_some()),
        ("what degree did {} earn ?", |_| true),
        ("what character did {} play ?", |p| !p.films.is_empty()),
    ];
    let mut cursor = [0usize; 8];
    let mut out = Vec::new();
    for q in 0..50 {
        let t = q % TEMPLATES.len();
        let (text, ok) = TEMPLATES[t];
        let start = cursor[t];
        let mut pick = None;
        for step in 0..people.len() {
            let i = (start + step * 7 + t * 3) % people.len();
            if ok(&people[i]) {
                pick = Some(i);
                cursor[t] = start + step + 1;
                break;
            }
        }
        let p = &people[pick.expect("template applies to someone")];
        let answers: Vec<String> = match t {
            0 => vec![cities[p.city].clone()],
            1 => vec![countries[p.city / 2].clone()],
            2 => vec![universities[p.university].clone()],
            3 => p.films.iter().map(|&(f, _)| films[f].clone()).collect(),
            4 => vec![professions[p.profession].clone()],
            5 => vec![people[p.spouse.expect("spouse")].id.clone()],
            6 => vec![degrees[p.degree].clone()],
            _ => p
                .films
                .iter()
                .map(|&(_, c)| characters[c].clone())
                .collect(),
        };
        let text = text.replace("{}", &p.name);
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        out.push(RawQuestion {
            id: format!("syn-{q:03}"),
            text,
            tokens,
            topic_entities: vec![p.id.clone()],
            answers,
            dependency_edges: None,
        });
    }
    out
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn make_embeddings<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    triples: &[[String; 3]],
    names: &[(String, String)],
    questions: &[RawQuestion],
) -> Vec<(String, Vec<f64>)> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    for q in questions {
        words.extend(q.tokens.iter().cloned());
    }
    for (_, n) in names {
        words.extend(n.split_whitespace().map(str::to_string));
    }
    for t in triples {
        words.extend(relation_tokens(&t[1]));
    }
    for c in CLUSTERS {
        words.extend(c.iter().map(|s| s.to_string()));
    }
    let centres: Vec<Vec<f64>> = (0..CLUSTERS.len())
        .map(|_| (0..dim).map(|_| normal(rng)).collect())
        .collect();
    let mut membership: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, c) in CLUSTERS.iter().enumerate() {
        for w in *c {
            membership.entry(w).or_default().push(k);
        }
    }
    let scale = 1.0 / (dim as f64).sqrt();
    words
        .into_iter()
        .map(|w| {
            let noise: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
            let v: Vec<f64> = match membership.get(w.as_str()) {
                Some(ks) => (0..dim)
                    .map(|j| {
                        let c = ks.iter().map(|&k| centres[k][j]).sum::<f64>() / ks.len() as f64;
                        (c + 0.3 * noise[j]) * scale
                    })
                    .collect(),
                None => noise.iter().map(|x| x * scale).collect(),
            };
            // fixed precision keeps the text file stable and readable
            let v = v.iter().map(|x| (x * 1e6).round() / 1e6).collect();
            (w, v)
        })
        .collect()
}

impl SyntheticDataset {
    pub fn triples_tsv(&self) -> String {
        let mut s = String::new();
        for [a, r, b] in &self.triples {
            let _ = writeln!(s, "{a}\t{r}\t{b}");
        }
        s
    }

    pub fn questions_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for q in &self.questions {
            s.push_str(&serde_json::to_string(q)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn names_tsv(&self) -> String {
        let mut s = String::new();
        for (id, n) in &self.names {
            let _ = writeln!(s, "{id}\t{n}");
        }
        s
    }

    pub fn embeddings_txt(&self) -> String {
        let mut s = String::new();
        for (w, v) in &self.embeddings {
            s.push_str(w);
            for x in v {
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        }
        s
    }

    /// File name and contents of every fixture file.
    pub fn files(&self) -> Result<Vec<(&'static str, String)>> {
        Ok(vec![
            ("triples.tsv", self.triples_tsv()),
            ("questions.jsonl", self.questions_jsonl()?),
            ("entity_names.tsv", self.names_tsv()),
            ("embeddings.txt", self.embeddings_txt()),
        ])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in self.files()? {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Triples of the two-branch education example graph.
pub const EDUCATION_TRIPLES: [[&str; 3]; 6] = [
    ["m.051cc", "people.person.education", "m.0n1dd_q"],
    ["m.0n1dd_q", "education.education.institution", "m.0gl5_"],
    ["m.0n1dd_q", "education.education.degree", "m.02h4rq6"],
    ["m.051cc", "symbols.name_source.namesakes", "m.076hxb3"],
    [
        "m.076hxb3",
        "education.educational_institution.school_type",
        "m.05jxkf",
    ],
    ["m.076hxb3", "location.location.containedby", "m.0f2tj"],
];

pub fn education_question() -> RawQuestion {
    let text = "where did m.051cc go to school ?";
    RawQuestion {
        id: "edu-1".into(),
        text: text.into(),
        tokens: text.split_whitespace().map(str::to_string).collect(),
        topic_entities: vec!["m.051cc".into()],
        answers: vec!["m.0gl5_".into()],
        dependency_edges: None,
    }
}
