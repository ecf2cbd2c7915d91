//! Utterance corpus: data model, text format, enrolment sets and a synthetic
//! generator with speaker-disjoint splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &str = "fairser-corpus v1";
pub const ENROLMENT_HEADER: &str = "speaker,class,utterance_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub label: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub classes: usize,
    pub neutral_class: usize,
    pub dim: usize,
    pub utterances: Vec<Utterance>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid(format!("empty {kind}")));
    }
    if s.contains([',', ';', '\n', '\r']) {
        return Err(Error::invalid(format!(
            "{kind} `{s}` contains a reserved character"
        )));
    }
    Ok(())
}

impl Corpus {
    /// Builds a corpus and validates every invariant.
    pub fn new(
        classes: usize,
        neutral_class: usize,
        dim: usize,
        utterances: Vec<Utterance>,
    ) -> Result<Self> {
        let c = Corpus {
            classes,
            neutral_class,
            dim,
            utterances,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::invalid("corpus needs at least one class"));
        }
        if self.neutral_class >= self.classes {
            return Err(Error::invalid(format!(
                "neutral class {} >= class count {}",
                self.neutral_class, self.classes
            )));
        }
        let mut ids = HashSet::with_capacity(self.utterances.len());
        let mut speaker_split: HashMap<&str, Split> = HashMap::new();
        for u in &self.utterances {
            check_token("utterance id", &u.id)?;
            check_token("speaker", &u.speaker)?;
            if !ids.insert(u.id.as_str()) {
                return Err(Error::DuplicateId(u.id.clone()));
            }
            if u.features.len() != self.dim {
                return Err(Error::dim(
                    self.dim,
                    u.features.len(),
                    format!("features of `{}`", u.id),
                ));
            }
            if u.label >= self.classes {
                return Err(Error::invalid(format!(
                    "label {} of `{}` out of range for {} classes",
                    u.label, u.id, self.classes
                )));
            }
            if !u.features.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("non-finite feature in `{}`", u.id)));
            }
            match speaker_split.get(u.speaker.as_str()) {
                Some(&s) if s != u.split => {
                    return Err(Error::SpeakerSpansSplits {
                        speaker: u.speaker.clone(),
                        first: s.to_string(),
                        second: u.split.to_string(),
                    })
                }
                Some(_) => {}
                None => {
                    speaker_split.insert(&u.speaker, u.split);
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Speakers of a split, sorted.
    pub fn speakers(&self, split: Split) -> Vec<&str> {
        let set: BTreeSet<&str> = self.split(split).map(|u| u.speaker.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn index(&self) -> HashMap<&str, &Utterance> {
        self.utterances.iter().map(|u| (u.id.as_str(), u)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{CORPUS_MAGIC} C={} D={} neutral={}\n",
            self.classes, self.dim, self.neutral_class
        );
        for u in &self.utterances {
            out.push_str(&format!("{},{},{},{},", u.id, u.speaker, u.split, u.label));
            for (i, v) in u.features.iter().enumerate() {
                if i > 0 {
                    out.push(';');
                }
                // Display for f64 is the shortest representation that
                // parses back to the same value.
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| perr(1, "missing header".into()))?;
        let rest = header
            .strip_prefix(CORPUS_MAGIC)
            .ok_or_else(|| perr(1, format!("expected header `{CORPUS_MAGIC} ...`")))?;
        let mut classes = None;
        let mut dim = None;
        let mut neutral = None;
        for field in rest.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| perr(1, format!("bad header field `{field}`")))?;
            let v: usize = v
                .parse()
                .map_err(|_| perr(1, format!("bad integer in header field `{field}`")))?;
            match k {
                "C" => classes = Some(v),
                "D" => dim = Some(v),
                "neutral" => neutral = Some(v),
                _ => return Err(perr(1, format!("unknown header field `{k}`"))),
            }
        }
        let (classes, dim, neutral_class) = match (classes, dim, neutral) {
            (Some(c), Some(d), Some(n)) => (c, d, n),
            _ => return Err(perr(1, "header must define C, D and neutral".into())),
        };

        let mut utterances = Vec::new();
        let mut ids = HashSet::new();
        let mut speaker_split: HashMap<String, Split> = HashMap::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(5, ',').collect();
            if parts.len() != 5 {
                return Err(perr(
                    lineno,
                    "expected `id,speaker,split,label,features`".into(),
                ));
            }
            let split: Split = parts[2]
                .parse()
                .map_err(|e: Error| perr(lineno, e.to_string()))?;
            let label: usize = parts[3]
                .parse()
                .map_err(|_| perr(lineno, format!("bad label `{}`", parts[3])))?;
            if label >= classes {
                return Err(perr(
                    lineno,
                    format!("label {label} out of range for {classes} classes"),
                ));
            }
            let features = if parts[4].is_empty() {
                Vec::new()
            } else {
                parts[4]
                    .split(';')
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| perr(lineno, format!("bad feature value: {e}")))?
            };
            if features.len() != dim {
                return Err(Error::dim(
                    dim,
                    features.len(),
                    format!("{}:{lineno}", path.display()),
                ));
            }
            if !ids.insert(parts[0].to_string()) {
                return Err(Error::DuplicateId(parts[0].to_string()));
            }
            match speaker_split.get(parts[1]) {
                Some(&s) if s != split => {
                    return Err(Error::SpeakerSpansSplits {
                        speaker: parts[1].to_string(),
                        first: s.to_string(),
                        second: split.to_string(),
                    })
                }
                Some(_) => {}
                None => {
                    speaker_split.insert(parts[1].to_string(), split);
                }
            }
            utterances.push(Utterance {
                id: parts[0].to_string(),
                speaker: parts[1].to_string(),
                split,
                label,
                features,
            });
        }
        Corpus::new(classes, neutral_class, dim, utterances).map_err(|e| match e {
            Error::Invalid(msg) => perr(0, msg),
            other => other,
        })
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Corpus::parse(&text, path)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    corpus.validate()?;
    fs::write(path, corpus.to_text())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Utterance(String),
    Imputed,
}

impl Slot {
    pub fn utterance_id(&self) -> Option<&str> {
        match self {
            Slot::Utterance(id) => Some(id),
            Slot::Imputed => None,
        }
    }
}

/// One slot per class for a single speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrolmentSet {
    pub speaker: String,
    pub slots: Vec<Slot>,
}

impl EnrolmentSet {
    pub fn enrolled_ids(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().filter_map(Slot::utterance_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Base,
    PersN,
    PersE,
    PersA,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::PersN,
        Variant::PersE,
        Variant::PersA,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::PersN => "persn",
            Variant::PersE => "perse",
            Variant::PersA => "persa",
        }
    }

    pub fn uses_enrolment(self) -> bool {
        self != Variant::Base
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "").as_str() {
            "base" => Ok(Variant::Base),
            "persn" => Ok(Variant::PersN),
            "perse" => Ok(Variant::PersE),
            "persa" => Ok(Variant::PersA),
            _ => Err(Error::invalid(format!("unknown variant `{s}`"))),
        }
    }
}

/// Enrolment sets keyed by speaker, plus every enrolled utterance id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Enrolment {
    pub sets: BTreeMap<String, EnrolmentSet>,
    pub enrolled: BTreeSet<String>,
}

impl Enrolment {
    pub fn get(&self, speaker: &str) -> Option<&EnrolmentSet> {
        self.sets.get(speaker)
    }

    pub fn is_enrolled(&self, id: &str) -> bool {
        self.enrolled.contains(id)
    }

    /// Merges sets built for other splits. Speakers are disjoint across splits.
    pub fn extend(&mut self, other: Enrolment) {
        self.sets.extend(other.sets);
        self.enrolled.extend(other.enrolled);
    }

    pub fn to_csv(&self, classes: usize) -> String {
        let mut out = format!("{ENROLMENT_HEADER}\n");
        for set in self.sets.values() {
            for c in 0..classes {
                let id = set.slots.get(c).and_then(Slot::utterance_id).unwrap_or("");
                out.push_str(&format!("{},{c},{id}\n", set.speaker));
            }
        }
        out
    }

    /// Parses the enrolment CSV. Every listed speaker must have exactly one
    /// row per class.
    pub fn parse_csv(text: &str, classes: usize, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == ENROLMENT_HEADER => {}
            _ => return Err(perr(1, format!("expected header `{ENROLMENT_HEADER}`"))),
        }
        let mut slots: BTreeMap<String, Vec<Option<Slot>>> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(perr(lineno, "expected `speaker,class,utterance_id`".into()));
            }
            let class: usize = parts[1]
                .parse()
                .map_err(|_| perr(lineno, format!("bad class `{}`", parts[1])))?;
            if class >= classes {
                return Err(perr(
                    lineno,
                    format!("class {class} out of range for {classes} classes"),
                ));
            }
            let entry = slots
                .entry(parts[0].to_string())
                .or_insert_with(|| vec![None; classes]);
            if entry[class].is_some() {
                return Err(perr(
                    lineno,
                    format!("duplicate slot for speaker `{}` class {class}", parts[0]),
                ));
            }
            entry[class] = Some(if parts[2].is_empty() {
                Slot::Imputed
            } else {
                Slot::Utterance(parts[2].to_string())
            });
        }
        let mut out = Enrolment::default();
        for (speaker, s) in slots {
            let s: Option<Vec<Slot>> = s.into_iter().collect();
            let s =
                s.ok_or_else(|| perr(0, format!("speaker `{speaker}` is missing class rows")))?;
            out.enrolled
                .extend(s.iter().filter_map(Slot::utterance_id).map(str::to_string));
            out.sets
                .insert(speaker.clone(), EnrolmentSet { speaker, slots: s });
        }
        Ok(out)
    }

    /// Checks that referenced utterances exist, belong to the right speaker
    /// and carry the slot's label.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        let index = corpus.index();
        for set in self.sets.values() {
            if set.slots.len() != corpus.classes {
                return Err(Error::dim(
                    corpus.classes,
                    set.slots.len(),
                    format!("slots of `{}`", set.speaker),
                ));
            }
            for (c, slot) in set.slots.iter().enumerate() {
                if let Slot::Utterance(id) = slot {
                    let u = index.get(id.as_str()).ok_or_else(|| {
                        Error::invalid(format!("enrolment references unknown utterance `{id}`"))
                    })?;
                    if u.speaker != set.speaker {
                        return Err(Error::invalid(format!(
                            "enrolment utterance `{id}` belongs to `{}`, not `{}`",
                            u.speaker, set.speaker
                        )));
                    }
                    if u.label != c {
                        return Err(Error::invalid(format!(
                            "enrolment utterance `{id}` has label {}, slot is {c}",
                            u.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn load_enrolment(path: &Path, classes: usize) -> Result<Enrolment> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Enrolment::parse_csv(&text, classes, path)
}

pub fn save_enrolment(enrolment: &Enrolment, classes: usize, path: &Path) -> Result<()> {
    fs::write(path, enrolment.to_csv(classes))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Per speaker of `split`: sort utterances by id (byte order) and take the
/// first utterance of each class; classes never seen are imputed.
pub fn build_enrolment_sets(corpus: &Corpus, split: Split) -> Enrolment {
    let mut by_speaker: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in corpus.split(split) {
        by_speaker.entry(&u.speaker).or_default().push(u);
    }
    let mut out = Enrolment::default();
    for (speaker, mut utts) in by_speaker {
        utts.sort_by(|a, b| a.id.as_bytes().cmp(b.id.as_bytes()));
        let mut slots = vec![Slot::Imputed; corpus.classes];
        for u in utts {
            if slots[u.label] == Slot::Imputed {
                slots[u.label] = Slot::Utterance(u.id.clone());
                out.enrolled.insert(u.id.clone());
            }
        }
        out.sets.insert(
            speaker.to_string(),
            EnrolmentSet {
                speaker: speaker.to_string(),
                slots,
            },
        );
    }
    out
}

pub fn build_all_enrolment_sets(corpus: &Corpus) -> Enrolment {
    let mut out = Enrolment::default();
    for s in Split::ALL {
        out.extend(build_enrolment_sets(corpus, s));
    }
    out
}

/// Slots used by a variant, in class order. Imputed slots are kept.
pub fn select_enrolment(set: &EnrolmentSet, variant: Variant, neutral_class: usize) -> Vec<Slot> {
    match variant {
        Variant::Base => Vec::new(),
        Variant::PersN => set.slots.get(neutral_class).cloned().into_iter().collect(),
        Variant::PersE => set
            .slots
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != neutral_class)
            .map(|(_, s)| s.clone())
            .collect(),
        Variant::PersA => set.slots.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Speakers in train, dev, test.
    pub speakers: [usize; 3],
    pub per_speaker: usize,
    pub classes: usize,
    pub dim: usize,
    pub class_scale: f64,
    pub offset_scale: f64,
    /// Fraction of offset variance shared by all classes of a speaker, in
    /// [0, 1]. 0 gives independent per-class offsets.
    pub offset_sharing: f64,
    pub noise_scale: f64,
    /// Probability of the neutral class (class 0); the rest is uniform.
    pub neutral_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            speakers: [6, 2, 8],
            per_speaker: 40,
            classes: 4,
            dim: 16,
            class_scale: 1.0,
            offset_scale: 1.0,
            offset_sharing: 0.5,
            noise_scale: 0.5,
            neutral_prob: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers.contains(&0) {
            return Err(Error::invalid("every split needs at least one speaker"));
        }
        if self.per_speaker == 0 || self.dim == 0 {
            return Err(Error::invalid(
                "utterances per speaker and dimension must be >= 1",
            ));
        }
        if self.classes < 2 {
            return Err(Error::invalid("synthetic corpus needs at least 2 classes"));
        }
        for (name, v) in [
            ("class scale", self.class_scale),
            ("offset scale", self.offset_scale),
            ("noise scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.offset_sharing) {
            return Err(Error::invalid("offset sharing must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.neutral_prob) {
            return Err(Error::invalid("neutral probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Features are `class_mean[label] + speaker_offset[speaker][label] + noise`.
/// Each offset mixes a speaker-wide shift with a per-class deviation,
/// `scale * (sqrt(sharing) * shift + sqrt(1 - sharing) * deviation)`.
/// Class 0 is neutral.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| gaussian_vec(&mut rng, cfg.dim, cfg.class_scale))
        .collect();
    let mut utterances = Vec::with_capacity(cfg.speakers.iter().sum::<usize>() * cfg.per_speaker);
    for (split, &n_speakers) in Split::ALL.iter().zip(&cfg.speakers) {
        let prefix = match split {
            Split::Train => "tr",
            Split::Dev => "dv",
            Split::Test => "te",
        };
        for s in 0..n_speakers {
            let speaker = format!("{prefix}{s:03}");
            let shared = gaussian_vec(&mut rng, cfg.dim, 1.0);
            let (ws, wc) = (cfg.offset_sharing.sqrt(), (1.0 - cfg.offset_sharing).sqrt());
            let offsets: Vec<Vec<f64>> = (0..cfg.classes)
                .map(|_| {
                    gaussian_vec(&mut rng, cfg.dim, 1.0)
                        .iter()
                        .zip(&shared)
                        .map(|(c, s)| cfg.offset_scale * (ws * s + wc * c))
                        .collect()
                })
                .collect();
            for i in 0..cfg.per_speaker {
                let label = if rng.random::<f64>() < cfg.neutral_prob {
                    0
                } else {
                    1 + rng.random_range(0..cfg.classes - 1)
                };
                let noise = gaussian_vec(&mut rng, cfg.dim, cfg.noise_scale);
                let features = (0..cfg.dim)
                    .map(|d| means[label][d] + offsets[label][d] + noise[d])
                    .collect();
                utterances.push(Utterance {
                    id: format!("{speaker}_{i:04}"),
                    speaker: speaker.clone(),
                    split: *split,
                    label,
                    features,
                });
            }
        }
    }
    Corpus::new(cfg.classes, 0, cfg.dim, utterances)
}
