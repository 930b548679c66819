//! PubTator corpus handling: parsing annotated abstracts, grouping
//! mentions into entities, candidate entity-pair construction with NULL
//! labeling, BIO tag sequences over sub-word tokens, and minibatch
//! sampling by label polarity.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;

use crate::tokenizer::{TokenizedText, Vocabulary};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntityType {
    Chemical,
    Disease,
}

impl EntityType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntityType::Chemical => "Chemical",
            EntityType::Disease => "Disease",
        }
    }

    fn parse(s: &str) -> Option<EntityType> {
        match s {
            "Chemical" => Some(EntityType::Chemical),
            "Disease" => Some(EntityType::Disease),
            _ => None,
        }
    }
}

/// One textual occurrence of an entity. `entity_id` is the raw annotation
/// and may be composite ("D001|D002").
#[derive(Clone, Debug, PartialEq)]
pub struct Mention {
    pub char_start: usize,
    pub char_end: usize,
    pub surface: String,
    pub entity_type: EntityType,
    pub entity_id: String,
}

/// All mentions sharing one identifier within a document. Composite
/// mention ids are split on `|`, so one mention may belong to several
/// entities.
#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub entity_id: String,
    pub entity_type: EntityType,
    /// Indices into `Document::mentions`, in document order.
    pub mention_idxs: Vec<usize>,
}

/// A parsed abstract with raw character-level annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub abstract_text: String,
    /// Title and abstract joined with a single space.
    pub text: String,
    pub mentions: Vec<Mention>,
    pub entities: Vec<Entity>,
    /// Gold (chemical_id, disease_id) pairs.
    pub gold_relations: BTreeSet<(String, String)>,
}

/// Candidate relation label: NULL is an explicit class, not an absence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelLabel {
    Null,
    Cid,
}

impl RelLabel {
    /// Class index used by the relation scorer: NULL = 0, CID = 1.
    pub fn class_index(&self) -> usize {
        match self {
            RelLabel::Null => 0,
            RelLabel::Cid => 1,
        }
    }
}

/// One (chemical entity, disease entity) candidate with the affinity-cell
/// coordinates to pool over: (head token index, tail token index) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePair {
    pub chemical_id: String,
    pub disease_id: String,
    pub label: RelLabel,
    pub cells: Vec<(usize, usize)>,
}

/// Per-token BIO tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BioTag {
    O,
    B(EntityType),
    I(EntityType),
}

impl BioTag {
    /// Index into the fixed tagset {O, B-Chemical, I-Chemical, B-Disease,
    /// I-Disease}.
    pub fn class_index(&self) -> usize {
        match self {
            BioTag::O => 0,
            BioTag::B(EntityType::Chemical) => 1,
            BioTag::I(EntityType::Chemical) => 2,
            BioTag::B(EntityType::Disease) => 3,
            BioTag::I(EntityType::Disease) => 4,
        }
    }

    pub fn from_class_index(i: usize) -> BioTag {
        match i {
            0 => BioTag::O,
            1 => BioTag::B(EntityType::Chemical),
            2 => BioTag::I(EntityType::Chemical),
            3 => BioTag::B(EntityType::Disease),
            4 => BioTag::I(EntityType::Disease),
            _ => panic!("bad tag index {i}"),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BioTag::O => "O",
            BioTag::B(EntityType::Chemical) => "B-Chemical",
            BioTag::I(EntityType::Chemical) => "I-Chemical",
            BioTag::B(EntityType::Disease) => "B-Disease",
            BioTag::I(EntityType::Disease) => "I-Disease",
        }
    }
}

/// Number of BIO classes.
pub const TAGSET_SIZE: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct BioTagSequence(pub Vec<BioTag>);

impl BioTagSequence {
    /// Checks that I-X only follows B-X or I-X.
    pub fn validate(&self) -> Result<()> {
        let mut prev = BioTag::O;
        for (i, &tag) in self.0.iter().enumerate() {
            if let BioTag::I(t) = tag {
                let ok = matches!(prev, BioTag::B(p) | BioTag::I(p) if p == t);
                if !ok {
                    return Err(Error::Contract(format!(
                        "invalid BIO transition {} -> {} at token {i}",
                        prev.as_str(),
                        tag.as_str()
                    )));
                }
            }
            prev = tag;
        }
        Ok(())
    }
}

/// A document ready for the model: tokenized, BIO-tagged, with candidate
/// pairs built.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDocument {
    pub doc: Document,
    pub tokens: TokenizedText,
    pub bio: BioTagSequence,
    pub pairs: Vec<CandidatePair>,
}

/// Which affinity cells an entity pair pools over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MentionCells {
    /// One cell per mention pair, indexed by the first sub-word of each
    /// mention.
    First,
    /// Every (head sub-word, tail sub-word) combination.
    All,
}

impl std::str::FromStr for MentionCells {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(MentionCells::First),
            "all" => Ok(MentionCells::All),
            _ => Err(Error::Config(format!(
                "mention_cells must be 'first' or 'all', got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for MentionCells {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MentionCells::First => "first",
            MentionCells::All => "all",
        })
    }
}

/// Parses a PubTator-format stream into documents. Mention offsets are
/// validated against the joined title + " " + abstract text; duplicate
/// mention lines are dropped.
pub fn parse_pubtator(stream: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut lines = stream.lines().enumerate().peekable();

    while let Some(&(_, line)) = lines.peek() {
        if line.is_empty() {
            lines.next();
            continue;
        }
        docs.push(parse_document(&mut lines)?);
    }
    Ok(docs)
}

fn parse_document<'a>(
    lines: &mut std::iter::Peekable<impl Iterator<Item = (usize, &'a str)>>,
) -> Result<Document> {
    let perr = |doc_id: &str, line: usize, msg: String| Error::Parse {
        doc_id: doc_id.to_string(),
        line: line + 1,
        msg,
    };

    let (t_no, t_line) = lines.next().expect("caller checked non-empty");
    let mut t_parts = t_line.splitn(3, '|');
    let (doc_id, t_tag, title) = (
        t_parts.next().unwrap_or(""),
        t_parts.next().unwrap_or(""),
        t_parts.next().unwrap_or(""),
    );
    if t_tag != "t" || doc_id.is_empty() {
        return Err(perr(
            doc_id,
            t_no,
            format!("expected 'PMID|t|<title>', got {t_line:?}"),
        ));
    }
    let doc_id = doc_id.to_string();

    let (a_no, a_line) = lines
        .next()
        .ok_or_else(|| perr(&doc_id, t_no, "missing abstract line".into()))?;
    let mut a_parts = a_line.splitn(3, '|');
    let (a_id, a_tag, abstract_text) = (
        a_parts.next().unwrap_or(""),
        a_parts.next().unwrap_or(""),
        a_parts.next().unwrap_or(""),
    );
    if a_id != doc_id || a_tag != "a" {
        return Err(perr(
            &doc_id,
            a_no,
            format!("expected '{doc_id}|a|<abstract>', got {a_line:?}"),
        ));
    }

    let text = format!("{title} {abstract_text}");
    let chars: Vec<char> = text.chars().collect();

    let mut mentions: Vec<Mention> = Vec::new();
    let mut gold_relations = BTreeSet::new();
    while let Some(&(no, line)) = lines.peek() {
        if line.is_empty() {
            break;
        }
        lines.next();
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            [id, start, end, surface, ty, entity_id] => {
                if *id != doc_id {
                    return Err(perr(
                        &doc_id,
                        no,
                        format!("mention line for foreign id {id}"),
                    ));
                }
                let char_start: usize = start
                    .parse()
                    .map_err(|_| perr(&doc_id, no, format!("bad start offset {start:?}")))?;
                let char_end: usize = end
                    .parse()
                    .map_err(|_| perr(&doc_id, no, format!("bad end offset {end:?}")))?;
                if char_start >= char_end || char_end > chars.len() {
                    return Err(perr(
                        &doc_id,
                        no,
                        format!("offsets {char_start}..{char_end} out of range"),
                    ));
                }
                let slice: String = chars[char_start..char_end].iter().collect();
                if slice != *surface {
                    return Err(perr(
                        &doc_id,
                        no,
                        format!("surface {surface:?} does not match text slice {slice:?}"),
                    ));
                }
                let entity_type = EntityType::parse(ty)
                    .ok_or_else(|| perr(&doc_id, no, format!("unknown entity type {ty:?}")))?;
                let mention = Mention {
                    char_start,
                    char_end,
                    surface: surface.to_string(),
                    entity_type,
                    entity_id: entity_id.to_string(),
                };
                if !mentions.contains(&mention) {
                    mentions.push(mention);
                }
            }
            [id, "CID", chem, dis] => {
                if *id != doc_id {
                    return Err(perr(
                        &doc_id,
                        no,
                        format!("relation line for foreign id {id}"),
                    ));
                }
                gold_relations.insert((chem.to_string(), dis.to_string()));
            }
            _ => {
                return Err(perr(&doc_id, no, format!("unrecognized line {line:?}")));
            }
        }
    }

    let entities = group_entities(&mentions);
    let known: HashSet<(&str, EntityType)> = entities
        .iter()
        .map(|e| (e.entity_id.as_str(), e.entity_type))
        .collect();
    for (chem, dis) in &gold_relations {
        if !known.contains(&(chem.as_str(), EntityType::Chemical)) {
            return Err(perr(
                &doc_id,
                t_no,
                format!("relation references unknown chemical {chem}"),
            ));
        }
        if !known.contains(&(dis.as_str(), EntityType::Disease)) {
            return Err(perr(
                &doc_id,
                t_no,
                format!("relation references unknown disease {dis}"),
            ));
        }
    }

    Ok(Document {
        doc_id,
        title: title.to_string(),
        abstract_text: abstract_text.to_string(),
        text,
        mentions,
        entities,
        gold_relations,
    })
}

/// Groups mentions into entities by (id, type), splitting composite ids
/// on `|`. Entities appear in first-mention order.
fn group_entities(mentions: &[Mention]) -> Vec<Entity> {
    let mut order: Vec<(String, EntityType)> = Vec::new();
    let mut members: HashMap<(String, EntityType), Vec<usize>> = HashMap::new();
    for (idx, m) in mentions.iter().enumerate() {
        for id in m.entity_id.split('|') {
            let key = (id.to_string(), m.entity_type);
            let slot = members.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Vec::new()
            });
            slot.push(idx);
        }
    }
    order
        .into_iter()
        .map(|(entity_id, entity_type)| {
            let mention_idxs = members[&(entity_id.clone(), entity_type)].clone();
            Entity {
                entity_id,
                entity_type,
                mention_idxs,
            }
        })
        .collect()
}

/// Serializes documents back to the PubTator format, one blank line after
/// each document.
pub fn serialize_pubtator(docs: &[Document]) -> String {
    let mut out = String::new();
    for doc in docs {
        writeln!(out, "{}|t|{}", doc.doc_id, doc.title).unwrap();
        writeln!(out, "{}|a|{}", doc.doc_id, doc.abstract_text).unwrap();
        for m in &doc.mentions {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                doc.doc_id,
                m.char_start,
                m.char_end,
                m.surface,
                m.entity_type.as_str(),
                m.entity_id
            )
            .unwrap();
        }
        for (chem, dis) in &doc.gold_relations {
            writeln!(out, "{}\tCID\t{}\t{}", doc.doc_id, chem, dis).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Builds the BIO tag sequence over sub-word tokens: the first sub-word
/// of each mention gets B, the rest I, everything else O. Overlapping
/// mentions resolve to the longer span; the shorter is dropped with a
/// warning.
pub fn make_bio_tags(doc: &Document, tokens: &TokenizedText) -> Result<BioTagSequence> {
    let mut tags = vec![BioTag::O; tokens.len()];
    let mut taken = vec![false; tokens.len()];

    let mut order: Vec<usize> = (0..doc.mentions.len()).collect();
    order.sort_by_key(|&i| {
        let m = &doc.mentions[i];
        (
            std::cmp::Reverse(m.char_end - m.char_start),
            m.char_start,
            i,
        )
    });

    for idx in order {
        let m = &doc.mentions[idx];
        let (first, last) = tokens.align_span(m.char_start, m.char_end)?;
        if taken[first..=last].iter().any(|&t| t) {
            eprintln!(
                "warning: dropping mention {:?} at {}..{} in {} overlapping a longer mention",
                m.surface, m.char_start, m.char_end, doc.doc_id
            );
            continue;
        }
        for (pos, (tag, taken)) in tags[first..=last]
            .iter_mut()
            .zip(&mut taken[first..=last])
            .enumerate()
        {
            *tag = if pos == 0 {
                BioTag::B(m.entity_type)
            } else {
                BioTag::I(m.entity_type)
            };
            *taken = true;
        }
    }
    Ok(BioTagSequence(tags))
}

/// Builds one candidate per (chemical entity, disease entity) ordered
/// pair, chemical as head. Each candidate carries the affinity cells to
/// pool over and its gold label (NULL when unannotated).
pub fn build_pairs(
    doc: &Document,
    tokens: &TokenizedText,
    cells: MentionCells,
) -> Result<Vec<CandidatePair>> {
    let mention_range = |m: &Mention| tokens.align_span(m.char_start, m.char_end);

    let mut out = Vec::new();
    for chem in doc
        .entities
        .iter()
        .filter(|e| e.entity_type == EntityType::Chemical)
    {
        for dis in doc
            .entities
            .iter()
            .filter(|e| e.entity_type == EntityType::Disease)
        {
            let mut cell_list = Vec::new();
            for &hm in &chem.mention_idxs {
                let (hf, hl) = mention_range(&doc.mentions[hm])?;
                for &tm in &dis.mention_idxs {
                    let (tf, tl) = mention_range(&doc.mentions[tm])?;
                    match cells {
                        MentionCells::First => cell_list.push((hf, tf)),
                        MentionCells::All => {
                            for i in hf..=hl {
                                for j in tf..=tl {
                                    cell_list.push((i, j));
                                }
                            }
                        }
                    }
                }
            }
            let label = if doc
                .gold_relations
                .contains(&(chem.entity_id.clone(), dis.entity_id.clone()))
            {
                RelLabel::Cid
            } else {
                RelLabel::Null
            };
            out.push(CandidatePair {
                chemical_id: chem.entity_id.clone(),
                disease_id: dis.entity_id.clone(),
                label,
                cells: cell_list,
            });
        }
    }
    Ok(out)
}

/// Tokenizes, tags, and builds candidates for every document.
pub fn prepare(
    docs: Vec<Document>,
    vocab: &Vocabulary,
    cells: MentionCells,
) -> Result<Vec<PreparedDocument>> {
    docs.into_iter()
        .map(|doc| {
            let tokens = vocab.encode(&doc.text);
            let bio = make_bio_tags(&doc, &tokens)?;
            let pairs = build_pairs(&doc, &tokens, cells)?;
            Ok(PreparedDocument {
                doc,
                tokens,
                bio,
                pairs,
            })
        })
        .collect()
}

/// A sampled training step: the label polarity and the documents drawn.
#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub polarity: RelLabel,
    pub doc_indices: Vec<usize>,
}

/// Flips a fair coin for the step's polarity, then draws `batch_size`
/// documents with replacement from those containing at least one
/// candidate of that polarity. Falls back to the other polarity with a
/// warning when one side is absent corpus-wide.
pub fn sample_minibatch(
    docs: &[PreparedDocument],
    rng: &mut impl Rng,
    batch_size: usize,
) -> Result<MiniBatch> {
    let with_label = |label: RelLabel| -> Vec<usize> {
        docs.iter()
            .enumerate()
            .filter(|(_, d)| d.pairs.iter().any(|p| p.label == label))
            .map(|(i, _)| i)
            .collect()
    };
    let positives = with_label(RelLabel::Cid);
    let negatives = with_label(RelLabel::Null);
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::Config(
            "no candidate pairs anywhere in the corpus".into(),
        ));
    }

    let mut polarity = if rng.random_bool(0.5) {
        RelLabel::Cid
    } else {
        RelLabel::Null
    };
    let pool = match polarity {
        RelLabel::Cid if positives.is_empty() => {
            warn_once("corpus has no positive candidates; sampling negatives only");
            polarity = RelLabel::Null;
            &negatives
        }
        RelLabel::Null if negatives.is_empty() => {
            warn_once("corpus has no negative candidates; sampling positives only");
            polarity = RelLabel::Cid;
            &positives
        }
        RelLabel::Cid => &positives,
        RelLabel::Null => &negatives,
    };

    let doc_indices = (0..batch_size)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect();
    Ok(MiniBatch {
        polarity,
        doc_indices,
    })
}

fn warn_once(msg: &str) {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| eprintln!("warning: {msg}"));
}
