//! Byte-pair encoding: vocabulary training, encoding with character span
//! tracking, and alignment of character spans onto sub-word tokens.
//!
//! Words are the maximal non-whitespace segments of the text; a sentinel
//! symbol is appended to every word before merging so merges never cross
//! whitespace. Whitespace characters are kept as their own single-character
//! tokens, which makes decoding reproduce the input text exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Reserved word-end sentinel. Corpora containing this character are
/// rejected at training time.
pub const WORD_END: char = '\u{E000}';

/// Token id of the unknown-symbol special.
pub const UNK_ID: usize = 0;
/// Token id of the padding special.
pub const PAD_ID: usize = 1;

/// Merge budget preset for a small gold-only corpus.
pub const BUDGET_GOLD: usize = 2500;
/// Merge budget preset when weakly labeled data is added.
pub const BUDGET_EXTENDED: usize = 10_000;

/// A trained byte-pair vocabulary: the ordered merge rules plus the
/// token/id maps. Immutable after training; `encode` may be called from
/// any number of threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    /// id -> symbol string. Slots 0 and 1 are the UNK/PAD specials.
    symbols: Vec<String>,
    token_to_id: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    budget: usize,
}

/// One encoded word: token ids, word-relative spans, content flags.
type EncodedWord = (Vec<usize>, Vec<(usize, usize)>, Vec<bool>);

/// Sub-word encoding of a text with per-token character spans.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedText {
    pub token_ids: Vec<usize>,
    /// Half-open character offsets into the original text, one per token.
    pub spans: Vec<(usize, usize)>,
    /// True for word-content tokens (not whitespace, not a bare sentinel).
    pub word_piece: Vec<bool>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.token_to_id.get(symbol).copied()
    }

    /// Display form of a token id: the symbol with the word-end sentinel
    /// stripped; UNK renders as `<unk>`.
    pub fn display(&self, id: usize) -> &str {
        match id {
            UNK_ID => "<unk>",
            PAD_ID => "",
            _ => {
                let s = &self.symbols[id];
                s.strip_suffix(WORD_END).unwrap_or(s)
            }
        }
    }
}

/// Learns a byte-pair vocabulary: starts from every observed character,
/// then repeatedly merges the most frequent adjacent symbol pair until
/// `budget` merges are recorded or no pair remains. Ties break on the
/// lexicographic order of the (left, right) strings.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], budget: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot train BPE on an empty corpus".into()));
    }
    let sentinel = WORD_END.to_string();
    let mut char_set: Vec<String> = Vec::new();
    let mut seen: HashMap<char, ()> = HashMap::new();
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        let text = text.as_ref();
        if text.contains(WORD_END) {
            return Err(Error::Config(format!(
                "corpus contains the reserved sentinel character U+{:04X}",
                WORD_END as u32
            )));
        }
        for ch in text.chars() {
            if seen.insert(ch, ()).is_none() {
                char_set.push(ch.to_string());
            }
        }
        for word in text.split_whitespace() {
            *word_counts.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    char_set.sort();

    // each distinct word as its current symbol sequence, ending in the sentinel
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(w, c)| {
            let mut syms: Vec<String> = w.chars().map(|ch| ch.to_string()).collect();
            syms.push(sentinel.clone());
            (syms, c)
        })
        .collect();
    // deterministic iteration order for the pair counting below
    words.sort();

    let mut merges: Vec<(String, String)> = Vec::new();
    for _ in 0..budget {
        let mut pair_counts: HashMap<(String, String), usize> = HashMap::new();
        for (syms, count) in &words {
            for pair in syms.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += count;
            }
        }
        let Some(best) = pair_counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(pair, _)| pair)
        else {
            break;
        };
        for (syms, _) in &mut words {
            merge_in_place(syms, &best.0, &best.1);
        }
        merges.push(best);
    }

    Ok(build_vocabulary(char_set, merges, budget))
}

fn build_vocabulary(
    char_set: Vec<String>,
    merges: Vec<(String, String)>,
    budget: usize,
) -> Vocabulary {
    let mut symbols = vec!["<unk>".to_string(), "<pad>".to_string()];
    let mut token_to_id = HashMap::new();
    let push = |symbols: &mut Vec<String>, map: &mut HashMap<String, usize>, s: String| {
        if !map.contains_key(&s) {
            map.insert(s.clone(), symbols.len());
            symbols.push(s);
        }
    };
    push(&mut symbols, &mut token_to_id, WORD_END.to_string());
    for c in char_set {
        push(&mut symbols, &mut token_to_id, c);
    }
    for (l, r) in &merges {
        push(&mut symbols, &mut token_to_id, format!("{l}{r}"));
    }
    Vocabulary {
        symbols,
        token_to_id,
        merges,
        budget,
    }
}

/// Replaces every adjacent (left, right) occurrence left-to-right.
fn merge_in_place(syms: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

impl Vocabulary {
    /// Encodes text into sub-word token ids with character spans. Unknown
    /// characters map to UNK; merges apply in learned order within words.
    pub fn encode(&self, text: &str) -> TokenizedText {
        let mut out = TokenizedText {
            token_ids: Vec::new(),
            spans: Vec::new(),
            word_piece: Vec::new(),
        };
        // word -> (ids, relative spans, word_piece flags)
        let mut cache: HashMap<String, EncodedWord> = HashMap::new();

        let chars: Vec<char> = text.chars().collect();
        let mut pos = 0;
        while pos < chars.len() {
            if chars[pos].is_whitespace() {
                let id = self
                    .token_to_id
                    .get(chars[pos].to_string().as_str())
                    .copied()
                    .unwrap_or(UNK_ID);
                out.token_ids.push(id);
                out.spans.push((pos, pos + 1));
                out.word_piece.push(false);
                pos += 1;
                continue;
            }
            let start = pos;
            while pos < chars.len() && !chars[pos].is_whitespace() {
                pos += 1;
            }
            let word: String = chars[start..pos].iter().collect();
            let encoded = cache
                .entry(word)
                .or_insert_with_key(|w| self.encode_word(w));
            for ((&id, &(s, e)), &wp) in encoded.0.iter().zip(&encoded.1).zip(&encoded.2) {
                out.token_ids.push(id);
                out.spans.push((start + s, start + e));
                out.word_piece.push(wp);
            }
        }
        out
    }

    /// Encodes one whitespace-free word; spans are relative to the word.
    fn encode_word(&self, word: &str) -> EncodedWord {
        struct Piece {
            sym: Option<String>, // None marks an unknown character
            start: usize,
            end: usize,
        }
        let mut pieces: Vec<Piece> = word
            .chars()
            .enumerate()
            .map(|(i, ch)| {
                let s = ch.to_string();
                Piece {
                    sym: self.token_to_id.contains_key(s.as_str()).then_some(s),
                    start: i,
                    end: i + 1,
                }
            })
            .collect();
        let n_chars = pieces.len();
        pieces.push(Piece {
            sym: Some(WORD_END.to_string()),
            start: n_chars,
            end: n_chars,
        });

        for (l, r) in &self.merges {
            let mut i = 0;
            while i + 1 < pieces.len() {
                let matches = matches!((&pieces[i].sym, &pieces[i + 1].sym),
                    (Some(a), Some(b)) if a == l && b == r);
                if matches {
                    let right = pieces.remove(i + 1);
                    pieces[i].sym = Some(format!("{l}{r}"));
                    pieces[i].end = right.end;
                }
                i += 1;
            }
        }

        let mut ids = Vec::with_capacity(pieces.len());
        let mut spans = Vec::with_capacity(pieces.len());
        let mut word_piece = Vec::with_capacity(pieces.len());
        for p in pieces {
            let id = match &p.sym {
                Some(s) => self.token_to_id.get(s.as_str()).copied().unwrap_or(UNK_ID),
                None => UNK_ID,
            };
            ids.push(id);
            spans.push((p.start, p.end));
            // a bare sentinel token carries no characters
            word_piece.push(p.start < p.end);
        }
        (ids, spans, word_piece)
    }

    /// Reconstructs text from token ids, skipping PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD_ID {
                continue;
            }
            out.push_str(self.display(id));
        }
        out
    }

    /// Writes the vocabulary file: a header line, one line per initial
    /// symbol, then one merge per line as `left<TAB>right`. Framing
    /// characters inside symbols are backslash-escaped and the word-end
    /// sentinel renders as `\w`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "bpe-v1 {}", self.budget).unwrap();
        let n_merged = self.merges.len();
        for sym in &self.symbols[2..self.symbols.len() - n_merged] {
            writeln!(out, "{}", escape(sym)).unwrap();
        }
        for (l, r) in &self.merges {
            writeln!(out, "{}\t{}", escape(l), escape(r)).unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a vocabulary file written by [`Vocabulary::save`].
    pub fn load(path: &Path) -> Result<Vocabulary> {
        let bad = |msg: String| Error::Format {
            path: path.display().to_string(),
            msg,
        };
        let content = std::fs::read_to_string(path)?;
        let mut lines = content.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let budget = header
            .strip_prefix("bpe-v1 ")
            .and_then(|b| b.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("bad header line {header:?}")))?;
        let mut char_set = Vec::new();
        let mut merges = Vec::new();
        for (no, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some((l, r)) = line.split_once('\t') {
                merges.push((unescape(l, no, path)?, unescape(r, no, path)?));
            } else {
                if !merges.is_empty() {
                    return Err(bad(format!("symbol line {no} after first merge line")));
                }
                let sym = unescape(line, no, path)?;
                if sym != WORD_END.to_string() {
                    char_set.push(sym);
                }
            }
        }
        Ok(build_vocabulary(char_set, merges, budget))
    }
}

fn escape(sym: &str) -> String {
    let mut out = String::with_capacity(sym.len());
    for ch in sym.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            WORD_END => out.push_str("\\w"),
            _ => out.push(ch),
        }
    }
    out
}

fn unescape(s: &str, line: usize, path: &Path) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('w') => out.push(WORD_END),
            other => {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    msg: format!("bad escape {other:?} at line {line}"),
                })
            }
        }
    }
    Ok(out)
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Minimal token index range covering the character span
    /// `[char_start, char_end)`; partial overlap counts. Whitespace and
    /// sentinel tokens never participate in alignment.
    pub fn align_span(&self, char_start: usize, char_end: usize) -> Result<(usize, usize)> {
        if char_start >= char_end {
            return Err(Error::Contract(format!(
                "degenerate span {char_start}..{char_end}"
            )));
        }
        let mut first = None;
        let mut last = None;
        for (i, (&(s, e), &wp)) in self.spans.iter().zip(&self.word_piece).enumerate() {
            if !wp {
                continue;
            }
            if s < char_end && e > char_start {
                if first.is_none() {
                    first = Some(i);
                }
                last = Some(i);
            }
        }
        match (first, last) {
            (Some(f), Some(l)) => Ok((f, l)),
            _ => Err(Error::Align {
                start: char_start,
                end: char_end,
            }),
        }
    }
}
