use std::collections::HashMap;

use crate::{LmError, Result};

/// Splits text into maximal runs of whitespace and non-whitespace; merges
/// never cross a chunk boundary.
fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev: Option<bool> = None;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if prev.is_some_and(|p| p != ws) {
            out.push(&text[start..i]);
            start = i;
        }
        prev = Some(ws);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn apply_merge(word: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut i = 0;
    let mut out = Vec::with_capacity(word.len());
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

/// Greedy byte-pair merges until the text vocabulary reaches `vocab_size`
/// or no pair repeats. Ties go to the smallest `(left, right)` pair.
pub fn bpe_train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vec<(u32, u32)>> {
    if vocab_size < 256 {
        return Err(LmError::Config(format!(
            "vocab_size {vocab_size} below the 256-byte base"
        )));
    }
    if corpus.iter().all(|l| l.as_ref().is_empty()) {
        return Err(LmError::Input("empty BPE corpus".into()));
    }
    let mut words: Vec<Vec<u32>> = corpus
        .iter()
        .flat_map(|l| {
            chunks(l.as_ref())
                .into_iter()
                .map(|c| c.bytes().map(u32::from).collect())
        })
        .collect();
    let mut merges = Vec::new();
    while 256 + merges.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for w in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let id = 256 + merges.len() as u32;
        for w in &mut words {
            apply_merge(w, pair, id);
        }
        merges.push(pair);
    }
    Ok(merges)
}

/// Id layout: bytes `0..256`, merges, specials `BOS, EOS, PAD, SEP_text,
/// SEP_scale[0..N]`, then one speech range per scale (coarse→fine).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(u32, u32)>,
    codebook_sizes: Vec<usize>,
    speech_offsets: Vec<u32>,
}

const SPECIAL_NAMES: [&str; 4] = ["BOS", "EOS", "PAD", "SEP_TEXT"];

impl Vocabulary {
    pub fn new(merges: Vec<(u32, u32)>, codebook_sizes: Vec<usize>) -> Result<Self> {
        if codebook_sizes.is_empty() || codebook_sizes.contains(&0) {
            return Err(LmError::Config("every scale needs a non-empty codebook".into()));
        }
        for (i, &(a, b)) in merges.iter().enumerate() {
            let limit = 256 + i as u32;
            if a >= limit || b >= limit {
                return Err(LmError::Format(format!("merge {i} refers to a later token")));
            }
        }
        let mut v = Self {
            merges,
            codebook_sizes,
            speech_offsets: Vec::new(),
        };
        let mut next = v.specials_start() + 4 + v.codebook_sizes.len() as u32;
        for &k in &v.codebook_sizes {
            v.speech_offsets.push(next);
            next += k as u32;
        }
        Ok(v)
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn codebook_sizes(&self) -> &[usize] {
        &self.codebook_sizes
    }

    pub fn num_scales(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn text_size(&self) -> u32 {
        256 + self.merges.len() as u32
    }

    fn specials_start(&self) -> u32 {
        self.text_size()
    }

    pub fn bos(&self) -> u32 {
        self.specials_start()
    }

    pub fn eos(&self) -> u32 {
        self.specials_start() + 1
    }

    pub fn pad(&self) -> u32 {
        self.specials_start() + 2
    }

    pub fn sep_text(&self) -> u32 {
        self.specials_start() + 3
    }

    pub fn sep_scale(&self, scale: usize) -> u32 {
        self.specials_start() + 4 + scale as u32
    }

    pub fn size(&self) -> usize {
        let last = self.codebook_sizes.len() - 1;
        (self.speech_offsets[last] as usize) + self.codebook_sizes[last]
    }

    pub fn speech_id(&self, scale: usize, code: u32) -> u32 {
        debug_assert!((code as usize) < self.codebook_sizes[scale]);
        self.speech_offsets[scale] + code
    }

    /// Codebook index if `id` is a speech token of `scale`.
    pub fn speech_code(&self, scale: usize, id: u32) -> Option<u32> {
        let off = self.speech_offsets[scale];
        (id >= off && ((id - off) as usize) < self.codebook_sizes[scale]).then(|| id - off)
    }

    /// Contiguous id range of one scale's speech tokens.
    pub fn speech_range(&self, scale: usize) -> std::ops::Range<u32> {
        let off = self.speech_offsets[scale];
        off..off + self.codebook_sizes[scale] as u32
    }

    pub fn is_text(&self, id: u32) -> bool {
        id < self.text_size()
    }

    fn token_bytes(&self, id: u32, out: &mut Vec<u8>) {
        if id < 256 {
            out.push(id as u8);
        } else {
            let (a, b) = self.merges[(id - 256) as usize];
            self.token_bytes(a, out);
            self.token_bytes(b, out);
        }
    }

    /// Byte-level BPE encoding, applying merges in training order.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let ranks: HashMap<(u32, u32), usize> = self.merges.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let mut out = Vec::new();
        for chunk in chunks(text) {
            let mut word: Vec<u32> = chunk.bytes().map(u32::from).collect();
            loop {
                let best = word.windows(2).filter_map(|p| ranks.get(&(p[0], p[1])).copied()).min();
                let Some(rank) = best else { break };
                apply_merge(&mut word, self.merges[rank], 256 + rank as u32);
            }
            out.extend(word);
        }
        out
    }

    /// Text for ids in the text range; other ids are rejected.
    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if !self.is_text(id) {
                return Err(LmError::Input(format!("id {id} is not a text token")));
            }
            self.token_bytes(id, &mut bytes);
        }
        String::from_utf8(bytes).map_err(|e| LmError::Input(format!("invalid UTF-8: {e}")))
    }

    /// Human-readable name of any id.
    pub fn symbol(&self, id: u32) -> Result<String> {
        if id < 256 {
            return Ok(format!("<0x{id:02X}>"));
        }
        if self.is_text(id) {
            let mut b = Vec::new();
            self.token_bytes(id, &mut b);
            return Ok(String::from_utf8_lossy(&b).into_owned());
        }
        let s = self.specials_start();
        if id < s + 4 {
            return Ok(format!("<{}>", SPECIAL_NAMES[(id - s) as usize]));
        }
        if id < s + 4 + self.num_scales() as u32 {
            return Ok(format!("<SEP_SCALE_{}>", id - s - 4));
        }
        for scale in 0..self.num_scales() {
            if let Some(code) = self.speech_code(scale, id) {
                return Ok(format!("<S{scale}_{code}>"));
            }
        }
        Err(LmError::Input(format!("id {id} outside vocabulary of {}", self.size())))
    }

    /// Plain-text vocabulary file: scale table, specials table, one merge per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("cofi-vocab 1\n");
        for (i, k) in self.codebook_sizes.iter().enumerate() {
            s.push_str(&format!("scale {i} {k} {}\n", self.speech_offsets[i]));
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            s.push_str(&format!("special {name} {}\n", self.specials_start() + i as u32));
        }
        for i in 0..self.num_scales() {
            s.push_str(&format!("special SEP_SCALE_{i} {}\n", self.sep_scale(i)));
        }
        for (a, b) in &self.merges {
            s.push_str(&format!("merge {a} {b}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("cofi-vocab 1") {
            return Err(LmError::Format("missing vocabulary header".into()));
        }
        let mut sizes = Vec::new();
        let mut merges = Vec::new();
        let mut specials = Vec::new();
        let num = |s: Option<&str>| -> Result<u64> {
            s.ok_or_else(|| LmError::Format("truncated line".into()))?
                .parse()
                .map_err(|e| LmError::Format(format!("bad number: {e}")))
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut f = line.split_whitespace();
            match f.next() {
                Some("scale") => {
                    let idx = num(f.next())? as usize;
                    if idx != sizes.len() {
                        return Err(LmError::Format("scales out of order".into()));
                    }
                    sizes.push(num(f.next())? as usize);
                }
                Some("special") => {
                    let name = f.next().ok_or_else(|| LmError::Format("special without name".into()))?;
                    specials.push((name.to_string(), num(f.next())? as u32));
                }
                Some("merge") => merges.push((num(f.next())? as u32, num(f.next())? as u32)),
                _ => return Err(LmError::Format(format!("unrecognized line {line:?}"))),
            }
        }
        let v = Self::new(merges, sizes)?;
        for (name, id) in specials {
            let expect = match name.as_str() {
                "BOS" => v.bos(),
                "EOS" => v.eos(),
                "PAD" => v.pad(),
                "SEP_TEXT" => v.sep_text(),
                other => match other.strip_prefix("SEP_SCALE_").and_then(|i| i.parse::<usize>().ok()) {
                    Some(i) if i < v.num_scales() => v.sep_scale(i),
                    _ => return Err(LmError::Format(format!("unknown special {other}"))),
                },
            };
            if expect != id {
                return Err(LmError::Format(format!(
                    "special {name} has id {id}, layout implies {expect}"
                )));
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_merge_trace() {
        assert_eq!(bpe_train(&["aaaa"], 257).unwrap(), vec![(97, 97)]);
        assert!(bpe_train(&["abc"], 256).unwrap().is_empty());
        assert!(bpe_train::<&str>(&[], 300).is_err());
        assert!(bpe_train(&["abc"], 100).is_err());
    }

    #[test]
    fn ties_break_on_smallest_pair() {
        // "ab" and "cd" both occur twice; (97, 98) < (99, 100)
        let m = bpe_train(&["cd ab cd ab"], 257).unwrap();
        assert_eq!(m, vec![(97, 98)]);
    }

    #[test]
    fn merges_stay_within_chunks() {
        let m = bpe_train(&["a a a a"], 260).unwrap();
        assert!(m.iter().all(|&(l, r)| !(l == 97 && r == 32) && !(l == 32 && r == 97)));
    }

    #[test]
    fn encode_decode_round_trip() {
        let corpus = ["the cat sat on the mat", "a bad cafe"];
        let v = Vocabulary::new(bpe_train(&corpus, 280).unwrap(), vec![4, 4]).unwrap();
        for text in ["the cat", "mat  on\tthe", "zebra", "", "héllo"] {
            let ids = v.encode_text(text);
            assert_eq!(v.decode_text(&ids).unwrap(), text);
            assert_eq!(v.encode_text(&v.decode_text(&ids).unwrap()), ids);
        }
        assert!(v.encode_text("the cat").len() < "the cat".len());
    }

    #[test]
    fn layout_is_disjoint_and_file_round_trips() {
        let v = Vocabulary::new(vec![(97, 97)], vec![3, 5]).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for id in 0..v.size() as u32 {
            assert!(seen.insert(v.symbol(id).unwrap()), "duplicate symbol for {id}");
        }
        assert!(v.symbol(v.size() as u32).is_err());
        assert_eq!(v.speech_code(1, v.speech_id(1, 4)), Some(4));
        assert_eq!(v.speech_code(0, v.speech_id(1, 0)), None);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text(&v.to_text().replace("special PAD", "special PAD 1 #")).is_err());
    }
}
