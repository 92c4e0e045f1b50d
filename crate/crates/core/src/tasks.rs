//! Synthetic retrieval tasks, byte-level corpora and the passkey evaluator.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::memmamba::MemMamba;
use crate::seed;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Index of the token the answer depends on.
    pub key_pos: usize,
    /// Positions between the key and the first prediction.
    pub distance: usize,
}

/// A token sequence whose `target` tokens are predicted from positions
/// `answer_pos, answer_pos + 1, …`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub target: Vec<usize>,
    pub answer_pos: usize,
    pub meta: SampleMeta,
}

impl TaskSample {
    /// `(position, target)` pairs for the loss.
    pub fn loss_targets(&self) -> Vec<(usize, usize)> {
        self.target.iter().enumerate().map(|(i, &t)| (self.answer_pos + i, t)).collect()
    }
}

/// Token ranges of the passkey task for a given vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PasskeyVocab {
    pub filler: usize,
    pub keys: std::ops::Range<usize>,
    pub marker: usize,
    pub query: usize,
}

impl PasskeyVocab {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 16 {
            return Err(param_err(format!("passkey needs vocab ≥ 16, got {vocab}")));
        }
        let marker = vocab - 2;
        let n_keys = marker / 4;
        Ok(Self {
            filler: marker - n_keys,
            keys: marker - n_keys..marker,
            marker,
            query: vocab - 1,
        })
    }
}

/// Filler with `marker, passkey` planted at a uniform position and the
/// suffix `query, marker`; the answer is read at the last position.
pub fn gen_passkey(seq_len: usize, vocab: usize, seed: u64) -> Result<TaskSample> {
    if seq_len < 8 {
        return Err(param_err(format!("passkey needs seq_len ≥ 8, got {seq_len}")));
    }
    let v = PasskeyVocab::new(vocab)?;
    let mut rng = seed::rng(seed, "passkey");
    let mut tokens: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..v.filler)).collect();
    let key_pos = rng.gen_range(1..=seq_len - 3);
    let key = rng.gen_range(v.keys.clone());
    tokens[key_pos - 1] = v.marker;
    tokens[key_pos] = key;
    tokens[seq_len - 2] = v.query;
    tokens[seq_len - 1] = v.marker;
    Ok(TaskSample {
        tokens,
        target: vec![key],
        answer_pos: seq_len - 1,
        meta: SampleMeta {
            key_pos,
            distance: seq_len - 1 - key_pos,
        },
    })
}

/// `payload, filler, separator, payload`. Payload tokens come from the
/// lower half of the vocabulary, filler from the upper half, and the last
/// token id is the separator.
pub fn gen_copy(seq_len: usize, payload_len: usize, vocab: usize, seed: u64) -> Result<TaskSample> {
    if payload_len == 0 || 2 * payload_len >= seq_len {
        return Err(param_err(format!(
            "payload of {payload_len} does not fit twice in {seq_len} tokens"
        )));
    }
    if vocab < 4 {
        return Err(param_err("copy needs vocab ≥ 4"));
    }
    let sep = vocab - 1;
    let half = sep / 2;
    let mut rng = seed::rng(seed, "copy");
    let payload: Vec<usize> = (0..payload_len).map(|_| rng.gen_range(0..half)).collect();
    let filler = seq_len - 2 * payload_len - 1;
    let mut tokens = payload.clone();
    tokens.extend((0..filler).map(|_| rng.gen_range(half..sep)));
    tokens.push(sep);
    tokens.extend_from_slice(&payload);
    let answer_pos = seq_len - payload_len - 1;
    Ok(TaskSample {
        tokens,
        target: payload,
        answer_pos,
        meta: SampleMeta {
            key_pos: 0,
            distance: answer_pos,
        },
    })
}

/// Documents `marker, key, value, filler…`; `needles` of them sit among
/// `noise` distractors with their own keys. The suffix `query, key` asks
/// for one needle's value.
pub fn gen_doc_retrieval(needles: usize, noise: usize, doc_len: usize, vocab: usize, seed: u64) -> Result<TaskSample> {
    let v = PasskeyVocab::new(vocab)?;
    if needles == 0 || doc_len < 3 {
        return Err(param_err("need at least one needle and documents of ≥ 3 tokens"));
    }
    if needles + noise > v.keys.len() {
        return Err(param_err(format!(
            "{} documents exceed the {} distinct keys",
            needles + noise,
            v.keys.len()
        )));
    }
    let mut rng = seed::rng(seed, "docs");
    let mut keys: Vec<usize> = v.keys.clone().collect();
    keys.shuffle(&mut rng);
    let mut docs: Vec<(bool, Vec<usize>)> = keys[..needles + noise]
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut d = vec![v.marker, k];
            d.extend((2..doc_len).map(|_| rng.gen_range(0..v.filler)));
            (i < needles, d)
        })
        .collect();
    docs.shuffle(&mut rng);
    let asked = rng.gen_range(0..needles);
    let mut tokens = Vec::with_capacity((needles + noise) * doc_len + 2);
    let mut seen = 0;
    let mut found = None;
    for (needle, d) in &docs {
        if *needle {
            if seen == asked {
                found = Some((tokens.len(), d[1], d[2]));
            }
            seen += 1;
        }
        tokens.extend_from_slice(d);
    }
    let (start, key, value) = found.expect("asked needle exists");
    tokens.push(v.query);
    tokens.push(key);
    let answer_pos = tokens.len() - 1;
    Ok(TaskSample {
        tokens,
        target: vec![value],
        answer_pos,
        meta: SampleMeta {
            key_pos: start + 2,
            distance: answer_pos - start - 2,
        },
    })
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(samples: &[TaskSample], mut w: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<TaskSample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Byte-level tokens of a file.
pub fn load_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

/// Consecutive non-overlapping windows; the last may be shorter.
pub fn windows(tokens: &[usize], context_len: usize) -> Result<std::slice::Chunks<'_, usize>> {
    if context_len == 0 {
        return Err(param_err("context length must be positive"));
    }
    Ok(tokens.chunks(context_len))
}

/// Splits a corpus into a training prefix and a held-out suffix.
pub fn split_corpus(tokens: &[usize], held_out: f64) -> Result<(&[usize], &[usize])> {
    if !(0.0..1.0).contains(&held_out) {
        return Err(param_err("held-out fraction must lie in [0, 1)"));
    }
    let cut = tokens.len() - (tokens.len() as f64 * held_out).round() as usize;
    Ok(tokens.split_at(cut))
}

const WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "was", "he", "she", "it", "that", "his", "her", "with", "as", "on", "for",
    "at", "by", "from", "said", "had", "old", "river", "house", "ship", "letter", "night", "road", "town", "found",
    "left", "came", "went", "saw", "told", "again", "never", "under", "long", "door", "small", "dark", "heard",
];

/// English-like text of about `bytes` bytes in which invented names are
/// introduced and mentioned again paragraphs later, giving structure that
/// a memory can exploit beyond a short context.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = seed::rng(seed, "corpus");
    let name = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
        let len = rng.gen_range(4..8);
        let mut s: String = (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
        s[..1].make_ascii_uppercase();
        s
    };
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let cast: Vec<String> = (0..3).map(|_| name(&mut rng)).collect();
        for (i, c) in cast.iter().enumerate() {
            out.push_str(&format!("{c} was number {i}. "));
        }
        for _ in 0..rng.gen_range(4..9) {
            let len = rng.gen_range(5..12);
            for w in 0..len {
                if w > 0 {
                    out.push(' ');
                }
                if rng.gen_bool(0.15) {
                    out.push_str(cast.choose(&mut rng).expect("nonempty"));
                } else {
                    out.push_str(WORDS.choose(&mut rng).expect("nonempty"));
                }
            }
            out.push_str(". ");
        }
        out.push('\n');
    }
    out.truncate(bytes);
    out
}

/// Anything that produces next-token logits at the last position.
pub trait Predictor: Sync {
    fn predict_last(&self, tokens: &[usize]) -> Result<Vec<f64>>;
}

impl Predictor for MemMamba {
    fn predict_last(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let last = tokens.len().checked_sub(1).ok_or_else(|| Error::Input("empty sequence".into()))?;
        Ok(self.logits_at(tokens, &[last])?.remove(0))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasskeyResult {
    pub length: usize,
    pub accuracy: f64,
    pub samples: usize,
}

/// Fraction of samples whose argmax at the answer position is the first
/// target token. Samples must be passkey-style (answer at the last token).
pub fn passkey_accuracy<P: Predictor + ?Sized>(model: &P, samples: &[TaskSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(param_err("no samples"));
    }
    let hits = samples
        .par_iter()
        .map(|s| {
            let prefix = &s.tokens[..=s.answer_pos];
            Ok(usize::from(argmax(&model.predict_last(prefix)?) == s.target[0]))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Passkey accuracy at each length over `per_length` fresh samples seeded
/// from `seed`'s `eval` stream.
pub fn eval_passkey<P: Predictor + ?Sized>(
    model: &P,
    lengths: &[usize],
    per_length: usize,
    vocab: usize,
    seed: u64,
) -> Result<Vec<PasskeyResult>> {
    let eval = seed::derive(seed, "eval");
    lengths
        .iter()
        .map(|&n| {
            let samples = (0..per_length)
                .map(|i| gen_passkey(n, vocab, seed::derive_indexed(eval, "passkey", (n * 1_000_003 + i) as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(PasskeyResult {
                length: n,
                accuracy: passkey_accuracy(model, &samples)?,
                samples: per_length,
            })
        })
        .collect()
}

pub const PASSKEY_CSV_HEADER: &str = "model_id,length,accuracy,samples";

pub fn passkey_csv_rows(model_id: &str, results: &[PasskeyResult]) -> String {
    results
        .iter()
        .map(|r| format!("{model_id},{},{},{}\n", r.length, r.accuracy, r.samples))
        .collect()
}
