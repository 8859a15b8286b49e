//! Seeded synthetic labeled corpora.
//!
//! A [`SynthSpec`] lists labels, each with message templates. A template is
//! plain text with `{pool}` placeholders; every placeholder draws a word
//! uniformly from the named pool, and `{num}` draws an integer. Pool words
//! are the pool prefix followed by a letter code (`zqa`, `zqb`, ...), so
//! they survive tokenization as single tokens. A label may also name a rare
//! pool: with probability `rare_rate` a message gets `rare_words` words from
//! it appended.
//!
//! Specs are TOML:
//!
//! ```toml
//! messages_per_label = 100
//!
//! [pools.host]
//! size = 20
//! prefix = "node"
//!
//! [[labels]]
//! name = "disk"
//! templates = ["read error on {host} sector {num}"]
//! rare_pool = "diskrare"
//! rare_rate = 0.2
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub size: usize,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub name: String,
    pub templates: Vec<String>,
    #[serde(default)]
    pub rare_pool: Option<String>,
    #[serde(default)]
    pub rare_rate: f64,
    #[serde(default = "one")]
    pub rare_words: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub messages_per_label: usize,
    #[serde(default)]
    pub pools: BTreeMap<String, PoolSpec>,
    pub labels: Vec<LabelSpec>,
}

/// What was generated, for auditing a corpus after the fact.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthManifest {
    pub seed: u64,
    pub spec_hash: String,
    pub corpus_sha256: String,
    pub lines: usize,
    pub per_label: Vec<(String, usize)>,
    /// Messages that received a rare-word injection, per label.
    pub rare_injected: Vec<(String, usize)>,
}

impl SynthManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "spec_hash={}", self.spec_hash);
        let _ = writeln!(out, "corpus_sha256={}", self.corpus_sha256);
        let _ = writeln!(out, "lines={}", self.lines);
        for (l, n) in &self.per_label {
            let _ = writeln!(out, "messages.{l}={n}");
        }
        for (l, n) in &self.rare_injected {
            let _ = writeln!(out, "rare_injected.{l}={n}");
        }
        out
    }
}

/// Bijective base-26 letter code: 0 -> `a`, 25 -> `z`, 26 -> `aa`.
fn letters(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'a' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// A template split into literal text and placeholder names.
#[derive(Debug)]
enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn parse_template(t: &str) -> Result<Vec<Piece<'_>>> {
    let mut pieces = Vec::new();
    let mut rest = t;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Text(&rest[..open]));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unclosed placeholder in template {t:?}")))?;
        pieces.push(Piece::Slot(&rest[open + 1..open + close]));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth spec: {m}")));
        if self.labels.is_empty() {
            return bad("no labels".into());
        }
        if self.messages_per_label == 0 {
            return bad("messages_per_label must be positive".into());
        }
        for (name, pool) in &self.pools {
            if name == "num" {
                return bad("pool name `num` is reserved".into());
            }
            if pool.size == 0 {
                return bad(format!("pool {name} is empty"));
            }
            if pool.prefix.is_empty() || !pool.prefix.chars().all(|c| c.is_ascii_lowercase()) {
                return bad(format!("pool {name} prefix must be lowercase ascii letters"));
            }
        }
        let mut seen = BTreeSet::new();
        for label in &self.labels {
            if label.name.is_empty() || label.name.contains(char::is_whitespace) {
                return bad(format!("label name {:?} must be non-empty without whitespace", label.name));
            }
            if !seen.insert(&label.name) {
                return bad(format!("duplicate label {}", label.name));
            }
            if label.templates.is_empty() {
                return bad(format!("label {} has no templates", label.name));
            }
            for t in &label.templates {
                if t.contains(['\t', '\n', '\r']) {
                    return bad(format!("template {t:?} contains a tab or newline"));
                }
                for piece in parse_template(t)? {
                    if let Piece::Slot(s) = piece {
                        if s != "num" && !self.pools.contains_key(s) {
                            return bad(format!("template {t:?} uses unknown pool {s:?}"));
                        }
                    }
                }
            }
            if !(0.0..=1.0).contains(&label.rare_rate) {
                return bad(format!("label {} rare_rate must lie in [0, 1]", label.name));
            }
            match &label.rare_pool {
                Some(p) if !self.pools.contains_key(p) => {
                    return bad(format!("label {} names unknown rare pool {p}", label.name))
                }
                None if label.rare_rate > 0.0 => {
                    return bad(format!("label {} has rare_rate without rare_pool", label.name))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// SHA-256 of the spec's debug form; stable for equal specs.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(format!("{self:?}").as_bytes()))
    }

    /// Four operational-log labels with distinct template families over
    /// shared host, service and user pools, plus sparse rare words.
    pub fn standard() -> Self {
        let pools = [
            ("host", 30, "node"),
            ("svc", 8, "svc"),
            ("user", 40, "usr"),
            ("disk", 12, "sd"),
            ("rarenormal", 200, "zqn"),
            ("rarenetwork", 200, "zqw"),
            ("rarestorage", 200, "zqs"),
            ("rareauth", 200, "zqu"),
        ];
        let label = |name: &str, templates: &[&str]| LabelSpec {
            name: name.into(),
            templates: templates.iter().map(|s| s.to_string()).collect(),
            rare_pool: Some(format!("rare{name}")),
            rare_rate: 0.2,
            rare_words: 1,
        };
        SynthSpec {
            messages_per_label: 500,
            pools: pools
                .iter()
                .map(|&(n, size, prefix)| {
                    (
                        n.to_string(),
                        PoolSpec {
                            size,
                            prefix: prefix.into(),
                        },
                    )
                })
                .collect(),
            labels: vec![
                label(
                    "normal",
                    &[
                        "{svc} heartbeat ok on {host} latency {num} ms",
                        "request {num} completed by {svc} on {host} in {num} ms",
                        "user {user} session opened from {host}",
                        "scheduled job {num} finished on {host} status ok",
                    ],
                ),
                label(
                    "network",
                    &[
                        "connection to {host} timed out after {num} ms",
                        "{svc} failed to reach {host} connection refused",
                        "packet loss {num} percent between {host} and {host}",
                        "request {num} failed by {svc} on {host} socket reset",
                    ],
                ),
                label(
                    "storage",
                    &[
                        "disk {disk} on {host} read error at sector {num}",
                        "write to volume {disk} failed on {host} no space left",
                        "{svc} checkpoint on {host} failed io error {num}",
                        "filesystem {disk} remounted read only on {host}",
                    ],
                ),
                label(
                    "auth",
                    &[
                        "user {user} login failed from {host} bad password",
                        "token for {user} expired on {svc}",
                        "user {user} session opened from {host} permission denied",
                        "{svc} rejected request {num} from {user} unauthorized",
                    ],
                ),
            ],
        }
    }

    /// Four labels formed by two binary factors. The order of the `open`
    /// and `close` clauses carries one factor; which of two rare-word pools
    /// fills the tag slots carries the other. The template is otherwise
    /// fixed, so token order alone or word statistics alone each resolve
    /// only one factor.
    pub fn joint() -> Self {
        let fwd = "job {num} open stream then close stream tags";
        let rev = "job {num} close stream then open stream tags";
        let label = |name: &str, head: &str, pool: &str| LabelSpec {
            name: name.into(),
            templates: vec![format!("{head} {{{pool}}} {{{pool}}} {{{pool}}}")],
            rare_pool: None,
            rare_rate: 0.0,
            rare_words: 1,
        };
        SynthSpec {
            messages_per_label: 500,
            pools: [("tagx", "zqx"), ("tagy", "zqy")]
                .iter()
                .map(|&(n, prefix)| {
                    (
                        n.to_string(),
                        PoolSpec {
                            size: 1600,
                            prefix: prefix.into(),
                        },
                    )
                })
                .collect(),
            labels: vec![
                label("fwd_x", fwd, "tagx"),
                label("fwd_y", fwd, "tagy"),
                label("rev_x", rev, "tagx"),
                label("rev_y", rev, "tagy"),
            ],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "joint" => Ok(Self::joint()),
            other => Err(Error::Config(format!("unknown synth preset {other:?} (known: standard, joint)"))),
        }
    }
}

/// Generates the corpus text (with a `#labels` directive) and its manifest.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<(String, SynthManifest)> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Stream::Synth);
    let pool_words: BTreeMap<&str, Vec<String>> = spec
        .pools
        .iter()
        .map(|(name, p)| (name.as_str(), (0..p.size).map(|i| format!("{}{}", p.prefix, letters(i))).collect()))
        .collect();

    let mut lines: Vec<(usize, String)> = Vec::new();
    let mut rare_injected = vec![0usize; spec.labels.len()];
    for (li, label) in spec.labels.iter().enumerate() {
        let templates = label
            .templates
            .iter()
            .map(|t| parse_template(t))
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..spec.messages_per_label {
            let pieces = templates.choose(&mut rng).expect("validated non-empty");
            let mut msg = String::new();
            for piece in pieces {
                match piece {
                    Piece::Text(t) => msg.push_str(t),
                    Piece::Slot("num") => {
                        let _ = write!(msg, "{}", rng.random_range(0..10_000u32));
                    }
                    Piece::Slot(pool) => msg.push_str(pool_words[pool].choose(&mut rng).expect("non-empty pool")),
                }
            }
            if let Some(pool) = &label.rare_pool {
                if rng.random_bool(label.rare_rate) {
                    rare_injected[li] += 1;
                    for _ in 0..label.rare_words {
                        msg.push(' ');
                        msg.push_str(pool_words[pool.as_str()].choose(&mut rng).expect("non-empty pool"));
                    }
                }
            }
            lines.push((li, msg));
        }
    }
    lines.shuffle(&mut rng);

    let names: Vec<&str> = spec.labels.iter().map(|l| l.name.as_str()).collect();
    let mut text = format!("#labels\t{}\n", names.join("\t"));
    for (li, msg) in &lines {
        let _ = writeln!(text, "{}\t-\t{}", names[*li], msg);
    }
    let manifest = SynthManifest {
        seed,
        spec_hash: spec.hash(),
        corpus_sha256: hex::encode(Sha256::digest(text.as_bytes())),
        lines: lines.len(),
        per_label: names.iter().map(|n| (n.to_string(), spec.messages_per_label)).collect(),
        rare_injected: names.iter().map(|n| n.to_string()).zip(rare_injected).collect(),
    };
    Ok((text, manifest))
}

/// Writes the corpus to `path` and the manifest next to it as
/// `<path>.manifest`.
pub fn write_synthetic(spec: &SynthSpec, seed: u64, path: &Path) -> Result<SynthManifest> {
    let (text, manifest) = generate_synthetic(spec, seed)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn manifest_path(corpus: &Path) -> std::path::PathBuf {
    let mut name = corpus.as_os_str().to_owned();
    name.push(".manifest");
    name.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{read_dataset, tokenize, SplitSpec};

    #[test]
    fn letter_codes_are_bijective() {
        assert_eq!(letters(0), "a");
        assert_eq!(letters(25), "z");
        assert_eq!(letters(26), "aa");
        assert_eq!(letters(27), "ab");
        assert_eq!(letters(26 + 26 * 26), "aaa");
        let all: BTreeSet<String> = (0..2000).map(letters).collect();
        assert_eq!(all.len(), 2000);
    }

    #[test]
    fn standard_preset_counts_and_determinism() {
        let spec = SynthSpec::standard();
        let (a, manifest) = generate_synthetic(&spec, 7).unwrap();
        let (b, _) = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(manifest.lines, 2000);
        assert_eq!(a.lines().count(), 2001);
        let (c, _) = generate_synthetic(&spec, 8).unwrap();
        assert_ne!(a, c);
        let ds = read_dataset(a.as_bytes(), &SplitSpec::default()).unwrap();
        assert_eq!(ds.records.len(), 2000);
        assert_eq!(ds.labels.len(), 4);
    }

    #[test]
    fn pool_words_are_single_tokens() {
        let spec = SynthSpec::joint();
        let (text, _) = generate_synthetic(&spec, 1).unwrap();
        let line = text.lines().nth(1).unwrap();
        let msg = line.splitn(3, '\t').nth(2).unwrap();
        let tokens = tokenize(msg);
        assert_eq!(tokens.len(), msg.split_whitespace().count());
        assert_eq!(tokens.len(), 11);
    }

    #[test]
    fn toml_spec_parses_and_validates() {
        let text = r#"
            messages_per_label = 3
            [pools.host]
            size = 2
            prefix = "node"
            [[labels]]
            name = "a"
            templates = ["x {host} {num}"]
            [[labels]]
            name = "b"
            templates = ["y {host}"]
            rare_pool = "host"
            rare_rate = 1.0
            rare_words = 2
        "#;
        let spec = SynthSpec::from_toml(text).unwrap();
        let (corpus, m) = generate_synthetic(&spec, 3).unwrap();
        assert_eq!(m.lines, 6);
        assert_eq!(m.rare_injected, vec![("a".to_string(), 0), ("b".to_string(), 3)]);
        assert!(corpus.lines().skip(1).filter(|l| l.starts_with("b\t")).all(|l| l.split(' ').count() == 4));

        for broken in [
            text.replace("{host} {num}", "{nohost}"),
            text.replace("size = 2", "size = 0"),
            text.replace("name = \"b\"", "name = \"a\""),
            text.replace("rare_rate = 1.0", "rare_rate = 1.5"),
            text.replace("messages_per_label = 3", "messages_per_label = 0"),
            text.replace("prefix = \"node\"", "prefix = \"n0de\""),
            text.replace("x {host}", "x {host"),
            format!("{text}\nunknown = 1\n"),
        ] {
            assert!(SynthSpec::from_toml(&broken).is_err(), "{broken}");
        }
    }

    #[test]
    fn manifest_lists_counts() {
        let (_, m) = generate_synthetic(&SynthSpec::standard(), 2).unwrap();
        let text = m.to_text();
        assert!(text.contains("messages.auth=500"));
        assert!(text.contains("spec_hash="));
        assert!(SynthSpec::preset("weird").is_err());
    }
}
