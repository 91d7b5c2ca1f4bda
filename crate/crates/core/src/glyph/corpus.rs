//! Synthetic corpus generation and on-disk persistence.
//!
//! A corpus directory holds `manifest.txt` (line records: one header line,
//! then one line per sample) plus one tensor file per sample.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::glyph::font::FontStyle;
use crate::glyph::sample::{render_sample, Alphabet, Canvas, GlyphSample};
use crate::harness::records::Record;
use crate::harness::tensorfile::{TensorFile, KIND_SAMPLE};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub count: usize,
    pub canvas: Canvas,
    pub alphabet: Alphabet,
    pub fonts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            count: 200,
            canvas: Canvas::default(),
            alphabet: Alphabet::default(),
            fonts: FontStyle::ALL.len(),
            min_len: 2,
            max_len: 4,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > self.canvas.n_max {
            return Err(Error::invalid(format!(
                "word lengths {}..={} must satisfy 1 <= min <= max <= n_max ({})",
                self.min_len, self.max_len, self.canvas.n_max
            )));
        }
        if self.fonts == 0 || self.fonts > FontStyle::ALL.len() {
            return Err(Error::invalid(format!("font count must be in 1..={}", FontStyle::ALL.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub file: String,
    pub text: String,
    pub font_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut head = Record::new();
        head.push("kind", "corpus")
            .push("version", 1)
            .push("count", c.count)
            .push("channels", c.canvas.channels)
            .push("height", c.canvas.height)
            .push("width", c.canvas.width)
            .push("n_max", c.canvas.n_max)
            .push("alphabet", c.alphabet.as_string())
            .push("fonts", c.fonts)
            .push("min_len", c.min_len)
            .push("max_len", c.max_len)
            .push("seed", c.seed);
        let mut out = head.to_line();
        out.push('\n');
        for e in &self.entries {
            let mut r = Record::new();
            r.push("index", e.index)
                .push("file", &e.file)
                .push("text", &e.text)
                .push("font", e.font_id);
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = Record::parse_line(lines.next().ok_or_else(|| Error::Parse("empty manifest".into()))?)?;
        if head.get("kind") != Some("corpus") {
            return Err(Error::Parse("manifest header is not a corpus record".into()));
        }
        let config = CorpusConfig {
            count: head.parse("count")?,
            canvas: Canvas {
                channels: head.parse("channels")?,
                height: head.parse("height")?,
                width: head.parse("width")?,
                n_max: head.parse("n_max")?,
            },
            alphabet: Alphabet::new(head.require("alphabet")?)?,
            fonts: head.parse("fonts")?,
            min_len: head.parse("min_len")?,
            max_len: head.parse("max_len")?,
            seed: head.parse("seed")?,
        };
        let entries = lines
            .map(|l| {
                let r = Record::parse_line(l)?;
                Ok(ManifestEntry {
                    index: r.parse("index")?,
                    file: r.require("file")?.to_string(),
                    text: r.require("text")?.to_string(),
                    font_id: r.parse("font")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.len() != config.count {
            return Err(Error::Parse(format!(
                "manifest declares {} samples but lists {}",
                config.count,
                entries.len()
            )));
        }
        Ok(CorpusManifest { config, entries })
    }
}

/// Sample `index` of the corpus; a pure function of `(config, index)`.
pub fn generate_sample(config: &CorpusConfig, index: usize) -> Result<GlyphSample> {
    let mut r = rng::derive(config.seed, rng::STREAM_CORPUS, index as u64, 0);
    let len = r.gen_range(config.min_len..=config.max_len);
    let text: Vec<usize> = (0..len).map(|_| r.gen_range(0..config.alphabet.len())).collect();
    let font_id = r.gen_range(0..config.fonts);
    render_sample(&text, font_id, &config.alphabet, config.canvas, &mut r)
}

pub fn generate_samples(config: &CorpusConfig, exec: Execution) -> Result<Vec<GlyphSample>> {
    config.validate()?;
    let indices: Vec<usize> = (0..config.count).collect();
    exec.map(&indices, |_, &i| generate_sample(config, i)).into_iter().collect()
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:05}.bin")
}

pub fn encode_sample(sample: &GlyphSample) -> TensorFile {
    let mut meta = Record::new();
    meta.push("text", join_indices(&sample.text))
        .push("labels", join_indices(&sample.labels))
        .push("font", sample.font_id);
    let mut f = TensorFile::new(KIND_SAMPLE, meta);
    f.push("image", &sample.image);
    f.push("region_mask", &sample.region_mask);
    f.push("char_masks", &sample.char_masks);
    f
}

pub fn decode_sample(file: &TensorFile, path: &Path) -> Result<GlyphSample> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let tensor = |name: &str| {
        file.get(name)
            .cloned()
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    };
    let sample = GlyphSample {
        image: tensor("image")?,
        region_mask: tensor("region_mask")?,
        char_masks: tensor("char_masks")?,
        text: split_indices(file.meta.require("text")?).map_err(bad)?,
        labels: split_indices(file.meta.require("labels")?).map_err(bad)?,
        font_id: file.meta.parse("font")?,
    };
    sample.check_invariants().map_err(|e| bad(e.to_string()))?;
    Ok(sample)
}

fn join_indices(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn split_indices(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.parse().map_err(|e| format!("bad index `{t}`: {e}")))
        .collect()
}

/// Writes `config.count` samples and the manifest into `dir`.
pub fn make_corpus(config: &CorpusConfig, dir: &Path, exec: Execution) -> Result<CorpusManifest> {
    let samples = generate_samples(config, exec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = sample_file_name(i);
        encode_sample(s).save(&dir.join(&file))?;
        entries.push(ManifestEntry {
            index: i,
            file,
            text: config.alphabet.decode(&s.text),
            font_id: s.font_id,
        });
    }
    let manifest = CorpusManifest {
        config: config.clone(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<GlyphSample>)> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = CorpusManifest::parse(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let samples = manifest
        .entries
        .iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let s = decode_sample(&TensorFile::load(&p, KIND_SAMPLE)?, &p)?;
            if s.canvas() != manifest.config.canvas {
                return Err(Error::Format {
                    path: p,
                    msg: "sample dimensions disagree with the manifest".into(),
                });
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_serial_generation_agree() {
        let cfg = CorpusConfig {
            count: 12,
            ..CorpusConfig::default()
        };
        let a = generate_samples(&cfg, Execution::Sequential).unwrap();
        let b = generate_samples(&cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_lengths() {
        let cfg = CorpusConfig {
            min_len: 5,
            max_len: 3,
            ..CorpusConfig::default()
        };
        assert!(generate_samples(&cfg, Execution::Sequential).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = CorpusManifest {
            config: CorpusConfig {
                count: 1,
                ..CorpusConfig::default()
            },
            entries: vec![ManifestEntry {
                index: 0,
                file: "sample_00000.bin".into(),
                text: "AB".into(),
                font_id: 2,
            }],
        };
        assert_eq!(CorpusManifest::parse(&m.to_text()).unwrap(), m);
    }
}
