//! Binary containers and the on-disk corpus layout.
//!
//! Containers start with a 4-byte magic and a little-endian u32 version.
//! Waveforms follow with raw little-endian f32 samples. Features add a shape
//! header (u32 rank, then u32 dims) before the samples.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Utterance};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const WAVE_MAGIC: [u8; 4] = *b"STWV";
pub const FEAT_MAGIC: [u8; 4] = *b"STFE";
pub const CONTAINER_VERSION: u32 = 1;

fn header(magic: [u8; 4]) -> Vec<u8> {
    let mut b = magic.to_vec();
    b.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    b
}

fn check_header<'a>(bytes: &'a [u8], magic: [u8; 4], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 8 || bytes[..4] != magic {
        return Err(Error::Parse(format!("not a {what} container")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Parse(format!("unsupported {what} container version {version}")));
    }
    Ok(&bytes[8..])
}

fn f32_body(body: &[u8], expected: Option<usize>) -> Result<Vec<f32>> {
    if !body.len().is_multiple_of(4) || expected.is_some_and(|n| n * 4 != body.len()) {
        return Err(Error::Parse(format!("truncated sample payload of {} bytes", body.len())));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_waveform(samples: &[f32]) -> Vec<u8> {
    let mut b = header(WAVE_MAGIC);
    for s in samples {
        b.extend_from_slice(&s.to_le_bytes());
    }
    b
}

pub fn decode_waveform(bytes: &[u8]) -> Result<Vec<f32>> {
    f32_body(check_header(bytes, WAVE_MAGIC, "waveform")?, None)
}

pub fn encode_features(x: &Tensor<f32>) -> Vec<u8> {
    let mut b = header(FEAT_MAGIC);
    b.extend_from_slice(&(x.ndim() as u32).to_le_bytes());
    for &d in x.shape() {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in x.data() {
        b.extend_from_slice(&s.to_le_bytes());
    }
    b
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor<f32>> {
    let body = check_header(bytes, FEAT_MAGIC, "feature")?;
    let word = |i: usize| -> Result<usize> {
        body.get(4 * i..4 * i + 4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Parse("truncated shape header".into()))
    };
    let rank = word(0)?;
    let shape = (1..=rank).map(word).collect::<Result<Vec<_>>>()?;
    let data = f32_body(&body[4 * (rank + 1)..], Some(shape.iter().product()))?;
    Tensor::new(shape, data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_waveform(path: &Path, samples: &[f32]) -> Result<()> {
    write(path, &encode_waveform(samples))
}

pub fn read_waveform(path: &Path) -> Result<Vec<f32>> {
    decode_waveform(&read(path)?)
}

pub fn write_features(path: &Path, x: &Tensor<f32>) -> Result<()> {
    write(path, &encode_features(x))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    decode_features(&read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub id: String,
    pub text: String,
    pub speaker: usize,
    pub wav: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_wav: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusInfo {
    pub sample_rate: usize,
    pub samples_per_char: usize,
    pub n_speakers: usize,
    pub alphabet: String,
    pub utterances: usize,
}

pub const META_FILE: &str = "meta.jsonl";
pub const INFO_FILE: &str = "corpus.json";
pub const TEXT_FILE: &str = "text.jsonl";

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

/// Writes `meta.jsonl`, `corpus.json` and one waveform container per signal under `wav/`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut meta = Vec::new();
    for u in &corpus.utterances {
        let wav = format!("wav/{}.bin", u.id);
        write_waveform(&dir.join(&wav), &u.waveform)?;
        let noisy_wav = match &u.noisy {
            Some(n) => {
                let p = format!("wav/{}.noisy.bin", u.id);
                write_waveform(&dir.join(&p), n)?;
                Some(p)
            }
            None => None,
        };
        let rec = MetaRecord {
            id: u.id.clone(),
            text: u.text.clone(),
            speaker: u.speaker,
            wav,
            noisy_wav,
            translation: u.translation.clone(),
        };
        meta.extend(serde_json::to_vec(&rec).expect("serializable"));
        meta.push(b'\n');
    }
    write(&dir.join(META_FILE), &meta)?;
    let info = CorpusInfo {
        sample_rate: corpus.sample_rate,
        samples_per_char: corpus.samples_per_char,
        n_speakers: corpus.n_speakers,
        alphabet: corpus.alphabet.clone(),
        utterances: corpus.utterances.len(),
    };
    write(&dir.join(INFO_FILE), &serde_json::to_vec_pretty(&info).expect("serializable"))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let info_path = dir.join(INFO_FILE);
    let info: CorpusInfo = serde_json::from_slice(&read(&info_path)?).map_err(|e| json_err(&info_path, e))?;
    let meta_path = dir.join(META_FILE);
    let file = fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let vocab = super::Vocab::new(&info.alphabet, 4)?;
    let mut utterances = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&meta_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetaRecord = serde_json::from_str(&line).map_err(|e| json_err(&meta_path, e))?;
        if let Some(c) = rec.text.chars().find(|&c| vocab.char_index(c).is_none()) {
            return Err(Error::Data(format!("{}: character {c:?} outside vocabulary", rec.id)));
        }
        if rec.speaker >= info.n_speakers {
            return Err(Error::Data(format!(
                "{}: speaker {} outside the corpus's {} speakers",
                rec.id, rec.speaker, info.n_speakers
            )));
        }
        let waveform = read_waveform(&dir.join(&rec.wav))?;
        if waveform.is_empty() {
            return Err(Error::Data(format!("{}: empty waveform", rec.id)));
        }
        let noisy = rec.noisy_wav.as_ref().map(|p| read_waveform(&dir.join(p))).transpose()?;
        utterances.push(Utterance {
            id: rec.id,
            text: rec.text,
            speaker: rec.speaker,
            waveform,
            noisy,
            translation: rec.translation,
        });
    }
    if utterances.len() != info.utterances {
        return Err(Error::Data(format!(
            "meta lists {} utterances, corpus.json says {}",
            utterances.len(),
            info.utterances
        )));
    }
    Ok(Corpus {
        utterances,
        sample_rate: info.sample_rate,
        samples_per_char: info.samples_per_char,
        n_speakers: info.n_speakers,
        alphabet: info.alphabet,
    })
}

/// Writes the log-Mel features of every utterance to `feats/<id>.bin`.
pub fn save_features(corpus: &Corpus, dir: &Path, mel: &super::MelConfig) -> Result<usize> {
    let ex = super::MelExtractor::new(mel)?;
    let feat_dir = dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for u in &corpus.utterances {
        write_features(&feat_dir.join(format!("{}.bin", u.id)), &ex.extract::<f32>(&u.waveform)?)?;
    }
    Ok(corpus.utterances.len())
}

/// One JSON string per line.
pub fn save_sentences(path: &Path, sentences: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sentences {
        writeln!(f, "{}", serde_json::to_string(s).expect("serializable")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_sentences(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| json_err(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_header_layout() {
        let b = encode_waveform(&[1.0]);
        assert_eq!(&b[..4], b"STWV");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_header_is_parse_error() {
        assert!(matches!(decode_waveform(b"XXXX\x01\0\0\0"), Err(Error::Parse(_))));
        assert!(matches!(decode_features(b"STFE\x01\0\0\0\x02\0\0\0"), Err(Error::Parse(_))));
    }
}
