//! Phrase samples as JSON lines, and the on-disk synthetic dataset layout.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{derive_seed, generate_queries, generate_scene, SynthConfig};
use super::{write_ppm, Image};
use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::parallel;

/// One image/phrase pair with all of its ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseSample {
    /// Image path relative to the dataset root.
    pub image: String,
    pub phrase: String,
    pub gt_boxes: Vec<Bbox>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    image: String,
    phrase: String,
    boxes: Vec<[f64; 4]>,
}

impl PhraseSample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.phrase.trim().is_empty() {
            return Err("empty phrase".into());
        }
        if self.image.is_empty() {
            return Err("empty image path".into());
        }
        if self.gt_boxes.is_empty() {
            return Err("sample has no boxes".into());
        }
        Ok(())
    }
}

fn parse_line(line: &str) -> std::result::Result<PhraseSample, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let gt_boxes = rec
        .boxes
        .iter()
        .map(|b| Bbox::new(b[0], b[1], b[2], b[3]).map_err(|e| e.to_string()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let sample = PhraseSample { image: rec.image, phrase: rec.phrase, gt_boxes };
    sample.validate()?;
    Ok(sample)
}

/// Parses JSONL text; blank lines are skipped and line numbers start at 1.
pub fn parse_dataset(text: &str) -> Result<Vec<PhraseSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn encode_dataset(samples: &[PhraseSample]) -> Result<String> {
    let mut s = String::new();
    for (i, sample) in samples.iter().enumerate() {
        sample.validate().map_err(|m| Error::Input(format!("sample {i}: {m}")))?;
        let rec = Record {
            image: sample.image.clone(),
            phrase: sample.phrase.clone(),
            boxes: sample.gt_boxes.iter().map(Bbox::to_array).collect(),
        };
        s.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Input(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_dataset(path: &Path, samples: &[PhraseSample]) -> Result<()> {
    let text = encode_dataset(samples)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<PhraseSample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split `{s}`")))
    }

    pub fn default_scenes(self) -> usize {
        match self {
            Split::Train => 2000,
            Split::Val | Split::Test => 200,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn jsonl_path(self, root: &Path) -> PathBuf {
        root.join(format!("{}.jsonl", self.name()))
    }
}

/// Scenes for one split: images plus their samples, in index order.
pub fn generate_split(
    split: Split,
    scenes: usize,
    master_seed: u64,
    cfg: &SynthConfig,
) -> Result<Vec<(String, Image, Vec<PhraseSample>)>> {
    cfg.validate()?;
    parallel::map_range(scenes, |i| {
        let seed = derive_seed(master_seed, split.stream(), i as u64);
        let scene = generate_scene(seed, cfg)?;
        let image = format!("images/{}_{i:05}.ppm", split.name());
        let samples = generate_queries(&scene, derive_seed(seed, 0x51, 0), cfg)
            .iter()
            .map(|g| PhraseSample { image: image.clone(), phrase: g.phrase(), gt_boxes: g.boxes(&scene) })
            .collect();
        Ok((image, scene.image, samples))
    })
    .into_iter()
    .collect()
}

/// Counts written by [`generate_dataset`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub scenes: [usize; 3],
    pub samples: [usize; 3],
    pub multi_region: [usize; 3],
}

/// Writes `<root>/images/*.ppm` and `<root>/{train,val,test}.jsonl`.
pub fn generate_dataset(root: &Path, scenes: [usize; 3], master_seed: u64, cfg: &SynthConfig) -> Result<DatasetSummary> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
    let mut summary = DatasetSummary::default();
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let rows = generate_split(split, scenes[k], master_seed, cfg)?;
        let written: Vec<Result<()>> = parallel::map(&rows, |(rel, img, _)| write_ppm(&root.join(rel), img));
        written.into_iter().collect::<Result<()>>()?;
        let samples: Vec<PhraseSample> = rows.into_iter().flat_map(|(_, _, s)| s).collect();
        summary.scenes[k] = scenes[k];
        summary.samples[k] = samples.len();
        summary.multi_region[k] = samples.iter().filter(|s| s.gt_boxes.len() > 1).count();
        write_dataset(&split.jsonl_path(root), &samples)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::Query;

    fn sample() -> PhraseSample {
        PhraseSample {
            image: "images/a.ppm".into(),
            phrase: "red circle".into(),
            gt_boxes: vec![Bbox::new(1.0, 2.0, 30.5, 40.0).unwrap(), Bbox::new(50.0, 50.0, 70.0, 70.0).unwrap()],
        }
    }

    #[test]
    fn round_trip() {
        let s = vec![sample(), PhraseSample { phrase: "the square on the left".into(), ..sample() }];
        let text = encode_dataset(&s).unwrap();
        assert!(text.starts_with(r#"{"image":"images/a.ppm","phrase":"red circle","boxes":[[1.0,2.0,30.5,40.0],"#));
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_dataset(&text).unwrap(), s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_dataset(&p, &s).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), s);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let good = encode_dataset(&[sample()]).unwrap();
        let bad_box = r#"{"image":"a.ppm","phrase":"x","boxes":[[5,0,5,10]]}"#;
        let empty = r#"{"image":"a.ppm","phrase":"x","boxes":[]}"#;
        let no_phrase = r#"{"image":"a.ppm","phrase":" ","boxes":[[0,0,1,1]]}"#;
        for (bad, line) in [(bad_box, 2), (empty, 2), (no_phrase, 2), ("{not json", 2)] {
            match parse_dataset(&format!("{good}{bad}\n")) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
        assert!(matches!(parse_dataset("\n\n{"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn splits_are_deterministic_and_mixed() {
        let cfg = SynthConfig::default();
        let a = generate_split(Split::Val, 200, 42, &cfg).unwrap();
        let b = generate_split(Split::Val, 200, 42, &cfg).unwrap();
        assert_eq!(a, b);
        let samples: Vec<&PhraseSample> = a.iter().flat_map(|r| &r.2).collect();
        let multi = samples.iter().filter(|s| s.gt_boxes.len() > 1).count();
        assert!(multi * 5 >= samples.len(), "{multi} of {}", samples.len());
        let kinds: Vec<usize> = samples.iter().map(|s| Query::parse(&s.phrase).unwrap().kind()).collect();
        for k in 0..3 {
            assert!(kinds.contains(&k));
        }
        let other = generate_split(Split::Test, 200, 42, &cfg).unwrap();
        assert_ne!(a[0].1, other[0].1);
    }
}
