//! On-disk corpus layout: `images/NNNNN.png`, `masks/NNNNN.png`, `tags.txt`
//! and an index `corpus.json`.

use std::path::{Path, PathBuf};

use seal_core::imaging::{GrayGrid, RgbImage};
use seal_core::synth::SceneSample;
use seal_core::tagkit::{parse_tag_line_auto, serialize_tag};
use seal_core::{ObjectMask, SealError};
use serde::{Deserialize, Serialize};

use crate::CliResult;

pub const INDEX_FILE: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub concept_id: usize,
    pub seed: u64,
    /// Paths relative to the corpus directory.
    pub image: String,
    pub mask: String,
    pub tags: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub base_seed: u64,
    pub entries: Vec<CorpusEntry>,
}

pub(crate) fn write_corpus(
    dir: &Path,
    base_seed: u64,
    scenes: &[SceneSample],
) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(scenes.len());
    let mut tag_lines = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let image = format!("images/{i:05}.png");
        let mask = format!("masks/{i:05}.png");
        s.image.save_png(&dir.join(&image))?;
        s.mask_grid().save_png(&dir.join(&mask))?;
        let tags = serialize_tag(&s.tags);
        tag_lines.push_str(&tags);
        tag_lines.push('\n');
        entries.push(CorpusEntry {
            concept_id: s.concept_id,
            seed: s.seed,
            image,
            mask,
            tags,
        });
    }
    let tags_path = dir.join("tags.txt");
    std::fs::write(&tags_path, tag_lines)?;
    let index_path = dir.join(INDEX_FILE);
    let index = CorpusIndex { base_seed, entries };
    std::fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
    Ok(vec![
        dir.join("images"),
        dir.join("masks"),
        tags_path,
        index_path,
    ])
}

/// Binarizes a grayscale mask at 0.5.
pub(crate) fn binarize(grid: &GrayGrid) -> CliResult<ObjectMask> {
    let cells = grid.values.iter().map(|&v| u8::from(v >= 0.5)).collect();
    Ok(ObjectMask::new(grid.height, grid.width, cells)?)
}

/// Reads a corpus directory back into scene samples.
pub fn load_corpus(dir: &Path) -> CliResult<Vec<SceneSample>> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.is_file() {
        return Err(
            SealError::Invalid(format!("no corpus index at {}", index_path.display())).into(),
        );
    }
    let index: CorpusIndex = serde_json::from_str(&std::fs::read_to_string(&index_path)?)?;
    index
        .entries
        .iter()
        .map(|e| {
            Ok(SceneSample {
                image: RgbImage::load_png(&dir.join(&e.image))?,
                mask: binarize(&GrayGrid::load_png(&dir.join(&e.mask))?)?,
                tags: parse_tag_line_auto(&e.tags)?.1,
                concept_id: e.concept_id,
                seed: e.seed,
            })
        })
        .collect()
}
