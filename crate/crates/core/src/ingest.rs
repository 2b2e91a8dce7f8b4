//! Directory of MIDI files to split dataset files plus a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use crate::dataset::{assign_splits, encode_dataset, render_manifest, write_atomic, DatasetManifest, Split, SplitRatio};
use crate::error::Result;
use crate::phrase::{phrases_from_midi, Phrase};
use crate::roll::RollDims;

pub const SPLITS: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

pub fn dataset_file_name(split: Split) -> String {
    format!("{}.m2m", split.name())
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const REPORT_FILE: &str = "ingest-report.txt";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub files_seen: usize,
    pub unreadable: usize,
    pub eligible: usize,
    pub phrases: BTreeMap<&'static str, usize>,
    pub notes_placed: usize,
    pub dropped_out_of_range: usize,
    pub dropped_unclassified: usize,
    pub unresolved_notes: usize,
}

impl IngestReport {
    pub fn total_phrases(&self) -> usize {
        self.phrases.values().sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "files_seen = {}", self.files_seen);
        let _ = writeln!(out, "unreadable = {}", self.unreadable);
        let _ = writeln!(out, "eligible = {}", self.eligible);
        for split in SPLITS {
            let _ = writeln!(out, "phrases_{} = {}", split.name(), self.phrases.get(split.name()).unwrap_or(&0));
        }
        let _ = writeln!(out, "notes_placed = {}", self.notes_placed);
        let _ = writeln!(out, "dropped_out_of_range = {}", self.dropped_out_of_range);
        let _ = writeln!(out, "dropped_unclassified = {}", self.dropped_unclassified);
        let _ = writeln!(out, "unresolved_notes = {}", self.unresolved_notes);
        out
    }
}

fn is_midi(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

/// MIDI files under `dir`, recursively, in sorted order.
pub fn midi_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_midi(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Ingests every MIDI file under `input`. Dataset files, the manifest and
/// the report are written to `output` only when at least one file is
/// eligible; the report is returned either way.
pub fn ingest(input: &Path, output: &Path, ratio: SplitRatio, seed: u64) -> Result<IngestReport> {
    let files = midi_files(input)?;
    let mut report = IngestReport {
        files_seen: files.len(),
        ..IngestReport::default()
    };
    let mut by_source: BTreeMap<String, Vec<Phrase>> = BTreeMap::new();
    for path in &files {
        let id = path
            .strip_prefix(input)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        let bytes = std::fs::read(path)?;
        let song = match phrases_from_midi(&bytes, &id) {
            Ok(song) => song,
            Err(e) => {
                warn!("skipping {id}: {e}");
                report.unreadable += 1;
                continue;
            }
        };
        report.unresolved_notes += song.unresolved_notes;
        if !song.eligible {
            continue;
        }
        report.eligible += 1;
        report.notes_placed += song.stats.notes_placed;
        report.dropped_out_of_range += song.stats.dropped_out_of_range;
        report.dropped_unclassified += song.stats.dropped_unclassified;
        by_source.insert(id, song.phrases);
    }
    if report.eligible == 0 {
        for split in SPLITS {
            report.phrases.insert(split.name(), 0);
        }
        return Ok(report);
    }
    let sources: Vec<String> = by_source.keys().cloned().collect();
    let assignment: BTreeMap<String, Split> = assign_splits(&sources, ratio, seed).into_iter().collect();
    std::fs::create_dir_all(output)?;
    let dims = RollDims::PHRASE;
    let mut manifests = Vec::new();
    for split in SPLITS {
        let phrases: Vec<Phrase> = by_source
            .iter()
            .filter(|(id, _)| assignment[*id] == split)
            .flat_map(|(_, p)| p.iter().cloned())
            .collect();
        write_atomic(&output.join(dataset_file_name(split)), &encode_dataset(&phrases, dims)?)?;
        report.phrases.insert(split.name(), phrases.len());
        manifests.push(DatasetManifest::describe(split, dims, &phrases)?);
    }
    write_atomic(&output.join(MANIFEST_FILE), render_manifest(&manifests).as_bytes())?;
    write_atomic(&output.join(REPORT_FILE), report.to_text().as_bytes())?;
    Ok(report)
}
