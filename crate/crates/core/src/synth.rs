//! Seeded synthetic multitrack songs with zoned pitch ranges, used for test
//! fixtures and smoke training runs.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::export::export_voice;
use crate::midi::{write_midi, NoteEvent, TrackSpec};
use crate::phrase::{phrases_from_midi, Phrase};
use crate::roll::Instrument;

#[derive(Debug, Clone, PartialEq)]
pub struct SongSpec {
    pub bars: usize,
    pub ticks_per_quarter: u16,
    pub instruments: Vec<Instrument>,
}

fn note(start: u64, duration: u64, pitch: u8, instrument: Instrument) -> NoteEvent {
    let (channel, program) = export_voice(instrument);
    NoteEvent {
        start_tick: start,
        duration_ticks: duration.max(1),
        pitch,
        channel,
        program,
    }
}

/// Notes of one instrument over `bars` bars of 4/4.
pub fn instrument_part(rng: &mut impl Rng, instrument: Instrument, bars: usize, tpq: u16) -> Vec<NoteEvent> {
    let q = tpq as u64;
    let bar = 4 * q;
    let mut notes = Vec::new();
    for b in 0..bars as u64 {
        let at = b * bar;
        match instrument {
            Instrument::Bass => {
                let root = rng.random_range(28..=43);
                for beat in 0..4 {
                    let pitch = if beat == 2 { root + 7 } else { root };
                    notes.push(note(at + beat * q, q, pitch, instrument));
                }
            }
            Instrument::Piano => {
                for half in 0..2 {
                    let root = rng.random_range(48..=56);
                    for step in [0, 4, 7] {
                        notes.push(note(at + half * 2 * q, 2 * q, root + step, instrument));
                    }
                }
            }
            Instrument::Guitar => {
                let root = rng.random_range(64..=70);
                let shape = [0u8, 4, 7, 9];
                for eighth in 0..8 {
                    let pitch = root + shape[(eighth as usize) % 4];
                    notes.push(note(at + eighth * q / 2, q / 2, pitch, instrument));
                }
            }
            Instrument::String => {
                let root = rng.random_range(80..=88);
                notes.push(note(at, bar, root, instrument));
                notes.push(note(at, bar, root + 7, instrument));
            }
            Instrument::Drum => {
                for beat in 0..4 {
                    let hit = if beat % 2 == 0 { 36 } else { 38 };
                    notes.push(note(at + beat * q, q / 4, hit, instrument));
                }
                for eighth in 0..8 {
                    notes.push(note(at + eighth * q / 2, q / 4, 42, instrument));
                }
            }
        }
    }
    notes
}

pub fn song_tracks(rng: &mut impl Rng, spec: &SongSpec) -> Vec<TrackSpec> {
    spec.instruments
        .iter()
        .map(|&instrument| {
            let (channel, program) = export_voice(instrument);
            TrackSpec {
                channel,
                program,
                notes: instrument_part(rng, instrument, spec.bars, spec.ticks_per_quarter),
            }
        })
        .collect()
}

pub fn song_midi(seed: u64, spec: &SongSpec) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_midi(spec.ticks_per_quarter, 120.0, &song_tracks(&mut rng, spec))
}

/// Random spec with 2 to 5 instruments.
pub fn random_spec(rng: &mut impl Rng, min_bars: usize, max_bars: usize) -> SongSpec {
    let count = rng.random_range(2..=5);
    let mut instruments: Vec<Instrument> = Instrument::ALL.choose_multiple(rng, count).copied().collect();
    instruments.sort_by_key(|i| i.index());
    SongSpec {
        bars: rng.random_range(min_bars..=max_bars),
        ticks_per_quarter: *[96u16, 120, 480].choose(rng).unwrap(),
        instruments,
    }
}

/// At least `count` phrases (truncated to exactly `count`) from synthetic
/// songs, each song named `synth-<k>`.
pub fn synthetic_phrases(seed: u64, count: usize) -> Result<Vec<Phrase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut k = 0;
    while out.len() < count {
        let spec = random_spec(&mut rng, 4, 8);
        let bytes = song_midi(rng.random(), &spec);
        out.extend(phrases_from_midi(&bytes, &format!("synth-{k}"))?.phrases);
        k += 1;
    }
    out.truncate(count);
    Ok(out)
}
