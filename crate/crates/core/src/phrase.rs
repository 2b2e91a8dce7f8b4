//! Song-level quantization and phrase windowing.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::midi::{classify_instrument, parse_midi, NoteEvent, TimeSignature};
use crate::roll::{
    mixture_from_roll, Instrument, Pianoroll, RollDims, HIGHEST_PITCH, INSTRUMENTS, LOWEST_PITCH,
    PITCHES, STEPS_PER_BAR, TIME_STEPS,
};

/// A 64-step window cut from one song.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    pub roll: Pianoroll,
    pub source_id: String,
    /// Window start, in bars from the beginning of the song.
    pub bar_offset: u32,
}

/// Counters collected while rasterizing a song.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuantizeStats {
    pub notes_placed: usize,
    pub dropped_out_of_range: usize,
    pub dropped_unclassified: usize,
}

/// A 4/4 song with notes from at least two of the five instrument classes.
/// A file without time-signature events counts as 4/4.
pub fn is_eligible(events: &[NoteEvent], time_signatures: &[TimeSignature]) -> bool {
    if !time_signatures.iter().all(TimeSignature::is_common_time) {
        return false;
    }
    let classes: BTreeSet<Instrument> = events
        .iter()
        .filter_map(|e| classify_instrument(e.program, e.channel))
        .collect();
    classes.len() >= 2
}

/// Grid cells `[first, end)` covered by a note.
///
/// The onset snaps to the nearest sixteenth (ties round up); the note then
/// holds every later cell whose start lies before the note's end tick. A note
/// always holds at least its onset cell.
fn note_cells(note: &NoteEvent, ticks_per_quarter: u16) -> (usize, usize) {
    let tpq = u64::from(ticks_per_quarter);
    // cell = tick * 4 / tpq, in exact integer arithmetic
    let first = (8 * note.start_tick + tpq) / (2 * tpq);
    let end_tick = note.start_tick + note.duration_ticks;
    let end = (4 * end_tick).div_ceil(tpq);
    (first as usize, end.max(first + 1) as usize)
}

/// Rasterizes a whole song onto the sixteenth-note grid with onset-and-hold
/// encoding. The returned roll has `(T_total, 72, 5)` cells, where `T_total`
/// is the last covered step rounded up to a whole bar.
pub fn quantize_to_roll(
    events: &[NoteEvent],
    ticks_per_quarter: u16,
) -> Result<(Pianoroll, QuantizeStats)> {
    if ticks_per_quarter == 0 {
        return Err(Error::contract("ticks_per_quarter must be positive"));
    }
    let mut stats = QuantizeStats::default();
    let mut placed = Vec::new();
    let mut total = 0usize;
    for note in events {
        let Some(instrument) = classify_instrument(note.program, note.channel) else {
            stats.dropped_unclassified += 1;
            continue;
        };
        if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&note.pitch) {
            stats.dropped_out_of_range += 1;
            continue;
        }
        let (first, end) = note_cells(note, ticks_per_quarter);
        total = total.max(end);
        placed.push((first, end, (note.pitch - LOWEST_PITCH) as usize, instrument));
        stats.notes_placed += 1;
    }
    let time = total.div_ceil(STEPS_PER_BAR) * STEPS_PER_BAR;
    let mut roll = Pianoroll::zeros(RollDims::new(time, PITCHES, INSTRUMENTS));
    for (first, end, p, instrument) in placed {
        for t in first..end {
            roll.set(t, p, instrument.index(), true);
        }
    }
    Ok((roll, stats))
}

/// Rasterizes every note regardless of instrument into a single-channel
/// roll, for use as a separation input.
pub fn quantize_mixture_roll(events: &[NoteEvent], ticks_per_quarter: u16) -> Result<Pianoroll> {
    let collapsed: Vec<NoteEvent> = events
        .iter()
        .map(|e| NoteEvent {
            channel: 0,
            program: 0,
            ..*e
        })
        .collect();
    let (roll, _) = quantize_to_roll(&collapsed, ticks_per_quarter)?;
    Ok(roll)
}

/// Cuts 4-bar windows at a stride of one bar. Partial trailing windows and
/// windows with a silent mixture are dropped.
pub fn window_phrases(song: &Pianoroll, source_id: &str) -> Result<Vec<Phrase>> {
    let d = song.dims();
    if d.time < TIME_STEPS {
        return Ok(Vec::new());
    }
    if d.time % STEPS_PER_BAR != 0 {
        return Err(Error::contract(format!(
            "song length {} is not a whole number of bars",
            d.time
        )));
    }
    let mut phrases = Vec::new();
    for start in (0..=d.time - TIME_STEPS).step_by(STEPS_PER_BAR) {
        let roll = song.time_slice(start, TIME_STEPS)?;
        if mixture_from_roll(&roll).is_silent() {
            continue;
        }
        phrases.push(Phrase {
            roll,
            source_id: source_id.to_string(),
            bar_offset: (start / STEPS_PER_BAR) as u32,
        });
    }
    Ok(phrases)
}

/// Outcome of running one MIDI file through the ingestion pipeline.
#[derive(Debug, Clone)]
pub struct SongPhrases {
    pub eligible: bool,
    pub phrases: Vec<Phrase>,
    pub stats: QuantizeStats,
    pub unresolved_notes: usize,
}

/// parse, filter, quantize, window
pub fn phrases_from_midi(bytes: &[u8], source_id: &str) -> Result<SongPhrases> {
    let parsed = parse_midi(bytes)?;
    if !is_eligible(&parsed.events, &parsed.time_signatures) {
        return Ok(SongPhrases {
            eligible: false,
            phrases: Vec::new(),
            stats: QuantizeStats::default(),
            unresolved_notes: parsed.unresolved_notes,
        });
    }
    let (song, stats) = quantize_to_roll(&parsed.events, parsed.ticks_per_quarter)?;
    Ok(SongPhrases {
        eligible: true,
        phrases: window_phrases(&song, source_id)?,
        stats,
        unresolved_notes: parsed.unresolved_notes,
    })
}
