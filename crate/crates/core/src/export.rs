//! Whole-song separation and MIDI export.

use crate::error::{Error, Result};
use crate::eval::{sample_seed, Separator};
use crate::midi::{parse_midi, write_midi, NoteEvent, TrackSpec};
use crate::phrase::quantize_mixture_roll;
use crate::roll::{mixture_from_roll, Instrument, Mixture, Pianoroll, RollDims, LOWEST_PITCH, TIME_STEPS};

pub const EXPORT_TICKS_PER_QUARTER: u16 = 480;
pub const EXPORT_BPM: f64 = 120.0;
/// Ticks per sixteenth-note cell.
pub const TICKS_PER_CELL: u64 = EXPORT_TICKS_PER_QUARTER as u64 / 4;

/// `(channel, program)` of each instrument on export.
pub fn export_voice(instrument: Instrument) -> (u8, u8) {
    match instrument {
        Instrument::Piano => (0, 0),
        Instrument::Guitar => (1, 25),
        Instrument::Bass => (2, 33),
        Instrument::String => (3, 48),
        Instrument::Drum => (9, 0),
    }
}

/// One track per instrument; runs of consecutive active cells of one pitch
/// become a single note.
pub fn roll_to_tracks(roll: &Pianoroll) -> Vec<TrackSpec> {
    let d = roll.dims();
    Instrument::ALL
        .iter()
        .take(d.channels)
        .map(|&instrument| {
            let c = instrument.index();
            let (channel, program) = export_voice(instrument);
            let mut notes = Vec::new();
            for p in 0..d.pitch {
                let mut t = 0;
                while t < d.time {
                    if !roll.get(t, p, c) {
                        t += 1;
                        continue;
                    }
                    let start = t;
                    while t < d.time && roll.get(t, p, c) {
                        t += 1;
                    }
                    notes.push(NoteEvent {
                        start_tick: start as u64 * TICKS_PER_CELL,
                        duration_ticks: (t - start) as u64 * TICKS_PER_CELL,
                        pitch: LOWEST_PITCH + p as u8,
                        channel,
                        program,
                    });
                }
            }
            notes.sort();
            TrackSpec { channel, program, notes }
        })
        .collect()
}

pub fn export_midi(roll: &Pianoroll) -> Vec<u8> {
    write_midi(EXPORT_TICKS_PER_QUARTER, EXPORT_BPM, &roll_to_tracks(roll))
}

/// The mixture of every note in a MIDI file, instruments ignored.
pub fn midi_mixture(bytes: &[u8]) -> Result<Mixture> {
    let parsed = parse_midi(bytes)?;
    let song = quantize_mixture_roll(&parsed.events, parsed.ticks_per_quarter)?;
    Ok(mixture_from_roll(&song))
}

/// Separates a whole-song mixture by tiling it into consecutive
/// non-overlapping phrases. The last tile is zero-padded; window `i` uses
/// seed `sample_seed(seed, i)`.
pub fn separate_song<S: Separator + ?Sized>(
    separator: &S,
    mixture: &Mixture,
    channels: usize,
    seed: u64,
) -> Result<Pianoroll> {
    if mixture.pitch() == 0 || mixture.is_silent() {
        return Err(Error::contract("mixture has no notes to separate"));
    }
    let total = mixture.time();
    let windows = total.div_ceil(TIME_STEPS);
    let tiles: Vec<Mixture> = (0..windows)
        .map(|w| {
            let mut tile = Mixture::zeros(TIME_STEPS, mixture.pitch());
            for t in 0..TIME_STEPS.min(total - w * TIME_STEPS) {
                for p in 0..mixture.pitch() {
                    tile.set(t, p, mixture.get(w * TIME_STEPS + t, p));
                }
            }
            tile
        })
        .collect();
    let refs: Vec<&Mixture> = tiles.iter().collect();
    let seeds: Vec<u64> = (0..windows).map(|i| sample_seed(seed, i)).collect();
    let parts = separator.separate(&refs, &seeds)?;
    let mut song = Pianoroll::zeros(RollDims::new(total, mixture.pitch(), channels));
    for (w, part) in parts.iter().enumerate() {
        for t in 0..TIME_STEPS.min(total - w * TIME_STEPS) {
            for p in 0..mixture.pitch() {
                for c in 0..channels {
                    if part.get(t, p, c) {
                        song.set(w * TIME_STEPS + t, p, c, true);
                    }
                }
            }
        }
    }
    Ok(song)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phrase::quantize_to_roll;

    #[test]
    fn export_then_import_round_trips() {
        let mut roll = Pianoroll::zeros(RollDims::new(32, 72, 5));
        for t in 2..6 {
            roll.set(t, 36, 0, true);
        }
        roll.set(8, 10, 2, true);
        roll.set(9, 10, 2, true);
        roll.set(0, 14, 4, true);
        roll.set(31, 71, 3, true);
        let bytes = export_midi(&roll);
        let parsed = parse_midi(&bytes).unwrap();
        assert_eq!(parsed.ticks_per_quarter, 480);
        let (back, stats) = quantize_to_roll(&parsed.events, parsed.ticks_per_quarter).unwrap();
        assert_eq!(stats.notes_placed, 4);
        assert_eq!(back, roll);
        let drum = parsed.events.iter().find(|e| e.channel == 9).unwrap();
        assert_eq!((drum.pitch, drum.start_tick, drum.duration_ticks), (38, 0, 120));
        let piano = parsed.events.iter().find(|e| e.channel == 0).unwrap();
        assert_eq!((piano.start_tick, piano.duration_ticks), (240, 480));
    }

    #[test]
    fn programs_follow_instrument() {
        let tracks = roll_to_tracks(&Pianoroll::zeros(RollDims::PHRASE));
        let voices: Vec<(u8, u8)> = tracks.iter().map(|t| (t.channel, t.program)).collect();
        assert_eq!(voices, vec![(0, 0), (1, 25), (2, 33), (3, 48), (9, 0)]);
    }
}
