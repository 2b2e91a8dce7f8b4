//! Standard MIDI File reading and writing.
//!
//! The reader resolves note-on/note-off pairs into [`NoteEvent`]s on an
//! absolute tick axis. Tempo is ignored: every downstream grid is metrical.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::roll::Instrument;

/// A resolved note on the absolute tick axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoteEvent {
    pub start_tick: u64,
    pub duration_ticks: u64,
    pub pitch: u8,
    pub channel: u8,
    pub program: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignature {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u16,
}

impl TimeSignature {
    pub fn is_common_time(&self) -> bool {
        self.numerator == 4 && self.denominator == 4
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedMidi {
    pub events: Vec<NoteEvent>,
    pub ticks_per_quarter: u16,
    pub time_signatures: Vec<TimeSignature>,
    /// Note-ons that never saw a matching note-off.
    pub unresolved_notes: usize,
}

/// Maps a General MIDI program and channel to one of the five instrument
/// classes. Channel 9 (zero-based) is always percussion.
pub fn classify_instrument(program: u8, channel: u8) -> Option<Instrument> {
    if channel == 9 {
        return Some(Instrument::Drum);
    }
    match program {
        0..=7 => Some(Instrument::Piano),
        24..=31 => Some(Instrument::Guitar),
        32..=39 => Some(Instrument::Bass),
        40..=51 => Some(Instrument::String),
        _ => None,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Midi {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        if self.pos >= self.end {
            return Err(self.err("unexpected end of data"));
        }
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Result<u8> {
        if self.pos >= self.end {
            return Err(self.err("unexpected end of data"));
        }
        Ok(self.bytes[self.pos])
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return Err(self.err(format!("need {n} bytes, {} left", self.end - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16_be(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::Midi {
            offset: start,
            message: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum RawKind {
    NoteOn { key: u8 },
    NoteOff { key: u8 },
    Program(u8),
    TimeSignature { numerator: u8, denominator: u16 },
}

#[derive(Debug, Clone, Copy)]
struct RawEvent {
    tick: u64,
    channel: u8,
    kind: RawKind,
}

fn read_track(cur: &mut Cursor<'_>, out: &mut Vec<RawEvent>) -> Result<()> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    while cur.pos < cur.end {
        tick += u64::from(cur.vlq()?);
        let status_pos = cur.pos;
        let mut status = cur.peek()?;
        if status & 0x80 != 0 {
            cur.pos += 1;
        } else {
            status = running.ok_or_else(|| Error::Midi {
                offset: status_pos,
                message: "data byte without running status".into(),
            })?;
        }
        match status {
            0xff => {
                running = None;
                let kind = cur.u8()?;
                let len = cur.vlq()? as usize;
                let data = cur.take(len)?;
                match kind {
                    0x2f => return Ok(()),
                    0x58 if len >= 2 => {
                        if data[1] > 15 {
                            return Err(Error::Midi {
                                offset: status_pos,
                                message: format!("time signature denominator 2^{}", data[1]),
                            });
                        }
                        out.push(RawEvent {
                            tick,
                            channel: 0,
                            kind: RawKind::TimeSignature {
                                numerator: data[0],
                                denominator: 1u16 << data[1],
                            },
                        });
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
            }
            0xf1..=0xfe => {
                return Err(Error::Midi {
                    offset: status_pos,
                    message: format!("system message 0x{status:02x} inside a track"),
                });
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let data_byte = |cur: &mut Cursor<'_>| -> Result<u8> {
                    let b = cur.u8()?;
                    if b & 0x80 != 0 {
                        return Err(Error::Midi {
                            offset: cur.pos - 1,
                            message: format!("status byte 0x{b:02x} where data was expected"),
                        });
                    }
                    Ok(b)
                };
                let kind = match status & 0xf0 {
                    0x80 => {
                        let key = data_byte(cur)?;
                        data_byte(cur)?;
                        Some(RawKind::NoteOff { key })
                    }
                    0x90 => {
                        let key = data_byte(cur)?;
                        let velocity = data_byte(cur)?;
                        Some(if velocity == 0 {
                            RawKind::NoteOff { key }
                        } else {
                            RawKind::NoteOn { key }
                        })
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        data_byte(cur)?;
                        data_byte(cur)?;
                        None
                    }
                    0xc0 => Some(RawKind::Program(data_byte(cur)?)),
                    0xd0 => {
                        data_byte(cur)?;
                        None
                    }
                    _ => unreachable!("status byte has its high bit set"),
                };
                if let Some(kind) = kind {
                    out.push(RawEvent {
                        tick,
                        channel,
                        kind,
                    });
                }
            }
        }
    }
    // A track without an end-of-track meta event is tolerated.
    Ok(())
}

/// Parses a format 0 or format 1 Standard MIDI File.
///
/// Tracks are merged on the absolute tick axis before notes are paired, so a
/// program change in one track applies to notes on that channel in any other
/// track. Note-offs close the oldest sounding note of the same channel and key.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        end: bytes.len(),
    };
    if bytes.len() < 4 || &bytes[..4] != b"MThd" {
        return Err(Error::Midi {
            offset: 0,
            message: "missing MThd header".into(),
        });
    }
    cur.pos = 4;
    let header_len = cur.u32_be()? as usize;
    if header_len < 6 {
        return Err(Error::Midi {
            offset: 4,
            message: format!("header length {header_len} < 6"),
        });
    }
    let header_start = cur.pos;
    let format = cur.u16_be()?;
    if format > 1 {
        return Err(Error::Midi {
            offset: header_start,
            message: format!("unsupported MIDI format {format}"),
        });
    }
    let ntracks = cur.u16_be()?;
    let division_pos = cur.pos;
    let division = cur.u16_be()?;
    if division & 0x8000 != 0 || division == 0 {
        return Err(Error::Midi {
            offset: division_pos,
            message: format!("unsupported time division 0x{division:04x}"),
        });
    }
    cur.take(header_len - 6)?;

    let mut raw = Vec::new();
    let mut tracks_seen = 0;
    while cur.pos < bytes.len() && tracks_seen < ntracks {
        let chunk_pos = cur.pos;
        let id = cur.take(4)?;
        let len = cur.u32_be()? as usize;
        if bytes.len() - cur.pos < len {
            return Err(Error::Midi {
                offset: chunk_pos,
                message: format!("chunk length {len} runs past end of file"),
            });
        }
        if id == b"MTrk" {
            let mut track = Cursor {
                bytes,
                pos: cur.pos,
                end: cur.pos + len,
            };
            let mut events = Vec::new();
            read_track(&mut track, &mut events)?;
            raw.push(events);
            tracks_seen += 1;
        }
        cur.pos += len;
    }
    if tracks_seen < ntracks {
        return Err(Error::Midi {
            offset: cur.pos,
            message: format!("header announces {ntracks} tracks, found {tracks_seen}"),
        });
    }

    // Stable merge by tick keeps within-track order and track order for ties.
    let mut merged: Vec<RawEvent> = raw.into_iter().flatten().collect();
    merged.sort_by_key(|e| e.tick);

    let mut programs = [0u8; 16];
    let mut sounding: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut events = Vec::new();
    let mut time_signatures = Vec::new();
    for e in merged {
        match e.kind {
            RawKind::Program(p) => programs[e.channel as usize] = p,
            RawKind::NoteOn { key, .. } => sounding
                .entry((e.channel, key))
                .or_default()
                .push_back((e.tick, programs[e.channel as usize])),
            RawKind::NoteOff { key } => {
                if let Some((start, program)) = sounding
                    .get_mut(&(e.channel, key))
                    .and_then(VecDeque::pop_front)
                {
                    events.push(NoteEvent {
                        start_tick: start,
                        duration_ticks: (e.tick - start).max(1),
                        pitch: key,
                        channel: e.channel,
                        program,
                    });
                }
            }
            RawKind::TimeSignature {
                numerator,
                denominator,
            } => time_signatures.push(TimeSignature {
                tick: e.tick,
                numerator,
                denominator,
            }),
        }
    }
    let unresolved_notes = sounding.values().map(VecDeque::len).sum();
    if unresolved_notes > 0 {
        log::warn!("dropped {unresolved_notes} note-ons without a matching note-off");
    }
    events.sort();
    Ok(ParsedMidi {
        events,
        ticks_per_quarter: division,
        time_signatures,
        unresolved_notes,
    })
}

/// One track of an outgoing file: all notes share a channel and program.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSpec {
    pub channel: u8,
    pub program: u8,
    pub notes: Vec<NoteEvent>,
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

fn push_chunk(out: &mut Vec<u8>, id: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(id);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

/// Writes a format-1 file: a conductor track carrying tempo and a 4/4 time
/// signature, then one track per [`TrackSpec`]. The output is a pure function
/// of the inputs.
pub fn write_midi(ticks_per_quarter: u16, bpm: f64, tracks: &[TrackSpec]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = Vec::new();
    header.extend_from_slice(&1u16.to_be_bytes());
    header.extend_from_slice(&((tracks.len() + 1) as u16).to_be_bytes());
    header.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    push_chunk(&mut out, b"MThd", &header);

    let mut conductor = Vec::new();
    let micros = (60_000_000.0 / bpm).round() as u32;
    conductor.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
    conductor.extend_from_slice(&micros.to_be_bytes()[1..]);
    conductor.extend_from_slice(&[0x00, 0xff, 0x58, 0x04, 4, 2, 24, 8]);
    conductor.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
    push_chunk(&mut out, b"MTrk", &conductor);

    for track in tracks {
        // (tick, order, bytes): note-offs sort before note-ons at equal ticks.
        let mut timeline: BTreeMap<(u64, u8, u8), [u8; 3]> = BTreeMap::new();
        let ch = track.channel & 0x0f;
        for n in &track.notes {
            timeline.insert((n.start_tick, 1, n.pitch), [0x90 | ch, n.pitch & 0x7f, 100]);
            timeline.insert(
                (n.start_tick + n.duration_ticks, 0, n.pitch),
                [0x80 | ch, n.pitch & 0x7f, 0],
            );
        }
        let mut body = Vec::new();
        body.extend_from_slice(&[0x00, 0xc0 | ch, track.program & 0x7f]);
        let mut last = 0u64;
        for ((tick, _, _), msg) in timeline {
            push_vlq(&mut body, (tick - last) as u32);
            body.extend_from_slice(&msg);
            last = tick;
        }
        body.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        push_chunk(&mut out, b"MTrk", &body);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_note_file(tpq: u16) -> Vec<u8> {
        write_midi(
            tpq,
            120.0,
            &[TrackSpec {
                channel: 0,
                program: 0,
                notes: vec![NoteEvent {
                    start_tick: 0,
                    duration_ticks: u64::from(tpq),
                    pitch: 60,
                    channel: 0,
                    program: 0,
                }],
            }],
        )
    }

    #[test]
    fn one_quarter_note() {
        let parsed = parse_midi(&single_note_file(480)).unwrap();
        assert_eq!(
            parsed.events,
            vec![NoteEvent {
                start_tick: 0,
                duration_ticks: 480,
                pitch: 60,
                channel: 0,
                program: 0
            }]
        );
        assert_eq!(parsed.ticks_per_quarter, 480);
        assert_eq!(parsed.time_signatures.len(), 1);
        assert!(parsed.time_signatures[0].is_common_time());
    }

    #[test]
    fn no_notes() {
        let bytes = write_midi(96, 120.0, &[]);
        let parsed = parse_midi(&bytes).unwrap();
        assert!(parsed.events.is_empty());
    }

    #[test]
    fn running_status_and_zero_velocity_note_off() {
        // format 0, one track, running status on channel 2
        let mut bytes = b"MThd\0\0\0\x06\0\0\0\x01\0\x60".to_vec();
        let track: &[u8] = &[
            0x00, 0xc2, 33, // program 33
            0x00, 0x92, 40, 90, // note on
            0x10, 43, 90, // running status note on
            0x20, 40, 0, // running status, velocity 0 -> off
            0x00, 43, 0, 0x00, 0xff, 0x2f, 0x00,
        ];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(track);
        let parsed = parse_midi(&bytes).unwrap();
        assert_eq!(parsed.events.len(), 2);
        assert_eq!(parsed.events[0].start_tick, 0);
        assert_eq!(parsed.events[0].duration_ticks, 0x30);
        assert_eq!(parsed.events[1].start_tick, 0x10);
        assert_eq!(parsed.events[1].duration_ticks, 0x20);
        assert!(parsed.events.iter().all(|e| e.program == 33 && e.channel == 2));
    }

    #[test]
    fn unresolved_note_is_dropped_and_counted() {
        let mut bytes = b"MThd\0\0\0\x06\0\0\0\x01\0\x60".to_vec();
        let track: &[u8] = &[0x00, 0x90, 60, 90, 0x00, 0xff, 0x2f, 0x00];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(track);
        let parsed = parse_midi(&bytes).unwrap();
        assert!(parsed.events.is_empty());
        assert_eq!(parsed.unresolved_notes, 1);
    }

    #[test]
    fn malformed_input_reports_offset() {
        match parse_midi(b"RIFF\0\0\0\x06") {
            Err(Error::Midi { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected MIDI error, got {other:?}"),
        }
        let mut bytes = single_note_file(480);
        bytes.truncate(bytes.len() - 3);
        match parse_midi(&bytes) {
            Err(Error::Midi { offset, .. }) => assert!(offset >= 14),
            other => panic!("expected MIDI error, got {other:?}"),
        }
        let mut smpte = single_note_file(480);
        smpte[12] = 0xe7;
        assert!(matches!(parse_midi(&smpte), Err(Error::Midi { offset: 12, .. })));
    }

    #[test]
    fn format_two_rejected() {
        let mut bytes = single_note_file(480);
        bytes[9] = 2;
        assert!(parse_midi(&bytes).is_err());
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_instrument(0, 0), Some(Instrument::Piano));
        assert_eq!(classify_instrument(80, 3), None);
        assert_eq!(classify_instrument(0, 9), Some(Instrument::Drum));
    }

    #[test]
    fn classification_full_table() {
        for channel in 0u8..16 {
            for program in 0u8..128 {
                let expected = if channel == 9 {
                    Some(Instrument::Drum)
                } else if program < 8 {
                    Some(Instrument::Piano)
                } else if (24..32).contains(&program) {
                    Some(Instrument::Guitar)
                } else if (32..40).contains(&program) {
                    Some(Instrument::Bass)
                } else if (40..52).contains(&program) {
                    Some(Instrument::String)
                } else {
                    None
                };
                assert_eq!(classify_instrument(program, channel), expected, "{program}/{channel}");
            }
        }
    }

    #[test]
    fn vlq_encoding() {
        for (value, bytes) in [
            (0u32, vec![0x00]),
            (0x7f, vec![0x7f]),
            (0x80, vec![0x81, 0x00]),
            (0x3fff, vec![0xff, 0x7f]),
            (0x0fff_ffff, vec![0xff, 0xff, 0xff, 0x7f]),
        ] {
            let mut out = Vec::new();
            push_vlq(&mut out, value);
            assert_eq!(out, bytes);
            let mut cur = Cursor {
                bytes: &out,
                pos: 0,
                end: out.len(),
            };
            assert_eq!(cur.vlq().unwrap(), value);
        }
    }
}
