//! Standard MIDI File (format 0/1) reader producing aligned note events.

use std::collections::{HashMap, VecDeque};

use log::warn;

use super::{NoteEvent, Performance, HIGHEST_PITCH, LOWEST_PITCH};
use crate::{Error, Result};

const DEFAULT_TEMPO_US: u32 = 500_000;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Reader { bytes, pos }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.err(format!("unexpected end of data (wanted {n} bytes)"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn peek(&self) -> Result<u8> {
        match self.bytes.get(self.pos) {
            Some(b) => Ok(*b),
            None => self.err("unexpected end of data"),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        self.err("variable-length quantity longer than 4 bytes")
    }
}

#[derive(Clone, Copy)]
enum Timing {
    PerQuarter(u16),
    /// Seconds per tick, fixed.
    Smpte(f64),
}

struct RawNote {
    pitch: u8,
    velocity: u8,
    on_tick: u64,
    off_tick: u64,
}

struct TrackEvents {
    notes: Vec<RawNote>,
    tempos: Vec<(u64, u32)>,
}

/// Parses an SMF into one onset-sorted performance (all tracks merged).
///
/// Note-on with velocity 0 is a note-off. A note still sounding when its
/// track ends is closed at the end-of-track time with a warning. Keys outside
/// the 88-key range and zero-length notes are dropped.
pub fn parse_smf(bytes: &[u8], source_id: &str) -> Result<Performance> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4)? != b"MThd" {
        return Err(Error::Parse {
            offset: 0,
            message: "missing MThd header".into(),
        });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return r.err(format!("header length {header_len} < 6"));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let n_tracks = r.u16()?;
    let division = r.u16()?;
    if format > 1 {
        return Err(Error::Parse {
            offset: header_start,
            message: format!("unsupported SMF format {format}"),
        });
    }
    r.pos = header_start + header_len;
    let timing = if division & 0x8000 == 0 {
        if division == 0 {
            return Err(Error::Parse {
                offset: header_start + 4,
                message: "zero ticks per quarter note".into(),
            });
        }
        Timing::PerQuarter(division)
    } else {
        let fps = -((division >> 8) as u8 as i8) as f64;
        let fps = if fps == 29.0 { 29.97 } else { fps };
        let tpf = (division & 0xff) as f64;
        if fps <= 0.0 || tpf <= 0.0 {
            return Err(Error::Parse {
                offset: header_start + 4,
                message: "invalid SMPTE division".into(),
            });
        }
        Timing::Smpte(1.0 / (fps * tpf))
    };

    let mut tracks = Vec::new();
    while tracks.len() < n_tracks as usize {
        if r.pos == bytes.len() {
            return r.err(format!(
                "header announces {n_tracks} tracks, found {}",
                tracks.len()
            ));
        }
        let chunk_start = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if chunk_start + 8 + len > bytes.len() {
            return Err(Error::Parse {
                offset: chunk_start,
                message: format!("chunk length {len} exceeds file size"),
            });
        }
        if id == b"MTrk" {
            let body = Reader::new(&bytes[..chunk_start + 8 + len], chunk_start + 8);
            tracks.push(parse_track(body, tracks.len())?);
        }
        r.pos = chunk_start + 8 + len;
    }

    let mut tempos: Vec<(u64, u32)> = tracks.iter().flat_map(|t| t.tempos.clone()).collect();
    tempos.sort_by_key(|&(tick, _)| tick);
    let clock = TempoMap::new(timing, tempos);

    let mut notes = Vec::new();
    for raw in tracks.into_iter().flat_map(|t| t.notes) {
        if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&raw.pitch) {
            warn!(
                "{source_id}: dropping pitch {} outside the piano range",
                raw.pitch
            );
            continue;
        }
        let onset = clock.seconds(raw.on_tick);
        let offset = clock.seconds(raw.off_tick);
        if offset <= onset {
            continue;
        }
        notes.push(NoteEvent {
            pitch: raw.pitch,
            onset,
            offset,
            velocity: raw.velocity,
        });
    }
    Ok(Performance::new(source_id, notes))
}

fn parse_track(mut r: Reader<'_>, track_index: usize) -> Result<TrackEvents> {
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut notes = Vec::new();
    let mut tempos = Vec::new();
    let end = r.bytes.len();

    while r.pos < end {
        tick += u64::from(r.vlq()?);
        let mut status = r.peek()?;
        if status & 0x80 != 0 {
            r.pos += 1;
        } else {
            status = match running {
                Some(s) => s,
                None => return r.err("data byte without running status"),
            };
        }
        match status {
            0xff => {
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        tempos.push((tick, us.max(1)));
                    }
                    0x2f => break,
                    _ => {}
                }
                running = None;
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
                running = None;
            }
            0x80..=0xef => {
                running = Some(status);
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let d1 = r.u8()?;
                let d2 = if matches!(kind, 0xc0 | 0xd0) {
                    0
                } else {
                    r.u8()?
                };
                if d1 & 0x80 != 0 || d2 & 0x80 != 0 {
                    return Err(Error::Parse {
                        offset: r.pos - 1,
                        message: "status byte where data byte expected".into(),
                    });
                }
                match (kind, d2) {
                    (0x90, v) if v > 0 => {
                        open.entry((channel, d1)).or_default().push_back((tick, v));
                    }
                    (0x80, _) | (0x90, _) => {
                        if let Some((on_tick, velocity)) =
                            open.get_mut(&(channel, d1)).and_then(|q| q.pop_front())
                        {
                            notes.push(RawNote {
                                pitch: d1,
                                velocity,
                                on_tick,
                                off_tick: tick,
                            });
                        }
                    }
                    _ => {}
                }
            }
            _ => return r.err(format!("invalid status byte 0x{status:02x}")),
        }
    }

    let mut dangling: Vec<_> = open
        .into_iter()
        .flat_map(|((_, pitch), q)| q.into_iter().map(move |(t, v)| (pitch, t, v)))
        .collect();
    dangling.sort();
    for (pitch, on_tick, velocity) in dangling {
        warn!("track {track_index}: note {pitch} at tick {on_tick} never released; closing at track end");
        notes.push(RawNote {
            pitch,
            velocity,
            on_tick,
            off_tick: tick,
        });
    }
    Ok(TrackEvents { notes, tempos })
}

struct TempoMap {
    timing: Timing,
    /// (tick, seconds at tick, microseconds per quarter from tick on)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn new(timing: Timing, tempos: Vec<(u64, u32)>) -> Self {
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_US)];
        if let Timing::PerQuarter(ppq) = timing {
            for (tick, us) in tempos {
                let &(t0, s0, us0) = segments.last().unwrap();
                let s = s0 + (tick - t0) as f64 * us0 as f64 / 1e6 / ppq as f64;
                if tick == t0 {
                    segments.pop();
                }
                segments.push((tick, s, us));
            }
        }
        TempoMap { timing, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        match self.timing {
            Timing::Smpte(spt) => tick as f64 * spt,
            Timing::PerQuarter(ppq) => {
                let idx = self.segments.partition_point(|&(t, _, _)| t <= tick) - 1;
                let (t0, s0, us) = self.segments[idx];
                s0 + (tick - t0) as f64 * us as f64 / 1e6 / ppq as f64
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn vlq(mut v: u32) -> Vec<u8> {
        let mut out = vec![(v & 0x7f) as u8];
        v >>= 7;
        while v > 0 {
            out.insert(0, (v & 0x7f) as u8 | 0x80);
            v >>= 7;
        }
        out
    }

    /// Builds an SMF from per-track `(delta, raw event bytes)` lists.
    pub(crate) fn build_smf(format: u16, ppq: u16, tracks: &[Vec<(u32, Vec<u8>)>]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend(6u32.to_be_bytes());
        out.extend(format.to_be_bytes());
        out.extend((tracks.len() as u16).to_be_bytes());
        out.extend(ppq.to_be_bytes());
        for track in tracks {
            let mut body = Vec::new();
            for (delta, ev) in track {
                body.extend(vlq(*delta));
                body.extend(ev);
            }
            body.extend([0x00, 0xff, 0x2f, 0x00]);
            out.extend(b"MTrk");
            out.extend((body.len() as u32).to_be_bytes());
            out.extend(body);
        }
        out
    }

    fn tempo(us: u32) -> Vec<u8> {
        let b = us.to_be_bytes();
        vec![0xff, 0x51, 0x03, b[1], b[2], b[3]]
    }

    #[test]
    fn single_note_at_120_bpm() {
        let smf = build_smf(
            0,
            480,
            &[vec![
                (0, tempo(500_000)),
                (0, vec![0x90, 60, 64]),
                (480, vec![0x80, 60, 0]),
            ]],
        );
        let perf = parse_smf(&smf, "one").unwrap();
        assert_eq!(perf.notes, vec![NoteEvent::new(60, 0.0, 0.5, 64).unwrap()]);
    }

    #[test]
    fn empty_track_gives_empty_performance() {
        let smf = build_smf(0, 96, &[vec![]]);
        let perf = parse_smf(&smf, "empty").unwrap();
        assert!(perf.is_empty());
    }

    #[test]
    fn zero_velocity_note_on_and_running_status() {
        // Running status: the second and third events omit the 0x90 byte.
        let smf = build_smf(
            0,
            100,
            &[vec![
                (0, vec![0x90, 62, 90]),
                (50, vec![62, 0]),
                (0, vec![64, 30]),
                (100, vec![0x80, 64, 0]),
            ]],
        );
        let perf = parse_smf(&smf, "rs").unwrap();
        assert_eq!(perf.notes.len(), 2);
        assert_eq!(perf.notes[0].pitch, 62);
        assert!((perf.notes[0].offset - 0.25).abs() < 1e-12);
        assert_eq!(perf.notes[1].velocity, 30);
        assert!((perf.notes[1].onset - 0.25).abs() < 1e-12);
        assert!((perf.notes[1].offset - 0.75).abs() < 1e-12);
    }

    #[test]
    fn format1_tracks_merge_with_shared_tempo_map() {
        // Conductor track: 120 BPM, then 60 BPM from beat 2.
        let conductor = vec![(0, tempo(500_000)), (960, tempo(1_000_000))];
        let right = vec![
            (0, vec![0x90, 72, 100]),
            (480, vec![0x80, 72, 0]),
            (960, vec![0x90, 76, 50]),
            (480, vec![0x80, 76, 0]),
        ];
        let left = vec![(240, vec![0x91, 48, 70]), (960, vec![0x81, 48, 0])];
        let smf = build_smf(1, 480, &[conductor, right, left]);
        let perf = parse_smf(&smf, "f1").unwrap();
        // Hand-decoded: tick 960 sits at 1.0 s, after which a beat lasts 1 s.
        // 0..480 -> 0.0..0.5, 240..1200 -> 0.25..1.5, 1440..1920 -> 2.0..3.0.
        let expected = vec![
            NoteEvent::new(72, 0.0, 0.5, 100).unwrap(),
            NoteEvent::new(48, 0.25, 1.5, 70).unwrap(),
            NoteEvent::new(76, 2.0, 3.0, 50).unwrap(),
        ];
        assert_eq!(perf.notes.len(), expected.len());
        for (got, want) in perf.notes.iter().zip(&expected) {
            assert_eq!(got.pitch, want.pitch);
            assert_eq!(got.velocity, want.velocity);
            assert!((got.onset - want.onset).abs() < 1e-12, "{got:?}");
            assert!((got.offset - want.offset).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn dangling_note_closes_at_track_end() {
        let smf = build_smf(
            0,
            480,
            &[vec![(0, vec![0x90, 60, 10]), (960, vec![0xb0, 64, 127])]],
        );
        let perf = parse_smf(&smf, "d").unwrap();
        assert_eq!(perf.notes.len(), 1);
        assert!((perf.notes[0].offset - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        match parse_smf(b"MTrk\0\0\0\x06", "bad") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut smf = build_smf(0, 480, &[vec![(0, vec![0x90, 60, 10])]]);
        smf.truncate(smf.len() - 6);
        match parse_smf(&smf, "trunc") {
            Err(Error::Parse { offset, .. }) => assert!(offset >= 14),
            other => panic!("{other:?}"),
        }
        let smf = build_smf(0, 480, &[vec![(0, vec![0x60, 60, 10])]]);
        assert!(matches!(parse_smf(&smf, "rs"), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_smf(&build_smf(2, 480, &[]), "f2"),
            Err(Error::Parse { .. })
        ));
    }
}
