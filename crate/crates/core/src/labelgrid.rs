//! Event tracks and their conversion to one-second multi-hot label grids.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::species::SpeciesList;

/// Width of one label segment in seconds.
pub const SEGMENT_SECONDS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("invalid interval [{start}, {end})")]
    InvalidInterval { start: f64, end: f64 },
    #[error("species id {id} out of range for {count} species")]
    SpeciesIdOutOfRange { id: usize, count: usize },
    #[error("requested {requested} frames but only {available} exist")]
    FrameCountOverflow { requested: usize, available: usize },
    #[error("label csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub species_id: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Ground truth for one recording at event granularity. Events may overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTrack {
    pub events: Vec<LabelEvent>,
    pub recording_duration_s: f64,
}

impl LabelTrack {
    pub fn new(recording_duration_s: f64) -> Self {
        Self {
            events: Vec::new(),
            recording_duration_s,
        }
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        for e in &self.events {
            if !(0.0 <= e.start_s && e.start_s < e.end_s && e.end_s <= self.recording_duration_s) {
                return Err(LabelError::InvalidInterval {
                    start: e.start_s,
                    end: e.end_s,
                });
            }
        }
        Ok(())
    }

    /// `species,start_s,end_s` with seconds at millisecond precision.
    pub fn write_csv<W: Write>(&self, w: W, species: &SpeciesList) -> Result<(), LabelError> {
        let csv_err = |e: csv::Error| LabelError::Csv(e.to_string());
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["species", "start_s", "end_s"]).map_err(csv_err)?;
        for e in &self.events {
            let name = species
                .get(e.species_id)
                .ok_or(LabelError::SpeciesIdOutOfRange {
                    id: e.species_id,
                    count: species.len(),
                })?;
            wtr.write_record([
                name.common_name.clone(),
                format!("{:.3}", e.start_s),
                format!("{:.3}", e.end_s),
            ])
            .map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| LabelError::Csv(e.to_string()))
    }

    /// Parse a label CSV. Events are clipped to `recording_duration_s`;
    /// events that become empty are dropped.
    pub fn read_csv<R: Read>(
        r: R,
        species: &SpeciesList,
        recording_duration_s: f64,
    ) -> Result<Self, LabelError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut track = Self::new(recording_duration_s);
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| LabelError::Csv(e.to_string()))?;
            let line = n + 2;
            if rec.len() < 3 {
                return Err(LabelError::Csv(format!("line {line}: expected 3 fields")));
            }
            let species_id = species
                .index_of(&rec[0])
                .map_err(|e| LabelError::Csv(format!("line {line}: {e}")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| LabelError::Csv(format!("line {line}: {e}")))
            };
            let start_s = num(&rec[1])?.max(0.0);
            let end_s = num(&rec[2])?.min(recording_duration_s);
            if start_s < end_s {
                track.events.push(LabelEvent {
                    species_id,
                    start_s,
                    end_s,
                });
            }
        }
        Ok(track)
    }
}

/// Nearest integer with ties going up.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Segment index range `[start, end)` covered by a call. Calls that round to
/// nothing are assigned the segment holding their midpoint.
pub fn round_interval(start_s: f64, end_s: f64) -> Result<(usize, usize), LabelError> {
    if !(start_s >= 0.0 && start_s < end_s) {
        return Err(LabelError::InvalidInterval {
            start: start_s,
            end: end_s,
        });
    }
    let a = round_half_up(start_s) as usize;
    let b = round_half_up(end_s) as usize;
    if a < b {
        Ok((a, b))
    } else {
        let m = ((start_s + end_s) / 2.0).floor() as usize;
        Ok((m, m + 1))
    }
}

/// Number of one-second segments for a recording of this length.
pub fn segment_count(duration_s: f64) -> usize {
    (duration_s / SEGMENT_SECONDS).ceil().max(0.0) as usize
}

/// T×C multi-hot matrix at one-second resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabelMatrix {
    pub values: Array2<u8>,
}

impl SegmentLabelMatrix {
    pub fn segments(&self) -> usize {
        self.values.nrows()
    }

    pub fn species(&self) -> usize {
        self.values.ncols()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn to_segment_matrix(track: &LabelTrack, species_count: usize) -> Result<SegmentLabelMatrix, LabelError> {
    let t = segment_count(track.recording_duration_s);
    let mut values = Array2::<u8>::zeros((t, species_count));
    for e in &track.events {
        if e.species_id >= species_count {
            return Err(LabelError::SpeciesIdOutOfRange {
                id: e.species_id,
                count: species_count,
            });
        }
        let (a, b) = round_interval(e.start_s, e.end_s)?;
        for row in a..b.min(t) {
            values[[row, e.species_id]] = 1;
        }
    }
    Ok(SegmentLabelMatrix { values })
}

/// Per-frame labels at `fps` frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabelMatrix {
    pub values: Array2<u8>,
    pub fps: usize,
}

pub fn upsample_to_frames(
    m: &SegmentLabelMatrix,
    fps: usize,
    total_frames: usize,
) -> Result<FrameLabelMatrix, LabelError> {
    assert!(fps >= 1, "fps must be positive");
    let available = m.segments() * fps;
    if total_frames > available {
        return Err(LabelError::FrameCountOverflow {
            requested: total_frames,
            available,
        });
    }
    let values = Array2::from_shape_fn((total_frames, m.species()), |(f, c)| m.values[[f / fps, c]]);
    Ok(FrameLabelMatrix { values, fps })
}

/// Per-frame activity straight from event times: frame `f` (centred at
/// `first_center_s + f / fps`) is positive for a species when one of its
/// events satisfies `start_s <= t < end_s`.
pub fn activity_frames(
    track: &LabelTrack,
    species_count: usize,
    fps: usize,
    first_center_s: f64,
    total_frames: usize,
) -> Result<FrameLabelMatrix, LabelError> {
    assert!(fps >= 1, "fps must be positive");
    let mut values = Array2::zeros((total_frames, species_count));
    for e in &track.events {
        if e.species_id >= species_count {
            return Err(LabelError::SpeciesIdOutOfRange {
                id: e.species_id,
                count: species_count,
            });
        }
        // first frame whose centre is >= start, first whose centre is >= end
        let first = ((e.start_s - first_center_s) * fps as f64).ceil().max(0.0) as usize;
        let last = ((e.end_s - first_center_s) * fps as f64).ceil().max(0.0) as usize;
        for f in first.min(total_frames)..last.min(total_frames) {
            values[[f, e.species_id]] = 1;
        }
    }
    Ok(FrameLabelMatrix { values, fps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force: a segment is labeled iff it lies in the rounded interval,
    /// found by scanning every segment and event independently.
    fn brute_force(track: &LabelTrack, c: usize) -> Array2<u8> {
        let t = (track.recording_duration_s.ceil()) as usize;
        let mut m = Array2::zeros((t, c));
        for seg in 0..t {
            for e in &track.events {
                let mut lo = (e.start_s + 0.5).floor() as usize;
                let mut hi = (e.end_s + 0.5).floor() as usize;
                if lo == hi {
                    lo = ((e.start_s + e.end_s) * 0.5) as usize;
                    hi = lo + 1;
                }
                if lo <= seg && seg < hi {
                    m[[seg, e.species_id]] = 1;
                }
            }
        }
        m
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_interval(1.3, 3.6).unwrap(), (1, 4));
        assert_eq!(round_interval(0.0, 1.0).unwrap(), (0, 1));
        assert_eq!(round_interval(2.1, 2.3).unwrap(), (2, 3));
        assert_eq!(round_interval(0.5, 1.5).unwrap(), (1, 2));
        assert!(round_interval(2.0, 2.0).is_err());
        assert!(round_interval(3.0, 1.0).is_err());
    }

    #[test]
    fn empty_track() {
        let m = to_segment_matrix(&LabelTrack::new(5.0), 6).unwrap();
        assert_eq!(m.values.dim(), (5, 6));
        assert_eq!(m.values.sum(), 0);
    }

    #[test]
    fn single_event_three_segments() {
        let mut t = LabelTrack::new(5.0);
        t.events.push(LabelEvent { species_id: 2, start_s: 1.3, end_s: 3.6 });
        let m = to_segment_matrix(&t, 6).unwrap();
        assert_eq!(m.values.iter().map(|&v| v as usize).sum::<usize>(), 3);
        for row in 1..4 {
            assert_eq!(m.values[[row, 2]], 1);
        }
        t.events.push(t.events[0]);
        assert_eq!(to_segment_matrix(&t, 6).unwrap(), m);
    }

    #[test]
    fn partial_final_second_gets_a_row() {
        let mut t = LabelTrack::new(4.2);
        t.events.push(LabelEvent { species_id: 0, start_s: 3.4, end_s: 4.2 });
        let m = to_segment_matrix(&t, 1).unwrap();
        assert_eq!(m.segments(), 5);
        assert_eq!(m.values.column(0).to_vec(), vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn species_out_of_range() {
        let mut t = LabelTrack::new(2.0);
        t.events.push(LabelEvent { species_id: 3, start_s: 0.0, end_s: 1.0 });
        assert!(matches!(to_segment_matrix(&t, 3), Err(LabelError::SpeciesIdOutOfRange { id: 3, count: 3 })));
    }

    #[test]
    fn upsampling() {
        let m = SegmentLabelMatrix { values: ndarray::array![[1u8], [0]] };
        let f = upsample_to_frames(&m, 3, 6).unwrap();
        assert_eq!(f.values.column(0).to_vec(), vec![1, 1, 1, 0, 0, 0]);
        let id = upsample_to_frames(&m, 1, 2).unwrap();
        assert_eq!(id.values, m.values);
        assert!(matches!(upsample_to_frames(&m, 3, 7), Err(LabelError::FrameCountOverflow { .. })));
        let z = SegmentLabelMatrix { values: Array2::zeros((4, 2)) };
        assert_eq!(upsample_to_frames(&z, 100, 350).unwrap().values.sum(), 0);
    }

    #[test]
    fn csv_round_trip() {
        let species = SpeciesList::kzn_six();
        let mut t = LabelTrack::new(10.0);
        t.events.push(LabelEvent { species_id: 4, start_s: 1.25, end_s: 2.5 });
        t.events.push(LabelEvent { species_id: 0, start_s: 0.0, end_s: 9.999 });
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &species).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("species,start_s,end_s\nRed-eyed Dove,1.250,2.500\n"));
        assert_eq!(LabelTrack::read_csv(&buf[..], &species, 10.0).unwrap(), t);
    }

    fn arb_track() -> impl Strategy<Value = (LabelTrack, usize)> {
        (1usize..6, 1.0f64..30.0).prop_flat_map(|(c, dur)| {
            let ev = (0..c, 0.0..dur, 0.01f64..6.0).prop_map(move |(s, a, len)| LabelEvent {
                species_id: s,
                start_s: a,
                end_s: (a + len).min(dur),
            });
            (proptest::collection::vec(ev, 0..12), Just(c), Just(dur)).prop_map(|(mut events, c, dur)| {
                events.retain(|e| e.start_s < e.end_s);
                (LabelTrack { events, recording_duration_s: dur }, c)
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_brute_force((track, c) in arb_track()) {
            let m = to_segment_matrix(&track, c).unwrap();
            prop_assert_eq!(m.values, brute_force(&track, c));
        }

        #[test]
        fn adding_an_event_is_monotone((track, c) in arb_track(), extra in 0.0f64..1.0) {
            let before = to_segment_matrix(&track, c).unwrap();
            let mut more = track.clone();
            let start = extra * (track.recording_duration_s - 0.01);
            more.events.push(LabelEvent { species_id: 0, start_s: start, end_s: track.recording_duration_s });
            let after = to_segment_matrix(&more, c).unwrap();
            prop_assert!(before.values.iter().zip(after.values.iter()).all(|(b, a)| a >= b));
        }
    }

    #[test]
    fn activity_frames_follow_event_times() {
        let mut track = LabelTrack::new(2.0);
        track.events.push(LabelEvent { species_id: 1, start_s: 0.305, end_s: 0.5 });
        let m = activity_frames(&track, 2, 100, 0.016, 200).unwrap();
        // centres 0.016 + f/100 inside [0.305, 0.5): f = 29..=48
        let on: Vec<usize> = (0..200).filter(|&f| m.values[[f, 1]] == 1).collect();
        assert_eq!(on, (29..49).collect::<Vec<_>>());
        assert!(m.values.column(0).iter().all(|&v| v == 0));
        for f in 0..200 {
            let t = 0.016 + f as f64 / 100.0;
            assert_eq!(m.values[[f, 1]] == 1, (0.305..0.5).contains(&t), "{f}");
        }
        track.events.push(LabelEvent { species_id: 2, start_s: 0.0, end_s: 1.0 });
        assert!(activity_frames(&track, 2, 100, 0.016, 200).is_err());
    }
}
