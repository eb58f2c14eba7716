//! Per-second prediction timelines: one row per second, a probability and
//! a detection flag per species.

use std::io::{Read, Write};
use std::path::Path;

use birdscape::eval::binarize;
use birdscape::species::SpeciesList;
use ndarray::Array2;

use crate::error::{io, CliError};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTimeline {
    pub recording_id: String,
    pub species: SpeciesList,
    /// seconds × species.
    pub probs: Array2<f32>,
    pub threshold: f64,
}

impl PredictionTimeline {
    pub fn seconds(&self) -> usize {
        self.probs.nrows()
    }

    pub fn flags(&self) -> Array2<u8> {
        binarize(self.probs.view(), self.threshold)
    }

    /// `t_start_s,t_end_s,<slug>_prob,<slug>_flag,...`. Probabilities use
    /// the shortest representation that reads back to the same f32.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t_start_s".to_string(), "t_end_s".to_string()];
        for s in self.species.iter() {
            header.push(format!("{}_prob", s.slug()));
            header.push(format!("{}_flag", s.slug()));
        }
        out.write_record(&header)?;
        let flags = self.flags();
        for (t, (p, f)) in self.probs.outer_iter().zip(flags.outer_iter()).enumerate() {
            let mut row = vec![t.to_string(), (t + 1).to_string()];
            for (pv, fv) in p.iter().zip(f.iter()) {
                row.push(pv.to_string());
                row.push(fv.to_string());
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let f = std::fs::File::create(path).map_err(io(path))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Parse a timeline written by `write_csv`. Species columns must match
    /// `species` in order. The threshold is recovered only as `threshold`;
    /// stored flags are checked against it.
    pub fn read_csv<R: Read>(r: R, recording_id: &str, species: &SpeciesList, threshold: f64) -> Result<Self, String> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(|e| e.to_string())?.clone();
        let c = species.len();
        if header.len() != 2 + 2 * c || &header[0] != "t_start_s" || &header[1] != "t_end_s" {
            return Err(format!("expected t_start_s,t_end_s and {c} species column pairs"));
        }
        for (i, s) in species.iter().enumerate() {
            let want = format!("{}_prob", s.slug());
            if header[2 + 2 * i] != want {
                return Err(format!("column {} is {:?}, expected {want:?}", 3 + 2 * i, &header[2 + 2 * i]));
            }
        }
        let mut vals = Vec::new();
        let mut rows = 0;
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let line = n + 2;
            let start: usize = rec[0].parse().map_err(|e| format!("line {line}: t_start_s: {e}"))?;
            let end: usize = rec[1].parse().map_err(|e| format!("line {line}: t_end_s: {e}"))?;
            if start != n || end != n + 1 {
                return Err(format!("line {line}: rows must be contiguous one-second segments from 0"));
            }
            for i in 0..c {
                let p: f32 = rec[2 + 2 * i].parse().map_err(|e| format!("line {line}: {e}"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("line {line}: probability {p} outside [0, 1]"));
                }
                vals.push(p);
            }
            rows += 1;
        }
        let probs = Array2::from_shape_vec((rows, c), vals).expect("row-major fill");
        Ok(Self {
            recording_id: recording_id.into(),
            species: species.clone(),
            probs,
            threshold,
        })
    }

    pub fn load(path: &Path, species: &SpeciesList, threshold: f64) -> Result<Self, CliError> {
        let f = std::fs::File::open(path).map_err(|e| CliError::data(path.display(), e))?;
        Self::read_csv(f, &recording_id_of(path), species, threshold).map_err(|e| CliError::data(path.display(), e))
    }
}

pub fn recording_id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
