//! Probe x gallery score matrices as CSV: a `probe` column followed by one
//! column per gallery image id.

use std::collections::HashMap;
use std::io::{Read, Write};

use reid_core::evaluate::{Scorer, TrialContext};
use reid_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub probes: Vec<String>,
    pub gallery: Vec<String>,
    /// `values[p][g]`
    pub values: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(probes: Vec<String>, gallery: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != probes.len() {
            return Err(Error::LengthMismatch {
                expected: probes.len(),
                actual: values.len(),
            });
        }
        if let Some(row) = values.iter().find(|r| r.len() != gallery.len()) {
            return Err(Error::LengthMismatch {
                expected: gallery.len(),
                actual: row.len(),
            });
        }
        Ok(Self {
            probes,
            gallery,
            values,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(std::iter::once("probe").chain(self.gallery.iter().map(String::as_str)))?;
        for (p, row) in self.probes.iter().zip(&self.values) {
            let mut rec = vec![p.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let gallery: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut probes = Vec::new();
        let mut values = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec?;
            probes.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Format(format!("score row {}: {e}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Self::new(probes, gallery, values)
    }

    /// Scores a trial by looking up each probe and gallery image id.
    pub fn scorer(&self) -> MatrixScorer<'_> {
        MatrixScorer {
            matrix: self,
            probe_index: self.probes.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect(),
            gallery_index: self.gallery.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect(),
        }
    }
}

pub struct MatrixScorer<'a> {
    matrix: &'a ScoreMatrix,
    probe_index: HashMap<&'a str, usize>,
    gallery_index: HashMap<&'a str, usize>,
}

impl Scorer for MatrixScorer<'_> {
    fn score(&self, ctx: &TrialContext<'_>) -> Result<Vec<Vec<f64>>> {
        let id = |i: usize| ctx.dataset.entries[i].image_id();
        let missing = |p: String, g: String| Error::MissingScore { probe: p, gallery: g };
        ctx.probes
            .iter()
            .map(|&p| {
                let pid = id(p);
                let row = self
                    .probe_index
                    .get(pid.as_str())
                    .ok_or_else(|| missing(pid.clone(), "*".into()))?;
                ctx.gallery
                    .iter()
                    .map(|&g| {
                        let gid = id(g);
                        self.gallery_index
                            .get(gid.as_str())
                            .map(|&c| self.matrix.values[*row][c])
                            .ok_or_else(|| missing(pid.clone(), gid))
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = ScoreMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
            vec![vec![0.1, -2.5, 1e-12], vec![3.0, 0.0, f64::MAX]],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"probe,x,y,z\n"));
        assert_eq!(ScoreMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(ScoreMatrix::read_csv("probe,x,y\na,1\n".as_bytes()).is_err());
        assert!(ScoreMatrix::new(vec!["a".into()], vec!["x".into()], vec![]).is_err());
    }
}
