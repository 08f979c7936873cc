//! Response data: unique response patterns with frequencies, CSV IO, and
//! the simulation sampler.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::spec::GroupSpec;
use super::IfaError;

/// Unique response patterns and their frequencies. `None` marks a missing response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseData {
    pub item_names: Vec<String>,
    pub outcomes: Vec<usize>,
    pub patterns: Vec<Vec<Option<usize>>>,
    pub freq: Vec<f64>,
}

impl ResponseData {
    pub fn empty(item_names: Vec<String>, outcomes: Vec<usize>) -> Self {
        Self {
            item_names,
            outcomes,
            patterns: vec![],
            freq: vec![],
        }
    }

    /// Aggregates weighted rows into unique patterns (sorted for a canonical order).
    pub fn from_rows<I>(item_names: Vec<String>, outcomes: Vec<usize>, rows: I) -> Result<Self, IfaError>
    where
        I: IntoIterator<Item = (Vec<Option<usize>>, f64)>,
    {
        let mut counts: BTreeMap<Vec<Option<usize>>, f64> = BTreeMap::new();
        for (row, w) in rows {
            *counts.entry(row).or_insert(0.0) += w;
        }
        let (patterns, freq) = counts.into_iter().unzip();
        let data = Self {
            item_names,
            outcomes,
            patterns,
            freq,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn n_items(&self) -> usize {
        self.outcomes.len()
    }

    /// Total number of respondents.
    pub fn total(&self) -> f64 {
        self.freq.iter().sum()
    }

    pub fn validate(&self) -> Result<(), IfaError> {
        if self.item_names.len() != self.outcomes.len() {
            return Err(IfaError::InvalidData("item names and outcome counts differ".into()));
        }
        for (p, row) in self.patterns.iter().enumerate() {
            if row.len() != self.n_items() {
                return Err(IfaError::InvalidData(format!("pattern {p} has {} entries", row.len())));
            }
            for (i, r) in row.iter().enumerate() {
                if let Some(k) = r {
                    if *k >= self.outcomes[i] {
                        return Err(IfaError::InvalidData(format!(
                            "pattern {p}: outcome {k} invalid for item {}",
                            self.item_names[i]
                        )));
                    }
                }
            }
            if !(self.freq[p] > 0.0) {
                return Err(IfaError::InvalidData(format!("pattern {p} has non-positive frequency")));
            }
        }
        Ok(())
    }

    /// Same patterns with every frequency multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            freq: self.freq.iter().map(|f| f * factor).collect(),
            ..self.clone()
        }
    }

    /// Reads delimited text: header of item names plus an optional `freq`
    /// column, 0-based outcome codes, empty cell for a missing response.
    pub fn read_csv<R: Read>(reader: R, item_names: &[String], outcomes: &[usize]) -> Result<Self, IfaError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| IfaError::InvalidData(e.to_string()))?.clone();
        let mut columns = Vec::with_capacity(item_names.len());
        for name in item_names {
            let col = headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| IfaError::InvalidData(format!("missing column {name}")))?;
            columns.push(col);
        }
        let freq_col = headers.iter().position(|h| h.trim() == "freq");
        let mut rows = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| IfaError::InvalidData(e.to_string()))?;
            let mut row = Vec::with_capacity(columns.len());
            for &c in &columns {
                let cell = record.get(c).unwrap_or("").trim();
                if cell.is_empty() || cell == "NA" {
                    row.push(None);
                } else {
                    let v: usize = cell
                        .parse()
                        .map_err(|_| IfaError::InvalidData(format!("row {}: bad outcome `{cell}`", line + 1)))?;
                    row.push(Some(v));
                }
            }
            let w = match freq_col {
                Some(c) => record
                    .get(c)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| IfaError::InvalidData(format!("row {}: bad freq", line + 1)))?,
                None => 1.0,
            };
            rows.push((row, w));
        }
        Self::from_rows(item_names.to_vec(), outcomes.to_vec(), rows)
    }

    /// Writes one row per unique pattern with a trailing `freq` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), IfaError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| IfaError::InvalidData(e.to_string());
        let mut header = self.item_names.clone();
        header.push("freq".into());
        w.write_record(&header).map_err(io)?;
        for (row, f) in self.patterns.iter().zip(&self.freq) {
            let mut rec: Vec<String> = row.iter().map(|r| r.map(|k| k.to_string()).unwrap_or_default()).collect();
            rec.push(f.to_string());
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| IfaError::InvalidData(e.to_string()))?;
        Ok(())
    }
}

/// Draws responses for every group at the given parameter values.
///
/// Respondent `n` of group `g` uses its own ChaCha stream `(g << 40) | n`
/// seeded by `seed`, so output does not depend on scheduling.
pub fn sample_responses(groups: &[GroupSpec], seed: u64) -> Result<Vec<ResponseData>, IfaError> {
    groups
        .iter()
        .enumerate()
        .map(|(gi, group)| {
            let names: Vec<String> = group.items.iter().map(|it| it.name.clone()).collect();
            let outcomes: Vec<usize> = group.items.iter().map(|it| it.model.outcomes()).collect();
            let dims = group.dims();
            let sd: Vec<f64> = group.latent.var.iter().map(|v| v.sqrt()).collect();
            let mut probs = vec![0.0; outcomes.iter().copied().max().unwrap_or(2)];
            let mut tau = vec![0.0; dims];
            let rows = (0..group.sample_size).map(|n| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((gi as u64) << 40) | n as u64);
                for d in 0..dims {
                    let z: f64 = rng.sample(StandardNormal);
                    tau[d] = group.latent.mean[d] + sd[d] * z;
                }
                let row: Vec<Option<usize>> = group
                    .items
                    .iter()
                    .map(|item| {
                        let k = item.model.outcomes();
                        item.model.probs(&item.params, &tau, &mut probs[..k]);
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = k - 1;
                        for (c, p) in probs[..k].iter().enumerate() {
                            acc += p;
                            if u < acc {
                                pick = c;
                                break;
                            }
                        }
                        Some(pick)
                    })
                    .collect();
                (row, 1.0)
            });
            let rows: Vec<_> = rows.collect();
            if rows.is_empty() {
                return Ok(ResponseData::empty(names, outcomes));
            }
            ResponseData::from_rows(names, outcomes, rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifa::spec::{ItemSpec, LatentDist};

    fn one_item_group(n: usize) -> GroupSpec {
        GroupSpec {
            name: "g".into(),
            sample_size: n,
            latent: LatentDist::standard(1),
            items: vec![ItemSpec::dichotomous("i1", &[1.0], 0.0, f64::NEG_INFINITY)],
        }
    }

    #[test]
    fn zero_respondents_give_empty_data() {
        let d = sample_responses(&[one_item_group(0)], 1).unwrap();
        assert!(d[0].patterns.is_empty());
        assert_eq!(d[0].total(), 0.0);
    }

    #[test]
    fn symmetric_item_splits_evenly() {
        let d = &sample_responses(&[one_item_group(100_000)], 42).unwrap()[0];
        assert_eq!(d.total(), 100_000.0);
        let ones: f64 = d.patterns.iter().zip(&d.freq).filter(|(p, _)| p[0] == Some(1)).map(|(_, f)| f).sum();
        assert!((ones / 100_000.0 - 0.5).abs() < 0.01);
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = crate::ifa::builtin_spec("grm20").unwrap().generating.groups;
        let a = sample_responses(&g, 9).unwrap();
        let b = sample_responses(&g, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_responses(&g, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_round_trip_with_missing() {
        let data = ResponseData::from_rows(
            vec!["a".into(), "b".into()],
            vec![2, 3],
            vec![(vec![Some(1), None], 1.0), (vec![Some(0), Some(2)], 2.0), (vec![Some(1), None], 1.0)],
        )
        .unwrap();
        assert_eq!(data.patterns.len(), 2);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = ResponseData::read_csv(buf.as_slice(), &data.item_names, &data.outcomes).unwrap();
        assert_eq!(back, data);

        let raw = "b,a\n2,1\n,0\n2,1\n";
        let d = ResponseData::read_csv(raw.as_bytes(), &data.item_names, &data.outcomes).unwrap();
        assert_eq!(d.total(), 3.0);
        assert_eq!(d.patterns, vec![vec![Some(0), None], vec![Some(1), Some(2)]]);
        assert_eq!(d.freq, vec![1.0, 2.0]);
        assert!(ResponseData::read_csv("a,b\n5,0\n".as_bytes(), &data.item_names, &data.outcomes).is_err());
    }
}
