//! PSNR and the CSV metric table.
//!
//! PSNR is −10·log10(MSE) against peak 1.0 on unit-normalized values; an
//! exact fit reports the +∞ sentinel (serialized as "inf"). Rows accumulate
//! into a [`MetricTable`] with a fixed header, strictly ascending steps per
//! (strategy, signal) pair, and locale-independent formatting.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Peak-1 PSNR in dB over values already in [0,1] space.
pub fn psnr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "psnr",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let mse = pred.mse(target);
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// PSNR after affine remap of both tensors from [lo,hi] to [0,1].
pub fn psnr_in_range(pred: &Tensor, target: &Tensor, lo: f64, hi: f64) -> Result<f64> {
    let span = hi - lo;
    if span <= 0.0 {
        return Err(Error::contract(format!("bad value range [{lo}, {hi}]")));
    }
    let p = pred.map(|v| (v - lo) / span);
    let t = target.map(|v| (v - lo) / span);
    psnr(&p, &t)
}

pub const CSV_HEADER: [&str; 6] = [
    "strategy",
    "signal_id",
    "step",
    "psnr_db",
    "per_task_psnr",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub strategy: String,
    pub signal_id: String,
    pub step: u64,
    pub psnr_db: f64,
    pub per_task_psnr: Vec<f64>,
    pub wall_ms: u64,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn parse_db(s: &str) -> Result<f64> {
    if s == "inf" {
        return Ok(f64::INFINITY);
    }
    s.parse::<f64>()
        .map_err(|_| Error::Config(format!("bad psnr value '{s}'")))
}

#[derive(Debug, Clone, Default)]
pub struct MetricTable {
    rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new() -> Self {
        MetricTable::default()
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Appends a row, enforcing strictly ascending steps per
    /// (strategy, signal).
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(prev) = self
            .rows
            .iter()
            .rev()
            .find(|r| r.strategy == row.strategy && r.signal_id == row.signal_id)
        {
            if row.step <= prev.step {
                return Err(Error::contract(format!(
                    "step {} not ascending after {} for ({}, {})",
                    row.step, prev.step, row.strategy, row.signal_id
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: MetricTable) -> Result<()> {
        for row in other.rows {
            self.push(row)?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)
            .map_err(|e| Error::Config(e.to_string()))?;
        for r in &self.rows {
            let per_task = r
                .per_task_psnr
                .iter()
                .map(|&v| fmt_db(v))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                r.strategy.as_str(),
                r.signal_id.as_str(),
                &r.step.to_string(),
                &fmt_db(r.psnr_db),
                &per_task,
                &r.wall_ms.to_string(),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<MetricTable> {
        let mut rd = csv::Reader::from_reader(input);
        {
            let got = rd.headers().map_err(|e| Error::Config(e.to_string()))?;
            if got.iter().collect::<Vec<_>>() != CSV_HEADER {
                return Err(Error::Config(format!("unexpected CSV header {got:?}")));
            }
        }
        let mut table = MetricTable::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
            let per_task = if rec[4].is_empty() {
                Vec::new()
            } else {
                rec[4]
                    .split(';')
                    .map(parse_db)
                    .collect::<Result<Vec<_>>>()?
            };
            table.push(MetricRow {
                strategy: rec[0].to_string(),
                signal_id: rec[1].to_string(),
                step: rec[2]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad step '{}'", &rec[2])))?,
                psnr_db: parse_db(&rec[3])?,
                per_task_psnr: per_task,
                wall_ms: rec[5]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad wall_ms '{}'", &rec[5])))?,
            })?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_is_infinite() {
        let a = Tensor::vector(vec![0.25, 0.5, 0.75]);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn mse_001_is_20db() {
        let n = 100;
        let pred = Tensor::vector(vec![0.1; n]);
        let target = Tensor::vector(vec![0.0; n]);
        let db = psnr(&pred, &target).unwrap();
        assert!((db - 20.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::vector(vec![0.0; 3]);
        let b = Tensor::vector(vec![0.0; 4]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn audio_range_remap_matches_manual() {
        let pred = Tensor::vector(vec![-0.5, 0.5]);
        let target = Tensor::vector(vec![-0.25, 0.25]);
        let db = psnr_in_range(&pred, &target, -1.0, 1.0).unwrap();
        // Remapped difference is 0.125 per element.
        let mse = 0.125f64 * 0.125;
        assert!((db + 10.0 * mse.log10()).abs() < 1e-12);
    }

    #[test]
    fn uniform_image_uniform_guess_near_analytic() {
        // Predicting 0.5 for U[0,1] pixels → MSE ≈ 1/12 → ≈ 10.79 dB.
        let mut rng = crate::rng::Rng::with_stream(3, 1);
        let n = 64 * 64;
        let target = Tensor::vector((0..n).map(|_| rng.uniform(0.0, 1.0)).collect());
        let pred = Tensor::vector(vec![0.5; n]);
        let db = psnr(&pred, &target).unwrap();
        assert!((db - 10.0 * 12f64.log10()).abs() < 0.3, "got {db}");
    }

    #[test]
    fn csv_round_trip_with_inf() {
        let mut t = MetricTable::new();
        for (step, db) in [(1u64, 11.5), (4, f64::INFINITY)] {
            t.push(MetricRow {
                strategy: "OL".into(),
                signal_id: "sig".into(),
                step,
                psnr_db: db,
                per_task_psnr: vec![db, 3.25],
                wall_ms: 7,
            })
            .unwrap();
        }
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("strategy,signal_id,step,psnr_db,per_task_psnr,wall_ms"));
        assert!(text.contains("inf"));
        let back = MetricTable::read_csv(&buf[..]).unwrap();
        assert_eq!(back.rows().len(), 2);
        assert!(back.rows()[1].psnr_db.is_infinite());
        assert_eq!(back.rows()[0].per_task_psnr, vec![11.5, 3.25]);
    }

    #[test]
    fn non_ascending_steps_rejected() {
        let mut t = MetricTable::new();
        let row = |step| MetricRow {
            strategy: "CL".into(),
            signal_id: "s".into(),
            step,
            psnr_db: 1.0,
            per_task_psnr: vec![],
            wall_ms: 0,
        };
        t.push(row(2)).unwrap();
        assert!(t.push(row(2)).is_err());
        // Other strategies are independent.
        let mut other = row(1);
        other.strategy = "ER".into();
        t.push(other).unwrap();
    }
}
