use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One optimizer step. Losses are batch means; `total` is the optimized objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Named loss terms and weights, in a fixed order.
    pub components: Vec<(String, f64)>,
    pub weights: Vec<(String, f64)>,
    pub grad_norm: f64,
    pub mean_gamma: f64,
    /// Mask ratio drawn for each example of the batch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gammas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distortions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub revived_codes: Vec<usize>,
}

impl StepRecord {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn weight(&self, name: &str) -> f64 {
        self.weights.iter().find(|(n, _)| n == name).map_or(1.0, |(_, w)| *w)
    }

    /// `Σ weight·component`, which should reproduce `total`.
    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|(n, v)| self.weight(n) * v).sum()
    }
}

/// Line-delimited JSON log; also keeps the records in memory.
#[derive(Default)]
pub struct TrainLog {
    sink: Option<Box<dyn Write + Send>>,
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn to_writer(w: impl Write + Send + 'static) -> Self {
        Self { sink: Some(Box::new(w)), records: Vec::new() }
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Writes a free-form note line (`{"note": ...}`).
    pub fn note(&mut self, message: &str) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &serde_json::json!({ "note": message }))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}
