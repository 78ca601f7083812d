//! Backend that hands training data to an external segmenter through the
//! filesystem and reads its predictions back.
//!
//! Each train call writes `round_<k>/train_manifest.json` plus the label
//! masks, then looks for `round_<k>/predictions/<id>.png`. On the first pass
//! those do not exist yet, so the run stops with an error naming the missing
//! file; the operator trains their model, fills the predictions directory and
//! reruns the exact same command. Exports are deterministic, so the rerun
//! regenerates identical inputs and picks up where it stopped.

use maskforge::imagecore::LabelMask;
use maskforge::segment::{
    export_exchange_round, import_exchange_round, ExchangeExport, SegmentError, SegmenterBackend,
    TrainExample,
};
use std::collections::HashMap;
use std::path::PathBuf;

pub struct ExchangeBackend {
    dir: PathBuf,
    /// id -> (image path for the manifest, category), from the dataset.
    meta: HashMap<String, (PathBuf, u8)>,
    /// Round number of the next train call; a resumed run starts above 0.
    round: usize,
    predictions: HashMap<String, LabelMask>,
}

impl ExchangeBackend {
    pub fn new(
        dir: PathBuf,
        start_round: usize,
        meta: HashMap<String, (PathBuf, u8)>,
    ) -> Self {
        Self {
            dir,
            meta,
            round: start_round,
            predictions: HashMap::new(),
        }
    }

    fn exported_round(&self) -> usize {
        self.round.saturating_sub(1)
    }
}

impl SegmenterBackend for ExchangeBackend {
    fn train(&mut self, examples: &[TrainExample<'_>]) -> Result<(), SegmentError> {
        let mut records = Vec::with_capacity(examples.len());
        for example in examples {
            let (image_path, category) = self
                .meta
                .get(example.id)
                .ok_or_else(|| SegmentError::MissingPrediction(example.id.to_string()))?;
            records.push(ExchangeExport {
                id: example.id,
                image_path,
                category: *category,
                labels: example.labels,
            });
        }
        export_exchange_round(&self.dir, self.round, &records)?;
        self.predictions = match import_exchange_round(&self.dir, self.round) {
            Ok(pairs) => pairs.into_iter().collect(),
            // not filled in yet; predict reports which file it waits for
            Err(SegmentError::MissingPrediction(_)) => HashMap::new(),
            Err(e) => return Err(e),
        };
        self.round += 1;
        Ok(())
    }

    fn predict(&self, id: &str, _image: &maskforge::imagecore::RgbImage) -> Result<LabelMask, SegmentError> {
        match self.predictions.get(id) {
            Some(mask) => Ok(mask.clone()),
            None => {
                let expected = self
                    .dir
                    .join(format!("round_{}", self.exported_round()))
                    .join("predictions")
                    .join(format!("{id}.png"));
                Err(SegmentError::MissingPrediction(format!(
                    "{id}; fill {} and rerun",
                    expected.display()
                )))
            }
        }
    }
}
