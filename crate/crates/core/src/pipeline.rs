//! Online evaluation: target batches arrive once, are optionally passed
//! through the generator and/or a test-time adaptation method, and are
//! scored against labels the adapters never see.

use std::fmt;
use std::str::FromStr;

use gues_tensor::Tensor;

use crate::adapt::{examples_to_images, AdaptReport, GuesAdapter, GuesConfig};
use crate::classifier::{argmax_rows, NormMode, SourceClassifier, NUM_CLASSES};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::metrics::{confusion, ConfusionMatrix, Scores};
use crate::tta::{TtaMethod, TtaState, DEFAULT_TTA_LR, DEFAULT_TTA_MOMENTUM};
use crate::vae::GuesModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdaptMode {
    SourceOnly,
    Gues,
    Tent,
    ShotIm,
    GuesTent,
    GuesShotIm,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 6] = [
        AdaptMode::SourceOnly,
        AdaptMode::Gues,
        AdaptMode::Tent,
        AdaptMode::ShotIm,
        AdaptMode::GuesTent,
        AdaptMode::GuesShotIm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::SourceOnly => "source_only",
            AdaptMode::Gues => "gues",
            AdaptMode::Tent => "tent",
            AdaptMode::ShotIm => "shot_im",
            AdaptMode::GuesTent => "gues+tent",
            AdaptMode::GuesShotIm => "gues+shot_im",
        }
    }

    pub fn uses_gues(self) -> bool {
        matches!(self, AdaptMode::Gues | AdaptMode::GuesTent | AdaptMode::GuesShotIm)
    }

    pub fn tta(self) -> Option<TtaMethod> {
        match self {
            AdaptMode::Tent | AdaptMode::GuesTent => Some(TtaMethod::Tent),
            AdaptMode::ShotIm | AdaptMode::GuesShotIm => Some(TtaMethod::ShotIm),
            _ => None,
        }
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// A target image with its grade; the grade is read only by the scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub grade: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OnlineSettings {
    pub mode: AdaptMode,
    pub gues: GuesConfig,
    pub tta_learning_rate: f64,
    pub tta_momentum: f64,
}

impl OnlineSettings {
    pub fn new(mode: AdaptMode, gues: GuesConfig) -> Self {
        OnlineSettings {
            mode,
            gues,
            tta_learning_rate: DEFAULT_TTA_LR,
            tta_momentum: DEFAULT_TTA_MOMENTUM,
        }
    }
}

/// Scores of one arriving batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMetrics {
    /// Samples processed up to and including this batch.
    pub step: usize,
    pub batch_index: usize,
    pub scores: Scores,
}

#[derive(Clone, Debug)]
pub struct OnlineReport {
    pub mode: AdaptMode,
    pub batches: Vec<BatchMetrics>,
    pub confusion: ConfusionMatrix,
    pub gues: AdaptReport,
    /// Logits of every batch, in arrival order.
    pub logits: Vec<Tensor>,
    /// The generator after the last update, for modes that use one.
    pub generator: Option<GuesModel>,
}

impl OnlineReport {
    pub fn aggregate(&self) -> Result<Scores> {
        Scores::of(&self.confusion)
    }

    /// `step,batch_index,acc,qwk,avg` with six decimals; a kappa that the
    /// batch's marginals leave undefined is written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,batch_index,acc,qwk,avg\n");
        for b in &self.batches {
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                b.step,
                b.batch_index,
                b.scores.acc,
                fmt_opt(b.scores.qwk),
                fmt_opt(b.scores.avg())
            ));
        }
        out
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "undefined".to_string(),
    }
}

/// Consumes `stream` once, in order.
///
/// Per batch: the generator (if any) adapts and emits its examples, then
/// the test-time method (if any) adapts on those examples and predicts;
/// otherwise the frozen classifier predicts.
pub fn run_online<I>(
    classifier: &SourceClassifier,
    generator: Option<GuesModel>,
    stream: I,
    settings: &OnlineSettings,
) -> Result<OnlineReport>
where
    I: IntoIterator<Item = Batch<LabeledImage>>,
{
    let mode = settings.mode;
    let mut classifier = classifier.clone();
    let mut gues = match (mode.uses_gues(), generator) {
        (true, Some(g)) => Some(GuesAdapter::new(g, settings.gues)?),
        (true, None) => return Err(Error::Config(format!("mode {mode} needs a generator"))),
        (false, _) => None,
    };
    let mut tta = match mode.tta() {
        Some(m) => Some(TtaState::new(m, &classifier, settings.tta_learning_rate, settings.tta_momentum)?),
        None => None,
    };
    let mut report = OnlineReport {
        mode,
        batches: Vec::new(),
        confusion: ConfusionMatrix::new(NUM_CLASSES)?,
        gues: AdaptReport::default(),
        logits: Vec::new(),
        generator: None,
    };
    let mut step = 0;
    for batch in stream {
        let (images, grades): (Vec<Image>, Vec<usize>) = batch.items.into_iter().map(|s| (s.image, s.grade)).unzip();
        let inputs = match gues.as_mut() {
            Some(adapter) => {
                let (examples, loss) = adapter.step(&images)?;
                report.gues.losses.push(loss);
                examples_to_images(&examples)?
            }
            None => images,
        };
        let logits = match tta.as_mut() {
            Some(state) if inputs.len() >= state.method().min_batch() => state.step(&mut classifier, &inputs)?.logits,
            // too small to adapt on (a short final batch): predict with
            // the method's batch statistics but leave the weights alone
            Some(_) => classifier.logits(images_to_tensor(&inputs)?, NormMode::Batch)?,
            None => classifier.predict(&inputs)?,
        };
        let pred = argmax_rows(&logits);
        let cm = confusion(&grades, &pred, NUM_CLASSES)?;
        report.confusion.merge(&cm)?;
        step += grades.len();
        report.batches.push(BatchMetrics {
            step,
            batch_index: batch.index,
            scores: Scores::of(&cm)?,
        });
        report.logits.push(logits);
    }
    report.generator = gues.map(GuesAdapter::into_model);
    Ok(report)
}
