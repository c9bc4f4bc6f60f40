//! Datasets and the client partitioning regimes.

mod cifar;
mod partition;
mod toy;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub use cifar::{load_cifar10, parse_cifar_batch, Split, CIFAR_RECORD_BYTES};
pub use partition::{data_sharing_split, partition_iid, partition_label_skew};
pub use toy::{make_toy_dataset, toy_template, TOY_TEMPLATES};

/// Images in `[-1, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Argument(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Argument(format!("label {bad} outside {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Argument("pixel values must lie in [-1, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Argument("empty dataset subset".into()));
        }
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            images,
            labels,
            num_classes: self.num_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.labels, self.num_classes, None)
    }
}

pub(crate) fn class_counts(labels: &[usize], num_classes: usize, indices: Option<&[usize]>) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    match indices {
        Some(ix) => ix.iter().for_each(|&i| counts[labels[i]] += 1),
        None => labels.iter().for_each(|&l| counts[l] += 1),
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    LabelSkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    pub assignments: Vec<Vec<usize>>,
    pub client_count: usize,
    /// Set when the label bound could not apply (a single client).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub client_part: Vec<Vec<usize>>,
    pub server_part: Vec<usize>,
    pub shared_pool: Vec<usize>,
    pub merged_subset: Vec<usize>,
    pub merged_clients: Vec<Vec<usize>>,
    pub beta_pct: f64,
    pub alpha_pct: f64,
}

impl SharingPlan {
    pub fn warmup_indices(&self) -> &[usize] {
        &self.shared_pool
    }

    pub fn client_pool_size(&self) -> usize {
        self.client_part.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Iid,
    LabelSkew,
    DataSharing,
}

/// On-disk form shared by every partitioning regime. `clients` holds the
/// indices each client trains on (merged lists for data sharing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub mode: PlanMode,
    pub clients: Vec<Vec<usize>>,
    pub shared_pool: Vec<usize>,
    pub beta_pct: Option<f64>,
    pub alpha_pct: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub client_part: Vec<Vec<usize>>,
    #[serde(default)]
    pub degenerate: bool,
}

impl DataPlan {
    pub fn from_partition(plan: &PartitionPlan, seed: u64) -> Self {
        DataPlan {
            mode: match plan.mode {
                PartitionMode::Iid => PlanMode::Iid,
                PartitionMode::LabelSkew => PlanMode::LabelSkew,
            },
            clients: plan.assignments.clone(),
            shared_pool: Vec::new(),
            beta_pct: None,
            alpha_pct: None,
            seed,
            client_part: Vec::new(),
            degenerate: plan.degenerate,
        }
    }

    pub fn from_sharing(plan: &SharingPlan, seed: u64) -> Self {
        DataPlan {
            mode: PlanMode::DataSharing,
            clients: plan.merged_clients.clone(),
            shared_pool: plan.shared_pool.clone(),
            beta_pct: Some(plan.beta_pct),
            alpha_pct: Some(plan.alpha_pct),
            seed,
            client_part: plan.client_part.clone(),
            degenerate: false,
        }
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: DataPlan = serde_json::from_str(&text)?;
        if plan.clients.is_empty() {
            return Err(Error::Config(format!("{} lists no clients", path.display())));
        }
        Ok(plan)
    }

    /// Per-client class counts as CSV: `client_id,samples,class_0,…`.
    pub fn class_count_csv(&self, labels: &[usize], num_classes: usize) -> String {
        let mut out = String::from("client_id,samples");
        for c in 0..num_classes {
            let _ = write!(out, ",class_{c}");
        }
        out.push('\n');
        for (i, ix) in self.clients.iter().enumerate() {
            let _ = write!(out, "{i},{}", ix.len());
            for n in class_counts(labels, num_classes, Some(ix)) {
                let _ = write!(out, ",{n}");
            }
            out.push('\n');
        }
        out
    }
}
