//! The JSON model container written by `train`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use coalmtl::coalescent::{to_dot, to_newick};
use coalmtl::da::{da_predict, DaModelState};
use coalmtl::evalbench::Method;
use coalmtl::fit::Prediction;
use coalmtl::mtl::{mtl_predict, MtlModelState};
use coalmtl::{CoalescentTree, TaskKind};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const FORMAT: &str = "coalmtl-model-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum FittedModel {
    Da(DaModelState),
    Mtl(MtlModelState),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    /// Task names in leaf order.
    pub tasks: Vec<String>,
    pub fitted: FittedModel,
}

impl ModelFile {
    pub fn new(tasks: Vec<String>, fitted: FittedModel) -> Self {
        ModelFile { format: FORMAT.to_string(), tasks, fitted }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let f = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let m: ModelFile =
            serde_json::from_reader(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT {
            return Err(CliError::Data(format!("{}: unsupported model format '{}'", path.display(), m.format)));
        }
        if m.tasks.len() != m.num_tasks() {
            return Err(CliError::Data(format!("{}: {} task names for {} tasks", path.display(), m.tasks.len(), m.num_tasks())));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        match &self.fitted {
            FittedModel::Da(s) => s.num_tasks(),
            FittedModel::Mtl(s) => s.num_tasks(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.fitted {
            FittedModel::Da(s) => s.dim,
            FittedModel::Mtl(s) => s.dim,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match &self.fitted {
            FittedModel::Da(s) => s.kind,
            FittedModel::Mtl(s) => s.kind,
        }
    }

    pub fn tree(&self) -> &CoalescentTree {
        match &self.fitted {
            FittedModel::Da(s) => &s.tree,
            FittedModel::Mtl(s) => &s.tree,
        }
    }

    pub fn trace(&self) -> &[f64] {
        match &self.fitted {
            FittedModel::Da(s) => &s.trace,
            FittedModel::Mtl(s) => &s.trace,
        }
    }

    pub fn selected_iteration(&self) -> usize {
        match &self.fitted {
            FittedModel::Da(s) => s.selected_iteration,
            FittedModel::Mtl(s) => s.selected_iteration,
        }
    }

    pub fn seed(&self) -> u64 {
        match &self.fitted {
            FittedModel::Da(s) => s.config.seed,
            FittedModel::Mtl(s) => s.config.seed,
        }
    }

    pub fn method(&self) -> Method {
        match &self.fitted {
            FittedModel::Da(s) => Method::Coal(s.config.variant),
            FittedModel::Mtl(s) => Method::Mtl(s.config.variant),
        }
    }

    pub fn weights(&self, task: usize) -> &DVector<f64> {
        match &self.fitted {
            FittedModel::Da(s) => s.weights(task),
            FittedModel::Mtl(s) => s.weights(task),
        }
    }

    pub fn predict(&self, task: usize, x: &DVector<f64>) -> Result<Prediction, CliError> {
        Ok(match &self.fitted {
            FittedModel::Da(s) => da_predict(s, task, x)?,
            FittedModel::Mtl(s) => mtl_predict(s, task, x)?,
        })
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == name)
    }

    pub fn newick(&self) -> String {
        to_newick(self.tree(), Some(&self.tasks))
    }

    pub fn dot(&self) -> String {
        to_dot(self.tree(), Some(&self.tasks))
    }
}
