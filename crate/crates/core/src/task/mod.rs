//! Synthetic vision tasks, the frozen recognition model, and the auxiliary
//! branch. Presence classification stands in for detection-style
//! object-level supervision; segmentation is direct.

pub mod aux;
pub mod data;
pub mod recognizer;

pub use aux::{AuxPosition, AuxiliaryBranch, AUX_TASK_TAP};
pub use data::{
    batch_images, export_dataset, generate_sample, SyntheticSample, IMAGE_SIZE,
    NUM_SEG_CLASSES, NUM_SHAPE_CLASSES,
};
pub use recognizer::{
    argmax_seg, evaluate_recognizer, pretrain_recognizer, teacher_labels,
    teacher_labels_select, PretrainConfig,
    PretrainReport, RecognitionModel, RecognizerArch, RecognizerOutput, TeacherLabels,
};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Multi-label shape presence, the object-level stand-in task.
    #[serde(alias = "Classification")]
    Classification,
    /// Dense 4-class segmentation.
    #[serde(alias = "Segmentation")]
    Segmentation,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
        }
    }
}
