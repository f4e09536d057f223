//! Learnable sets of four-parameter homographies for detectors facing geometric
//! domain shifts: warping and its gradients, set fitting against dense mappings,
//! a multi-homography detector, mean-teacher adaptation, a synthetic benchmark
//! and AP evaluation.

pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod mean_teacher;
pub mod multiwarp;
pub mod nn;
pub mod synthbench;
pub mod tensor;
pub mod transform_approx;

pub use checkpoint::{Checkpoint, Stage};
pub use detector::{Annotation, BBox, Detection, DetectorConfig, LossBreakdown, LossMode};
pub use error::{Error, Result};
pub use evaluation::{EvalOptions, EvalReport};
pub use geometry::{HomographyParams, Point2};
pub use mean_teacher::{AdaptConfig, AdaptMode, TeacherStudentState, TraceRecord, TrainingConfig};
pub use multiwarp::{FeatureStack, HomographySet, Model};
pub use synthbench::{BenchSpec, Dataset, DomainSample, SceneSpec, ShiftSpec, Split};
pub use tensor::Tensor;
pub use transform_approx::{DenseMapping, FitConfig, FitReport};
