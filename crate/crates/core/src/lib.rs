//! Class-specific influential feature extraction for the final layer of a
//! convolutional classifier.
//!
//! The pipeline runs on exported penultimate-layer features and the dense
//! classifier head that consumes them:
//!
//! 1. [`influence`] ranks every instance's features by ℓ₁ magnitude, builds a
//!    per-class histogram of the top-`k1` indices and keeps the `k2` most
//!    frequent ones per class.
//! 2. [`head`] truncates each class row of the head to its influential
//!    indices, giving one small dot product per class (a decomposed softmax).
//! 3. [`eval`] measures what the decomposition costs in accuracy, sweeps the
//!    `(k1, k2)` plane, runs noise ablations and overlap metrics.
//! 4. [`finetune`] retrains the decomposed head on cached features.
//! 5. [`attribution`] turns the influential channels of a spatial feature map
//!    into an upsampled grayscale attribution image.
//!
//! Tensors, manifests and influence maps are read and written by
//! [`tensorio`]; [`planted`] generates synthetic data with known answers.

pub mod attribution;
pub mod eval;
pub mod features;
pub mod finetune;
pub mod head;
pub mod influence;
mod par;
pub mod planted;
pub mod rng;
pub mod tensorio;

pub use features::{ClassFeatures, Dataset, FeatureBlock, LabeledSet};
pub use head::{ClassifierHead, DecomposedHead, Prediction};
pub use influence::{IndexHistogram, InfluenceMap};
pub use tensorio::{DType, TensorFile};
