//! Branched, progressively grown GAN with scale-disentangled latent codes.
//!
//! The generator's input noise is split into sub-vectors, one per feature
//! scale. Training grows the network in depth (resolution) and width
//! (active sub-vectors) in lockstep, which makes each sub-vector control a
//! distinct band of spatial frequencies. The crate also provides the
//! variance-by-scale metric, cross-scale latent fusion and constraint-driven
//! latent editing.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod edit;
pub mod error;
pub mod hog;
pub mod imaging;
pub mod latent;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{NetConfig, Profile};
pub use data::{generate_synthetic, load_dataset, make_pyramid, DataSource, Dataset, DatasetSpec, SyntheticRecipe};
pub use edit::{optimize_edit, EditConfig, EditConstraints, EditResult, InitMode};
pub use error::{Error, Result};
pub use hog::{hog, HogSpec};
pub use imaging::Image;
pub use latent::{constant_sweep, fuse, sample_latent, BranchedLatent, SamplePolicy, SubvectorSource};
pub use networks::{Discriminator, Encoder, Generator, Network};
pub use spectral::{band_filter, vbs_report, BandSpec, VbsReport, VbsReportOptions, VbsTarget};
pub use trainer::{
    default_schedule, run_joint, run_progressive, suppression_experiment, train_encoder, OptimSpec, ScheduleStage,
    SuppressionKind, SuppressionReport, TrainState, Trainer,
};
