//! Schema declaration, CSV ingestion, standardization, splitting and
//! synthetic data generation.

mod csv_io;
mod dataset;
mod schema;
mod synth;

pub use csv_io::{load_csv, read_csv, write_csv};
pub use dataset::{split, split_indices, Dataset, Instance, Standardizer};
pub use schema::{CategoricalFeature, FeatureSchema};
pub use synth::{synth_generate, SynthSpec, PREFERRED_MASS};
