//! Fact files, date literals, min-max normalization, dataset splits and
//! synthetic graph generation.

mod dates;
mod format;
mod normalize;
mod split;
mod synthetic;

pub use dates::{date_to_real, parse_date};
pub use format::{
    format_fact, load_dataset, load_dataset_frozen, parse_fact_file, parse_facts, parse_numeric, parse_query, write_fact_file, write_facts,
    Query, VocabMode,
};
pub use normalize::{compute_normalization, normalize_dataset, MinMax, NormalizationTable};
pub use split::{largest_remainder, split_dataset};
pub use synthetic::{generate_synthetic, PlantedLaw, SyntheticSpec, POINT_IN_TIME};
