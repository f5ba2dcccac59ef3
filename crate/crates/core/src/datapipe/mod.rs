//! Dataset schemas, text-file loading, history padding, batching and a
//! synthetic impression generator.

mod batch;
mod io;
mod schema;
mod synth;

pub use batch::{batches, pad_history, Batch};
pub use io::{
    format_items, format_samples, load_items, load_samples, parse_items, parse_samples,
    write_items, write_samples,
};
pub use schema::{ImpressionSample, ItemRecord, ItemTable, SampleSet, PADDING_ID};
pub use synth::{gen_synthetic, generate, SynthConfig, SyntheticData, SIDE_LEVELS};
