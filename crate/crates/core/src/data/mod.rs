pub mod catalog;
pub mod dataset;
pub mod detect;
pub mod instruction;
pub mod scene;
pub mod triplet;

pub use catalog::{Catalog, EventType, Texture};
pub use dataset::{generate_dataset, DataConfig, Dataset, DatasetManifest, Split};
pub use detect::{detect_events, jaccard, proxy_similarity, DetectorConfig};
pub use instruction::{parse_instruction, tokenize_instruction, Task};
pub use scene::{render_scene, Envelope, EventSpec, Scene};
pub use triplet::{build_triplets, filter_triplet, scene_event_count_filter, EditTriplet};
