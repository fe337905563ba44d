//! File formats and the synthetic dataset.

mod checkpoint;
mod pad;
mod raster;
mod synthetic;
mod tensor_file;

pub use checkpoint::{checkpoint_elem, load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use pad::{crop_top_left, pad_to_multiple};
pub use raster::{read_pgm, read_ppm, write_pgm, write_ppm, Image};
pub use synthetic::{
    generate_sample, generate_synthetic, load_dataset, write_dataset, DatasetManifest, ManifestItem, Sample,
    SyntheticSpec, PALETTE,
};
pub use tensor_file::{decode_tensor, encode_tensor, load_tensor, save_tensor, HEADER_LEN, MAGIC};
