//! Mouth-crop preprocessing and the lip-motion encoder.

mod encoder;
mod roi;

pub use encoder::{
    encode, encode_graph, encode_prepared, init_lip_params, resample_matrix, resample_temporal,
    LipEncoderConfig, LipFeature,
};
pub use roi::{
    preprocess_rois, read_png_rois, read_raw_rois, read_rois, resize_bilinear, write_png_rois,
    write_raw_rois, PreparedRois, RoiFormat, RoiSequence,
};
