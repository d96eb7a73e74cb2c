//! Input/output of point clouds, cameras and images, plus the PCA canonical frame.

mod camera;
mod frame;
mod image;
mod point_cloud;

pub use camera::{generate_rays, load_cameras, save_cameras, Camera, TaggedCamera};
pub use frame::{compute_canonical_frame, CanonicalFrame, DEFAULT_FRAME_MARGIN};
pub use image::{
    encode_f32img, encode_ppm, load_f32img, load_image, load_ppm, quantize, save_f32img, save_image,
    save_ppm, Image,
};
pub use point_cloud::{load_point_cloud, save_point_cloud, PointCloud};
