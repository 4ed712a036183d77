//! Geometry, stitching, codecs and simulation for a panoramic teleoperation
//! stack: six fisheye cameras on a drivable robot, stitched into an
//! equirectangular panorama that operators look around in locally.

pub mod codec;
pub mod features;
pub mod frame;
pub mod geometry;
pub mod image;
pub mod kinematics;
pub mod par;
pub mod rig;
pub mod scene;
pub mod seams;
pub mod stitch;
pub mod view;
pub mod watermark;

pub use codec::{decode_frame, encode_frame, Codec, CodecError};
pub use frame::{FisheyeFrame, PanoramaFrame, StageId, StageStamp, StageTrail};
pub use geometry::{CameraPose, EquirectCoords, FisheyeIntrinsics, ViewPose};
pub use image::RgbImage;
pub use kinematics::{ControlCommand, DeviceState, KinematicLimits};
pub use par::Exec;
pub use rig::{RigCalibration, RigCamera, SeamAdjustment};
pub use scene::{DevicePose, RigRenderer, SceneEnvironment};
pub use stitch::{build_stitch_map, stitch, StitchMap};
pub use view::render_view;
