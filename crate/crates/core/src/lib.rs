//! Low-bitrate Gaussian avatar telepresence: compact motion parameters are
//! quantized, framed and streamed over a shaped channel, then drive a
//! pre-built Gaussian avatar on the receiver through skinning, local
//! attribute controllers, interpolation, depth sorting and compositing.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod bench;
pub mod binio;
pub mod calibrate;
pub mod codec;
pub mod geom;
pub mod gsdeform;
pub mod motion;
pub mod netsim;
pub mod package;
pub mod par;
pub mod receiver;
pub mod params;
pub mod skinning;
pub mod stats;
