//! HTTP service for collecting human part-saliency annotations.
//!
//! A labeler is shown one body part of a probe image, masked in place,
//! together with a shuffled sample of 32 gallery images, and picks until
//! they find the same person. Fast, consistent finds mark the part as
//! salient.
//!
//! The data directory holds `manifest.csv` (`path,camera,identity`),
//! `parts.csv` (`image_id,part_id,mask_path`) and the append-only
//! `events.log` that is replayed on startup. Request and response bodies
//! are `key=value` lines; see [`body`].

pub mod body;
pub mod catalog;
pub mod error;
pub mod http;
pub mod service;

pub use catalog::Catalog;
pub use error::ServiceError;
pub use http::{router, serve};
pub use service::{Service, ServiceConfig};
