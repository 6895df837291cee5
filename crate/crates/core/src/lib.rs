pub mod autoscaler;
pub mod bench;
pub mod clock;
pub mod conversion;
pub mod dicom;
pub mod dicom_store;
mod fsutil;
pub mod http;
pub mod object_store;
pub mod pubsub;
pub mod wsi;
