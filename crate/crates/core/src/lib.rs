//! Geo-spatial object store over a name-based content network.

pub mod bloom;
pub mod cluster;
pub mod engine;
pub mod frontend;
pub mod geodata;
pub mod grid;
pub mod gtfs;
pub mod icn;
pub mod naming;
pub mod perfmodel;
pub mod services;
pub mod tessellation;
pub mod trust;
pub mod wire;

pub use grid::{BoundingBox, GeoPoint, Geometry, TileId};
pub use naming::Name;
