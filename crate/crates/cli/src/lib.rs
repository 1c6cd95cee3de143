//! File formats, experiment runners and reports behind the `embinvert`
//! command-line tool.

pub mod artifacts;
pub mod checkpoint;
pub mod experiments;
pub mod png_io;
pub mod report;
pub mod specfile;
