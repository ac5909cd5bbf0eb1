//! A miniature message-passing runtime.
//!
//! Processes exchange tagged messages over communicators. Beyond plain
//! point-to-point traffic the runtime offers stream communicators bound to
//! dedicated lock-free virtual communication interfaces (VCIs), thread
//! communicators whose ranks are threads, enqueue operations on simulated
//! device queues, generalized requests with progress callbacks, datatype
//! flattening, and passive-target gets.

pub mod comm;
pub mod datatype;
pub mod error;
pub mod offload;
pub mod onesided;
pub mod p2p;
pub mod request;
pub mod runtime;
pub mod stream;
pub(crate) mod transport;

pub use comm::{Comm, CommKind, Op, ANY_SOURCE, ANY_STREAM, ANY_TAG};
pub use datatype::Datatype;
pub use error::{Error, Result};
pub use offload::{DeviceBuffer, DeviceQueue};
pub use onesided::{Epoch, LockType, Window};
pub use p2p::Status;
pub use request::{waitall, GrequestFns, GrequestHandle, Request};
pub use runtime::{Config, Info, Instance, LockMode, TransportKind, Universe};
pub use stream::{Stream, StreamKind};
