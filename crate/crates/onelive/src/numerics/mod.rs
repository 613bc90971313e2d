//! Dense linear algebra, the reverse-mode tape, gradient checking, and Adam.

pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{BufId, Tape};
