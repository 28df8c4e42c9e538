//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded onto an append-only [`Graph`]. Gradients are
//! computed by [`Graph::grad`]; with [`GradOptions::create_graph`] the
//! backward pass is recorded onto the same graph, so gradients can be
//! differentiated again. This is what lets a training loss depend on forces
//! that are themselves gradients of a learned energy.
//!
//! ```
//! use popmech_autodiff::{Array, GradOptions, Graph};
//!
//! let g = Graph::new();
//! let x = g.param(Array::scalar(2.0));
//! let y = x.powf(3.0).unwrap();
//! let dy = g.grad(y, &[x], GradOptions::create_graph()).unwrap()[0];
//! let d2y = g.grad(dy, &[x], GradOptions::default()).unwrap()[0];
//! assert_eq!(dy.item(), 12.0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

mod array;
mod check;
mod error;
mod graph;
mod ops;

pub use array::Array;
pub use check::{check_grad, GradCheck, GradCheckReport};
pub use error::{AutodiffError, Result};
pub use graph::{GradOptions, Graph, Var};
