pub mod criteria;
pub mod error;
pub mod forward;
pub mod laplace;
pub mod linalg;
pub mod mesh;
pub mod oracle;
pub mod prior;
pub mod reduce;
pub mod reduced;
pub mod surrogate;
