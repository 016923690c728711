pub mod error;
pub mod model;
pub mod qp;
pub mod enumerate;
pub mod analytic;
pub mod bnb;
pub mod lasso;
pub mod sim;
pub mod io;
