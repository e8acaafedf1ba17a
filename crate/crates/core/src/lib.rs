pub mod influence;
pub mod path;
pub mod planb;
pub mod polytope;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod tubempc;
pub mod vehicle;
