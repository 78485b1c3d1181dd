//! Liability-side levers: the differential fee, prudential market
//! operations and the dynamic placement of the PMO threshold.

pub mod fee;
pub mod lever;
pub mod pmo;
