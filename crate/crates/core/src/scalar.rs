/// Floating-point scalar for model and metric arithmetic: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an f64 constant into the working scalar type.
pub fn s<S: Scalar>(x: f64) -> S {
    S::from(x).expect("constant representable in scalar type")
}
