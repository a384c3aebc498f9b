use crate::Scalar;

/// Elementwise maps with a closed-form derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    Relu,
    Tanh,
    Sqrt,
    Square,
    Exp,
    /// `x * c`
    Scale(T),
    /// `x + c`
    Offset(T),
}

impl<T: Scalar> Unary<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Exp => "exp",
            Unary::Scale(_) => "scale",
            Unary::Offset(_) => "offset",
        }
    }

    pub fn apply(&self, x: T) -> T {
        match *self {
            Unary::Relu => x.max(T::zero()),
            Unary::Tanh => x.tanh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
            Unary::Scale(c) => x * c,
            Unary::Offset(c) => x + c,
        }
    }

    /// Derivative at input `x` given output `y = apply(x)`.
    pub fn derivative(&self, x: T, y: T) -> T {
        match *self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Tanh => T::one() - y * y,
            Unary::Sqrt => {
                if y > T::zero() {
                    T::lit(0.5) / y
                } else {
                    T::zero()
                }
            }
            Unary::Square => T::lit(2.0) * x,
            Unary::Exp => y,
            Unary::Scale(c) => c,
            Unary::Offset(_) => T::one(),
        }
    }
}
