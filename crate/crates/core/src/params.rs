//! Weight bundles generic over their element type.
//!
//! A bundle such as `GgnnWeights<T>` holds `Tensor`s when stored and `Var`s
//! once bound to a tape for one forward pass. Every bundle visits its
//! members in a fixed order, which is how gradients are matched back to
//! parameters.

use crate::tensor::{Gradients, Result, Tape, Tensor, Var};

pub trait Bundle<T> {
    type Mapped<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U>;
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T));
}

/// Helpers available on any bundle of tensors.
pub trait Parameters: Bundle<Tensor> {
    fn bind<'t>(&self, tape: &'t Tape) -> Self::Mapped<Var<'t>> {
        self.map(&mut |t| tape.var(t.clone()))
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }

    /// Total number of scalar weights.
    fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }
}

impl<B: Bundle<Tensor>> Parameters for B {}

/// Gradient of every member of a bound bundle, in visit order.
pub fn collect_grads<'t, B: Bundle<Var<'t>>>(bound: &B, grads: &Gradients) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut err = None;
    bound.visit(&mut |v| match grads.wrt(*v) {
        Ok(g) => out.push(g),
        Err(e) => err = Some(e),
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

impl<T, B: Bundle<T>> Bundle<T> for Vec<B> {
    type Mapped<U> = Vec<B::Mapped<U>>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U> {
        self.iter().map(|b| b.map(f)).collect()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        self.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

impl<T, B: Bundle<T>> Bundle<T> for Option<B> {
    type Mapped<U> = Option<B::Mapped<U>>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U> {
        self.as_ref().map(|b| b.map(f))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        if let Some(b) = self {
            b.visit(f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        if let Some(b) = self {
            b.visit_mut(f);
        }
    }
}

impl<T, A: Bundle<T>, B: Bundle<T>> Bundle<T> for (A, B) {
    type Mapped<U> = (A::Mapped<U>, B::Mapped<U>);

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U> {
        (self.0.map(f), self.1.map(f))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.0.visit(f);
        self.1.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        self.0.visit_mut(f);
        self.1.visit_mut(f);
    }
}

/// A single weight is a bundle of one.
#[derive(Debug, Clone, PartialEq)]
pub struct Leaf<T>(pub T);

impl<T> Bundle<T> for Leaf<T> {
    type Mapped<U> = Leaf<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Leaf<U> {
        Leaf(f(&self.0))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        f(&self.0)
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        f(&mut self.0)
    }
}

/// Implements [`Bundle`] for a struct whose fields are either plain `T`
/// members or nested bundles.
macro_rules! bundle {
    ($name:ident { $($field:ident),* $(,)? } $(nested { $($nested:ident),* $(,)? })?) => {
        impl<T> $crate::params::Bundle<T> for $name<T> {
            type Mapped<U> = $name<U>;

            fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $name<U> {
                $name {
                    $($field: f(&self.$field),)*
                    $($($nested: $crate::params::Bundle::map(&self.$nested, f),)*)?
                }
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
                $(f(&self.$field);)*
                $($($crate::params::Bundle::visit(&self.$nested, f);)*)?
            }

            fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
                $(f(&mut self.$field);)*
                $($($crate::params::Bundle::visit_mut(&mut self.$nested, f);)*)?
            }
        }
    };
}

pub(crate) use bundle;
