//! Parameter groups generic over their slot type.
//!
//! The same struct holds tensors (`Foo<Tensor>`), tape handles after binding
//! (`Foo<Var>`) or gradients, and `map`/`visit` always walk fields in
//! declaration order, which fixes the serialisation and optimiser order.

macro_rules! param_group {
    ($(#[$m:meta])* pub struct $name:ident { $($(#[$fm:meta])* $field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $($(#[$fm])* pub $field: P,)*
        }

        impl<P> $name<P> {
            pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> $name<Q> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(&str, &'a mut P)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

pub(crate) use param_group;
