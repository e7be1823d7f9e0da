/// Declares a weight struct of tensors plus a matching struct of tape
/// handles, with binding and ordered enumeration helpers.
macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident => $bound:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::autodiff::Tensor,)*
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $bound {
            $(pub $field: $crate::autodiff::Var,)*
        }

        impl $name {
            pub fn bind(&self, tape: &mut $crate::autodiff::Tape, trainable: bool) -> $bound {
                $bound {
                    $($field: if trainable {
                        tape.param(self.$field.clone())
                    } else {
                        tape.constant(self.$field.clone())
                    },)*
                }
            }

            pub fn named(&self) -> Vec<(&'static str, &$crate::autodiff::Tensor)> {
                vec![$((stringify!($field), &self.$field),)*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut $crate::autodiff::Tensor> {
                vec![$(&mut self.$field,)*]
            }
        }

        impl $bound {
            pub fn vars(&self) -> Vec<$crate::autodiff::Var> {
                vec![$(self.$field,)*]
            }
        }
    };
}

pub(crate) use param_group;
