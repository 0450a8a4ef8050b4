use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor5};

/// A named model tensor. Gradients live in the value's gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor5<T>,
    pub trainable: bool,
}

/// Names are dotted paths over `[a-z0-9._]`, e.g. `conv4.offset.weight`.
pub fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'.' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid parameter name `{name}`")))
    }
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor5<T>, trainable: bool) -> Result<Self> {
        let name = name.into();
        validate_name(&name)?;
        Ok(Self {
            name,
            value,
            trainable,
        })
    }

    /// Weight decay applies to `*.weight` tensors only, never to biases or
    /// normalization parameters.
    pub fn decays(&self) -> bool {
        self.trainable && self.name.ends_with(".weight")
    }
}
