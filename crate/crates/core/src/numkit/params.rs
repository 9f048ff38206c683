use super::{NumError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of trainable tensors. Insertion order is the canonical
/// parameter order (optimizer state, checkpoints, gradient checks).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumError> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(NumError::Usage(format!("duplicate parameter name `{name}`")));
        }
        if !value.is_finite() {
            return Err(NumError::NonFinite(format!("parameter `{name}` is not finite")));
        }
        let grad = Tensor::zeros_like(&value);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> Result<&Parameter, NumError> {
        self.params
            .get(id.0)
            .ok_or_else(|| NumError::Usage(format!("unknown parameter id {}", id.0)))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Parameter, NumError> {
        self.params
            .get_mut(id.0)
            .ok_or_else(|| NumError::Usage(format!("unknown parameter id {}", id.0)))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<(), NumError> {
        let p = self.get_mut(id)?;
        if p.grad.shape() != g.shape() {
            return Err(NumError::Shape(format!(
                "gradient shape {:?} does not match parameter `{}` {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.grad.add_assign(g);
        Ok(())
    }
}
