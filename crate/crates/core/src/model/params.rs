use crate::tensor::{Float, Graph, Tensor, Var};

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Index of a non-trainable buffer (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(pub(crate) usize);

/// Named tensors in registration order; the order is the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.params.push((name.into(), t));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> BufferId {
        self.buffers.push((name.into(), t));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn params_named_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.clone(), t))
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.buffers.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_named(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter count restricted to names starting with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Places every parameter on `g`, trainable when `trainable` is set.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}
