use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors stored back to back in one flat buffer. Gradients and
/// optimizer moments reuse the same layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub specs: Vec<TensorSpec>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            specs: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Adds a zero tensor and returns its id.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.data.len();
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.data.resize(offset + spec.len(), 0.0);
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            specs: self.specs.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn slice(&self, id: usize) -> &[f64] {
        &self.data[self.specs[id].range()]
    }

    pub fn slice_mut(&mut self, id: usize) -> &mut [f64] {
        let range = self.specs[id].range();
        &mut self.data[range]
    }

    pub fn mat(&self, id: usize) -> ArrayView2<'_, f64> {
        let s = &self.specs[id];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &self.data[s.range()])
            .expect("tensor is a matrix")
    }

    pub fn mat_mut(&mut self, id: usize) -> ArrayViewMut2<'_, f64> {
        let s = &self.specs[id];
        let shape = (s.shape[0], s.shape[1]);
        let range = s.range();
        ArrayViewMut2::from_shape(shape, &mut self.data[range]).expect("tensor is a matrix")
    }

    pub fn vec(&self, id: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    pub fn vec_mut(&mut self, id: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn fill_uniform<R: Rng + ?Sized>(&mut self, id: usize, bound: f64, rng: &mut R) {
        for x in self.slice_mut(id) {
            *x = rng.gen_range(-bound..=bound);
        }
    }

    pub fn fill(&mut self, id: usize, value: f64) {
        self.slice_mut(id).fill(value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.specs
            .iter()
            .find(|s| self.data[s.range()].iter().any(|x| !x.is_finite()))
            .map(|s| s.name.as_str())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}
