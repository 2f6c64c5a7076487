use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Handle to one named parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zeros,
    Ones,
}

/// All trainable parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    values: Vec<f32>,
    infos: Vec<ParamInfo>,
}

impl ParamStore {
    pub(crate) fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        match init {
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                self.values
                    .extend((0..len).map(|_| dist.sample(rng) as f32));
            }
            Init::Zeros => self.values.resize(offset + len, 0.0),
            Init::Ones => self.values.resize(offset + len, 1.0),
        }
        self.infos.push(ParamInfo {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.infos.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        let i = &self.infos[id.0];
        &self.values[i.offset..i.offset + i.len]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f32> {
        vec![0.0; self.values.len()]
    }

    pub(crate) fn slot<'a>(&self, grads: &'a mut [f32], id: ParamId) -> &'a mut [f32] {
        let i = &self.infos[id.0];
        &mut grads[i.offset..i.offset + i.len]
    }

    /// Replace all values; the layout must match.
    pub fn load(&mut self, values: Vec<f32>) -> crate::Result<()> {
        if values.len() != self.values.len() {
            return Err(crate::error::shape_mismatch(&[self.values.len()], &[values.len()]));
        }
        self.values = values;
        Ok(())
    }
}
