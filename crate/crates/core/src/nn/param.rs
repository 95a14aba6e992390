use crate::error::{Error, Result};

/// A flat block of values with an accumulated gradient.
///
/// Non-trainable params hold buffers such as batch-norm running statistics:
/// they are serialized and averaged like weights but optimizers skip them.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Vec<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters in a fixed declaration order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    fn num_values(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All values (weights and buffers) concatenated in declaration order.
    fn flat_values(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let total = self.num_values();
        if values.len() != total {
            return Err(Error::arg(format!(
                "parameter block holds {} values, module expects {total}",
                values.len()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Collects the params of several modules into one list, preserving order.
pub fn joint_params_mut<'a>(modules: Vec<&'a mut dyn Module>) -> Vec<&'a mut Param> {
    modules.into_iter().flat_map(|m| m.params_mut()).collect()
}
