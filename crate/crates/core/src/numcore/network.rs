use crate::error::{Error, Result};
use crate::numcore::layers::{Layer, ParamGrads};
use crate::numcore::tensor::Tensor;

/// A chain of layers applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
}

fn at_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape(message) => Error::LayerShape { layer, message },
        other => other,
    }
}

impl Sequential {
    /// Builds the chain and checks that the declared geometries compose
    /// starting from `input` dims.
    pub fn new(layers: Vec<Layer>, input: &[usize]) -> Result<Self> {
        let net = Self { layers };
        net.output_dims(input)?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut dims = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            dims = l.output_dims(&dims).map_err(at_layer(i))?;
        }
        Ok(dims)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.forward(&cur).map_err(at_layer(i))?;
        }
        Ok(cur)
    }

    /// All intermediate values: entry 0 is the input, entry `i + 1` the
    /// output of layer `i`.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let y = l.forward(trace.last().expect("non-empty")).map_err(at_layer(i))?;
            trace.push(y);
        }
        Ok(trace)
    }

    /// Reverse pass over a recorded trace. `inject` adds extra upstream
    /// gradient at trace positions (index into the trace, as above) before
    /// the layer producing that value is differentiated.
    pub fn backward(
        &self,
        trace: &[Tensor],
        upstream: &Tensor,
        inject: &[(usize, &Tensor)],
    ) -> Result<(Tensor, Vec<Option<ParamGrads>>)> {
        let n = self.layers.len();
        if trace.len() != n + 1 {
            return Err(Error::Shape(format!("trace has {} entries for {} layers", trace.len(), n)));
        }
        if upstream.dims() != trace[n].dims() {
            return Err(Error::LayerShape {
                layer: n.saturating_sub(1),
                message: format!(
                    "upstream gradient dims {:?} do not match output dims {:?}",
                    upstream.dims(),
                    trace[n].dims()
                ),
            });
        }
        let mut grads = vec![None; n];
        let mut g = upstream.clone();
        add_injections(&mut g, n, inject)?;
        for i in (0..n).rev() {
            let (gi, pg) = self.layers[i].backward(&trace[i], &g).map_err(at_layer(i))?;
            grads[i] = pg;
            g = gi;
            add_injections(&mut g, i, inject)?;
        }
        Ok((g, grads))
    }

    /// References to every parameter tensor, kernel before bias, in layer order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(|l| l.params()).flat_map(|(k, b)| [k, b]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

fn add_injections(g: &mut Tensor, position: usize, inject: &[(usize, &Tensor)]) -> Result<()> {
    for (pos, extra) in inject {
        if *pos == position {
            g.axpy(1.0, extra)?;
        }
    }
    Ok(())
}

/// Flattens per-layer gradients into the order of [`Sequential::params`].
pub fn flatten_param_grads(grads: Vec<Option<ParamGrads>>) -> Vec<Tensor> {
    grads.into_iter().flatten().flat_map(|p| [p.kernel, p.bias]).collect()
}

/// Reverse-mode gradients of `⟨net(input), upstream⟩` with respect to the
/// input and every layer's parameters.
pub fn backprop(net: &Sequential, input: &Tensor, upstream: &Tensor) -> Result<(Tensor, Vec<Option<ParamGrads>>)> {
    let trace = net.forward_trace(input)?;
    net.backward(&trace, upstream, &[])
}
