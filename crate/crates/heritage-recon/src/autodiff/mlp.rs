//! Multi-layer perceptron parameters and forward passes.
//!
//! One struct serves both fields: weights live in a shared [`ParamSet`]
//! (layout `out x in`, matching the checkpoint container), and the forward
//! pass exists in two flavors — taped for training and plain matrix math for
//! inference. Layers can declare a skip connection that re-concatenates the
//! network input (scaled by 1/sqrt(2)) before the layer.

use super::params::{ParamRef, ParamSet};
use super::tape::{self, NodeId, Tape};
use super::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    /// ln(1 + exp(beta x)) / beta
    Softplus { beta: f64 },
    Relu,
    Sigmoid,
    /// Linear output.
    None,
}

impl Activation {
    fn apply_plain(&self, z: &mut [f64]) {
        match *self {
            Activation::Softplus { beta } => {
                for v in z.iter_mut() {
                    *v = tape::softplus(*v, beta);
                }
            }
            Activation::Relu => {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            Activation::Sigmoid => {
                for v in z.iter_mut() {
                    *v = tape::sigmoid(*v);
                }
            }
            Activation::None => {}
        }
    }

    /// Derivative evaluated at the pre-activation.
    fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Softplus { beta } => tape::sigmoid(beta * z),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = tape::sigmoid(z);
                s * (1.0 - s)
            }
            Activation::None => 1.0,
        }
    }

    fn apply_taped(&self, tape: &mut Tape, z: NodeId) -> NodeId {
        match *self {
            Activation::Softplus { beta } => tape.softplus(z, beta),
            Activation::Relu => tape.relu(z),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::None => z,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: ParamRef,
    pub bias: ParamRef,
    pub activation: Activation,
}

/// MLP as references into a `ParamSet`, plus skip wiring.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    /// Layers whose input is `concat(previous, network_input) / sqrt(2)`.
    pub skips: Vec<usize>,
}

/// Node ids recorded during a taped forward pass, for follow-up passes that
/// need the internals (the forward-gradient used for SDF normals).
pub struct ForwardTrace {
    /// Pre-activation z of every layer.
    pub pre: Vec<NodeId>,
    /// Input actually fed to every layer (post-skip concat).
    pub layer_input: Vec<NodeId>,
    pub output: NodeId,
}

impl MlpParams {
    /// Register a new MLP in `params` with the given layer widths
    /// (`sizes[0]` is the input width) and uniform Kaiming-style init.
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        skips: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "mlp {name} needs at least input and output sizes"
            )));
        }
        let input_dim = sizes[0];
        let mut layers = Vec::new();
        for l in 0..sizes.len() - 1 {
            let d_in = sizes[l] + if skips.contains(&l) { input_dim } else { 0 };
            let d_out = sizes[l + 1];
            let bound = (6.0 / d_in as f64).sqrt();
            let wdata: Vec<f64> = (0..d_out * d_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let weight = params.insert(
                format!("{name}.w{l}"),
                Tensor::matrix(d_out, d_in, wdata)?,
            );
            let bias = params.insert(format!("{name}.b{l}"), Tensor::zeros(vec![1, d_out]));
            let activation = if l == sizes.len() - 2 {
                output_activation
            } else {
                hidden_activation
            };
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        let mlp = MlpParams {
            layers,
            skips: skips.to_vec(),
        };
        mlp.validate(params)?;
        Ok(mlp)
    }

    pub fn input_dim(&self, params: &ParamSet) -> usize {
        params.value(self.layers[0].weight).cols()
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        params.value(self.layers.last().expect("nonempty mlp").weight).rows()
    }

    /// Check that consecutive layer dimensions chain, accounting for skips.
    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        let input_dim = self.input_dim(params);
        let mut width = input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = params.value(layer.weight);
            let expect_in = width + if self.skips.contains(&l) && l > 0 { input_dim } else { 0 };
            if w.cols() != expect_in {
                return Err(Error::Dimension(format!(
                    "layer {l}: weight expects {} inputs, chain provides {expect_in}",
                    w.cols()
                )));
            }
            let b = params.value(layer.bias);
            if b.cols() != w.rows() || b.rows() != 1 {
                return Err(Error::Dimension(format!(
                    "layer {l}: bias [{}, {}] does not match {} outputs",
                    b.rows(),
                    b.cols(),
                    w.rows()
                )));
            }
            width = w.rows();
        }
        Ok(())
    }

    /// Taped forward pass over a batch (rows = samples). Records every
    /// primitive on the tape.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, input: NodeId) -> Result<NodeId> {
        Ok(self.forward_traced(tape, params, input)?.output)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        input: NodeId,
    ) -> Result<ForwardTrace> {
        let in_cols = tape.shape(input).1;
        let want = self.input_dim(params);
        if in_cols != want {
            return Err(Error::Dimension(format!(
                "mlp input has {in_cols} columns, first layer expects {want}"
            )));
        }
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut layer_input = Vec::with_capacity(self.layers.len());
        let mut a = input;
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 && self.skips.contains(&l) {
                let cat = tape.concat_cols(&[a, input])?;
                a = tape.scale(cat, inv_sqrt2);
            }
            layer_input.push(a);
            let w = tape.param(params, layer.weight)?;
            let b = tape.param(params, layer.bias)?;
            let z = tape.matmul_tb(a, w)?;
            let z = tape.add_row(z, b)?;
            pre.push(z);
            a = layer.activation.apply_taped(tape, z);
        }
        Ok(ForwardTrace {
            pre,
            layer_input,
            output: a,
        })
    }

    /// Plain forward pass, no tape. Input rows are samples.
    pub fn infer(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        Ok(self.infer_traced(params, input)?.0)
    }

    /// Plain forward returning also each layer's pre-activation, for the
    /// no-tape input-gradient pass.
    pub fn infer_traced(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let n = input.rows();
        if input.cols() != self.input_dim(params) {
            return Err(Error::Dimension(format!(
                "mlp input has {} columns, first layer expects {}",
                input.cols(),
                self.input_dim(params)
            )));
        }
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut a = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 && self.skips.contains(&l) {
                a = concat_cols_scaled(&a, input, inv_sqrt2);
            }
            let w = params.value(layer.weight);
            let bias = params.value(layer.bias);
            let (d_out, d_in) = (w.rows(), w.cols());
            let mut z = vec![0.0; n * d_out];
            tape::dgemm_tb(n, d_in, d_out, a.data(), w.data(), &mut z);
            for row in z.chunks_exact_mut(d_out) {
                for (v, b) in row.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
            let mut z = Tensor::matrix(n, d_out, z)?;
            pres.push(z.clone());
            layer.activation.apply_plain(z.data_mut());
            a = z;
        }
        Ok((a, pres))
    }

    /// Jacobian-vector products of the output with respect to the input, one
    /// per tangent seed, computed without a tape. `tangents[d]` must be the
    /// derivative of the (already lifted) input with respect to scalar `d`.
    /// Returns the output value and one `[n x out]` matrix per tangent.
    pub fn infer_with_input_jvp(
        &self,
        params: &ParamSet,
        input: &Tensor,
        tangents: &[Tensor],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let (out, pres) = self.infer_traced(params, input)?;
        let n = input.rows();
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let mut jvps = Vec::with_capacity(tangents.len());
        for t0 in tangents {
            let mut t = t0.clone();
            for (l, layer) in self.layers.iter().enumerate() {
                if l > 0 && self.skips.contains(&l) {
                    t = concat_cols_scaled(&t, t0, inv_sqrt2);
                }
                let w = params.value(layer.weight);
                let (d_out, d_in) = (w.rows(), w.cols());
                let mut tz = vec![0.0; n * d_out];
                tape::dgemm_tb(n, d_in, d_out, t.data(), w.data(), &mut tz);
                let pre = &pres[l];
                for (i, v) in tz.iter_mut().enumerate() {
                    *v *= layer.activation.derivative(pre.data()[i]);
                }
                t = Tensor::matrix(n, d_out, tz)?;
            }
            jvps.push(t);
        }
        Ok((out, jvps))
    }

    /// Taped forward-gradient pass: same recursion as `infer_with_input_jvp`
    /// but recorded on the tape, so the returned tangent outputs are
    /// differentiable with respect to the parameters. `trace` must come from
    /// `forward_traced` on the same tape; `tangents[d]` are constant seeds.
    pub fn forward_input_jvp(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        trace: &ForwardTrace,
        tangents: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        // Activation-derivative nodes are shared across tangent directions.
        let mut deriv: Vec<Option<NodeId>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let d = match layer.activation {
                Activation::Softplus { beta } => {
                    let zb = tape.scale(trace.pre[l], beta);
                    Some(tape.sigmoid(zb))
                }
                Activation::Relu => {
                    // step(z) has zero derivative a.e.; constant is exact here.
                    let z = tape.value(trace.pre[l]);
                    let step: Vec<f64> = z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                    let (r, c) = tape.shape(trace.pre[l]);
                    Some(tape.constant(&Tensor::matrix(r, c, step)?)?)
                }
                Activation::Sigmoid => {
                    let s = tape.sigmoid(trace.pre[l]);
                    let s2 = tape.square(s);
                    Some(tape.sub(s, s2)?)
                }
                Activation::None => None,
            };
            deriv.push(d);
        }
        let mut out = Vec::with_capacity(tangents.len());
        for &t0 in tangents {
            let mut t = t0;
            for (l, layer) in self.layers.iter().enumerate() {
                if l > 0 && self.skips.contains(&l) {
                    let cat = tape.concat_cols(&[t, t0])?;
                    t = tape.scale(cat, inv_sqrt2);
                }
                let w = tape.param(params, layer.weight)?;
                let tz = tape.matmul_tb(t, w)?;
                t = match deriv[l] {
                    Some(d) => tape.mul(tz, d)?,
                    None => tz,
                };
            }
            out.push(t);
        }
        Ok(out)
    }
}

fn concat_cols_scaled(a: &Tensor, b: &Tensor, scale: f64) -> Tensor {
    let n = a.rows();
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        data.extend(a.row(i).iter().map(|v| v * scale));
        data.extend(b.row(i).iter().map(|v| v * scale));
    }
    Tensor::matrix(n, ca + cb, data).expect("concat shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_mlp(rng: &mut ChaCha8Rng) -> (ParamSet, MlpParams) {
        let mut params = ParamSet::new();
        let mlp = MlpParams::new(
            &mut params,
            "net",
            &[3, 16, 16, 2],
            Activation::Softplus { beta: 1.0 },
            Activation::None,
            &[],
            rng,
        )
        .unwrap();
        (params, mlp)
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut params = ParamSet::new();
        let w = params.insert("w0", Tensor::zeros(vec![2, 3]));
        let b = params.insert("b0", Tensor::matrix(1, 2, vec![0.25, -1.5]).unwrap());
        let mlp = MlpParams {
            layers: vec![Layer {
                weight: w,
                bias: b,
                activation: Activation::None,
            }],
            skips: vec![],
        };
        let input = Tensor::matrix(4, 3, vec![1.0; 12]).unwrap();
        let out = mlp.infer(&params, &input).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), &[0.25, -1.5]);
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut params = ParamSet::new();
        let w = params.insert(
            "w0",
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let b = params.insert("b0", Tensor::zeros(vec![1, 3]));
        let mlp = MlpParams {
            layers: vec![Layer {
                weight: w,
                bias: b,
                activation: Activation::None,
            }],
            skips: vec![],
        };
        let input = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 4.0, 5.0, -6.0]).unwrap();
        let out = mlp.infer(&params, &input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn taped_forward_matches_plain_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (params, mlp) = tiny_mlp(&mut rng);
        let input = Tensor::randn(vec![5, 3], 0.0, 1.0, &mut rng);
        let plain = mlp.infer(&params, &input).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&input).unwrap();
        let y = mlp.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(y), plain.data());
    }

    #[test]
    fn forward_twice_identical_tapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (params, mlp) = tiny_mlp(&mut rng);
        let input = Tensor::randn(vec![4, 3], 0.0, 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(&input).unwrap();
            let y = mlp.forward(&mut tape, &params, x).unwrap();
            (tape.len(), tape.value(y).to_vec())
        };
        let (n1, v1) = run();
        let (n2, v2) = run();
        assert_eq!(n1, n2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (params, mlp) = tiny_mlp(&mut rng);
        let input = Tensor::zeros(vec![2, 4]);
        let err = mlp.infer(&params, &input).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn constant_net_has_zero_upstream_grads() {
        // All weights after the first layer zero: output is constant in the
        // input and in the first layer's weights.
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = params.insert("w0", Tensor::randn(vec![8, 3], 0.0, 1.0, &mut rng));
        let b0 = params.insert("b0", Tensor::zeros(vec![1, 8]));
        let w1 = params.insert("w1", Tensor::zeros(vec![1, 8]));
        let b1 = params.insert("b1", Tensor::scalar(0.3));
        let mlp = MlpParams {
            layers: vec![
                Layer {
                    weight: w0,
                    bias: b0,
                    activation: Activation::Relu,
                },
                Layer {
                    weight: w1,
                    bias: b1,
                    activation: Activation::None,
                },
            ],
            skips: vec![],
        };
        let mut tape = Tape::new();
        let x = tape
            .constant(&Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap())
            .unwrap();
        let y = mlp.forward(&mut tape, &params, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward_scalar(loss).unwrap();
        let pg = tape.param_grads(&grads, &params);
        let g_w0 = pg[w0.index()].as_ref().unwrap();
        assert!(g_w0.data().iter().all(|&v| v == 0.0));
        let g_b1 = pg[b1.index()].as_ref().unwrap();
        assert_eq!(g_b1.data(), &[1.0]);
    }

    #[test]
    fn jvp_plain_and_taped_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::new();
        let mlp = MlpParams::new(
            &mut params,
            "net",
            &[4, 12, 12, 3],
            Activation::Softplus { beta: 10.0 },
            Activation::None,
            &[2],
            &mut rng,
        )
        .unwrap();
        let input = Tensor::randn(vec![6, 4], 0.0, 0.7, &mut rng);
        let tangent = Tensor::randn(vec![6, 4], 0.0, 1.0, &mut rng);
        let (_, jvp_plain) = mlp
            .infer_with_input_jvp(&params, &input, std::slice::from_ref(&tangent))
            .unwrap();

        let mut tape = Tape::new();
        let x = tape.constant(&input).unwrap();
        let t0 = tape.constant(&tangent).unwrap();
        let trace = mlp.forward_traced(&mut tape, &params, x).unwrap();
        let jvp_taped = mlp
            .forward_input_jvp(&mut tape, &params, &trace, &[t0])
            .unwrap();
        for (a, b) in tape.value(jvp_taped[0]).iter().zip(jvp_plain[0].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
