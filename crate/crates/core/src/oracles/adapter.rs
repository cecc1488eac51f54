//! Scalar-loop f64 evaluation of `ReLU(LN(H)·W_down)·W_up + H`.

use crate::adapters::AdapterLayer;
use crate::tensor::Tensor;

pub fn adapter_forward(layer: &AdapterLayer, hidden: &Tensor, eps: f64) -> Vec<f64> {
    let d = layer.hidden_dim();
    let h = layer.bottleneck();
    let wd = layer.w_down.data();
    let wu = layer.w_up.data();
    let mut out = Vec::with_capacity(hidden.numel());
    for row in hidden.data().chunks(d) {
        let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let mut normed = vec![0.0; d];
        for i in 0..d {
            normed[i] = (x[i] - mean) / (var + eps).sqrt() * layer.ln_gamma.data()[i] as f64
                + layer.ln_beta.data()[i] as f64;
        }
        let mut act = vec![0.0; h];
        for j in 0..h {
            let mut s = 0.0;
            for i in 0..d {
                s += normed[i] * wd[i * h + j] as f64;
            }
            act[j] = if s > 0.0 { s } else { 0.0 };
        }
        for i in 0..d {
            let mut s = x[i];
            for j in 0..h {
                s += act[j] * wu[j * d + i] as f64;
            }
            out.push(s);
        }
    }
    out
}
