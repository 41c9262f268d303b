//! Finite-difference gradient oracle. Perturbs every parameter of a model in
//! turn and differentiates the batch objective numerically with central
//! differences; used by the test suites to check the analytic backward pass.
//! The numeric route only ever evaluates the loss value, never the gradient
//! code it is checking.

use crate::error::Result;
use crate::labeling::CenterBank;
use crate::model::{ModelParams, ParamGrads};
use crate::trainer::{batch_loss, BatchMember};

#[derive(Clone, Copy)]
enum Tensor {
    HiddenWeight(usize),
    HiddenBias(usize),
    ClassifierWeight,
    ClassifierBias,
}

fn tensor_len(params: &ModelParams, t: Tensor) -> usize {
    match t {
        Tensor::HiddenWeight(i) => params.hidden[i].weight.len(),
        Tensor::HiddenBias(i) => params.hidden[i].bias.len(),
        Tensor::ClassifierWeight => params.classifier.weight.len(),
        Tensor::ClassifierBias => params.classifier.bias.len(),
    }
}

fn tensor_mut(params: &mut ModelParams, t: Tensor) -> &mut [f64] {
    match t {
        Tensor::HiddenWeight(i) => &mut params.hidden[i].weight,
        Tensor::HiddenBias(i) => &mut params.hidden[i].bias,
        Tensor::ClassifierWeight => &mut params.classifier.weight,
        Tensor::ClassifierBias => &mut params.classifier.bias,
    }
}

fn grad_tensor_mut(grads: &mut ParamGrads, t: Tensor) -> &mut [f64] {
    match t {
        Tensor::HiddenWeight(i) => &mut grads.hidden[i].weight,
        Tensor::HiddenBias(i) => &mut grads.hidden[i].bias,
        Tensor::ClassifierWeight => &mut grads.classifier.weight,
        Tensor::ClassifierBias => &mut grads.classifier.bias,
    }
}

fn tensors(params: &ModelParams) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(2 * params.hidden.len() + 2);
    for i in 0..params.hidden.len() {
        out.push(Tensor::HiddenWeight(i));
        out.push(Tensor::HiddenBias(i));
    }
    out.push(Tensor::ClassifierWeight);
    out.push(Tensor::ClassifierBias);
    out
}

/// Central-difference gradient of the total batch objective with respect to
/// every parameter, at fixed targets and centers.
pub fn finite_difference_gradients(
    params: &ModelParams,
    members: &[BatchMember],
    bank: &CenterBank,
    lambda: f64,
    epsilon: f64,
) -> Result<ParamGrads> {
    let mut numeric = ParamGrads::zeros_like(params);
    for t in tensors(params) {
        for j in 0..tensor_len(params, t) {
            let mut plus = params.clone();
            tensor_mut(&mut plus, t)[j] += epsilon;
            let mut minus = params.clone();
            tensor_mut(&mut minus, t)[j] -= epsilon;
            let lp = batch_loss(&plus, members, bank, lambda)?.total;
            let lm = batch_loss(&minus, members, bank, lambda)?.total;
            grad_tensor_mut(&mut numeric, t)[j] = (lp - lm) / (2.0 * epsilon);
        }
    }
    Ok(numeric)
}

/// Relative error `|a - n| / max(|a| + |n|, floor)`, reduced to the worst
/// parameter in the model.
pub fn max_relative_error(analytic: &ParamGrads, numeric: &ParamGrads) -> f64 {
    fn pair_max(a: &[f64], n: &[f64]) -> f64 {
        a.iter()
            .zip(n)
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }
    let mut worst: f64 = 0.0;
    for (ga, gn) in analytic.hidden.iter().zip(&numeric.hidden) {
        worst = worst.max(pair_max(&ga.weight, &gn.weight));
        worst = worst.max(pair_max(&ga.bias, &gn.bias));
    }
    worst = worst.max(pair_max(
        &analytic.classifier.weight,
        &numeric.classifier.weight,
    ));
    worst.max(pair_max(
        &analytic.classifier.bias,
        &numeric.classifier.bias,
    ))
}
