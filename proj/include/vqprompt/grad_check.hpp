#pragma once

#include <functional>
#include <vector>

#include "vqprompt/tensor.hpp"

namespace vqp {

// Compares reverse-mode gradients of a scalar function against central
// differences over every coordinate of `inputs` (leaf tensors the function
// closes over). Returns max |analytic - numeric| / max(1, |numeric|).
//
// Paths blocked by stop_gradient or straight_through are held at the values
// they took at the unperturbed point, so the numeric side differentiates the
// same sg-respecting function that backward() does.
double grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs,
                  double epsilon = 1e-5);

}  // namespace vqp
