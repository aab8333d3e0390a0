#pragma once

// Central-difference gradient verification for scalar-valued tensor
// functions. The function under test is re-run on a fresh tape per
// perturbation, so it must be deterministic.

#include <functional>
#include <vector>

#include "car/tensor.hpp"

namespace car {

struct GradCheckOptions {
    double step = 1e-5;
    // Elements to perturb per input; empty means all of them.
    std::vector<std::vector<int64_t>> element_subsets;
};

// Returns the max relative error between analytic and numeric gradients over
// the checked elements. Relative error uses max(|a|,|b|,1e-8) as denominator.
inline double grad_check(const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& fn,
                         std::vector<Tensor> inputs, const GradCheckOptions& opt = {}) {
    for (auto& in : inputs) in.set_requires_grad(true);

    Tape tape;
    Tensor loss = fn(tape, inputs);
    if (loss.numel() != 1) throw ShapeError("grad_check requires a scalar-valued function");
    if (!std::isfinite(loss.value())) throw NumericError("grad_check: non-finite loss value");
    for (auto& in : inputs) in.zero_grad();
    tape.backward(loss);

    const double h = opt.step;
    double max_rel = 0.0;
    for (size_t k = 0; k < inputs.size(); ++k) {
        Tensor& in = inputs[k];
        std::vector<int64_t> elements;
        if (k < opt.element_subsets.size() && !opt.element_subsets[k].empty()) {
            elements = opt.element_subsets[k];
        } else {
            elements.resize(in.numel());
            for (int64_t i = 0; i < in.numel(); ++i) elements[i] = i;
        }
        for (int64_t idx : elements) {
            double saved = (*in.data)[idx];

            (*in.data)[idx] = saved + h;
            Tape tp;
            double fp = fn(tp, inputs).value();

            (*in.data)[idx] = saved - h;
            Tape tm;
            double fm = fn(tm, inputs).value();

            (*in.data)[idx] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite perturbed value");

            double numeric = (fp - fm) / (2.0 * h);
            double analytic = (*in.grad)[idx];
            double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
            max_rel = std::max(max_rel, std::abs(numeric - analytic) / denom);
        }
    }
    return max_rel;
}

}  // namespace car
