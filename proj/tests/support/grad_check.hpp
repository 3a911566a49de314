#pragma once

// Finite-difference gradient checking used by the unit and acceptance suites.
// The analytic gradient from one backward pass is compared against central
// differences computed from scratch-built tapes, coordinate by coordinate.

#include <functional>
#include <vector>

#include "ace/tensor.hpp"

namespace ace::testing {

// Builds a scalar root from bound input leaves. Called once per evaluation,
// always on a fresh tape.
using ScalarGraph = std::function<Ref(Tape&, const std::vector<Ref>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t input_index = 0;
    std::size_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

inline double eval_scalar(const ScalarGraph& f, const std::vector<Tensor>& inputs) {
    Tape tape;
    std::vector<Ref> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
    Ref root = f(tape, leaves);
    return root->value[0];
}

// Coordinates where both gradients are below abs_floor are skipped: central
// differences carry no information there beyond "tiny", which already agrees.
inline GradCheckResult grad_check(const ScalarGraph& f, std::vector<Tensor> inputs,
                                  double eps = 1e-5, double abs_floor = 0.0) {
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Ref> leaves;
        leaves.reserve(inputs.size());
        for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
        Ref root = f(tape, leaves);
        tape.backward(root);
        for (Ref l : leaves) analytic.push_back(grad_of(l));
    }

    GradCheckResult res;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t c = 0; c < inputs[k].size(); ++c) {
            const double keep = inputs[k][c];
            inputs[k][c] = keep + eps;
            const double fp = eval_scalar(f, inputs);
            inputs[k][c] = keep - eps;
            const double fm = eval_scalar(f, inputs);
            inputs[k][c] = keep;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[k][c];
            if (std::abs(numeric) + std::abs(a) <= abs_floor) continue;
            const double rel =
                std::abs(numeric - a) / std::max(1e-6, std::abs(numeric) + std::abs(a));
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.input_index = k;
                res.coord = c;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace ace::testing
