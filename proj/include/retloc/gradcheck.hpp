#pragma once

// Central finite-difference gradient checking. The numeric side never touches
// the tape, so it stays an independent oracle for the backward rules.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "retloc/tensor.hpp"

namespace retloc {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Compares the taped gradient of `f` against central finite differences for
/// every coordinate of every parameter. `f` must be a pure function of the
/// parameter values (re-invoking it replays the same computation).
///
/// Relative error uses max(|analytic|, |numeric|, denom_floor) as denominator;
/// the floor keeps fd roundoff noise from dominating near-zero gradients.
inline GradCheckResult grad_check(const std::function<Tensor()>& f,
                                  const std::vector<NamedTensor>& params,
                                  double fd_eps = 1e-5,
                                  double denom_floor = 1e-3) {
    for (const auto& p : params) {
        if (!p.tensor.requires_grad())
            throw UsageError("grad_check: parameter " + p.name +
                             " does not track gradients");
        const_cast<Tensor&>(p.tensor).zero_grad();
    }

    std::vector<std::vector<double>> analytic(params.size());
    {
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        analytic[pi] = params[pi].tensor.grad();

    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& values = const_cast<Tensor&>(params[pi].tensor).data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + fd_eps;
            const double up = f().value();
            values[i] = saved - fd_eps;
            const double down = f().value();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * fd_eps);
            const double a = analytic[pi][i];
            const double denom =
                std::max({std::fabs(a), std::fabs(numeric), denom_floor});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = params[pi].name;
                result.worst_index = i;
                result.analytic = a;
                result.numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace retloc
