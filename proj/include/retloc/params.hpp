#pragma once

#include <map>
#include <string>
#include <vector>

#include "retloc/gradcheck.hpp"
#include "retloc/random.hpp"
#include "retloc/tensor.hpp"

namespace retloc {

/// Ordered name → parameter map. std::map keeps iteration deterministic for
/// optimizers, checkpoints and gradient checks.
using ParamMap = std::map<std::string, Tensor>;

inline std::vector<NamedTensor> as_named(const ParamMap& params) {
    std::vector<NamedTensor> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back({name, t});
    return out;
}

inline void zero_grads(ParamMap& params) {
    for (auto& [name, t] : params) t.zero_grad();
}

namespace init {

/// Xavier/Glorot uniform for a (fan_in × fan_out) weight applied as x·W.
inline Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> w(fan_in * fan_out);
    for (double& e : w) e = rng.uniform(-a, a);
    return Tensor::param({fan_in, fan_out}, std::move(w));
}

inline Tensor zeros(Shape shape) {
    return Tensor::param(std::move(shape), {});
}

inline Tensor ones(Shape shape) {
    auto n = detail::shape_numel(shape);
    return Tensor::param(std::move(shape), std::vector<double>(n, 1.0));
}

inline Tensor normal(Rng& rng, Shape shape, double stddev) {
    auto n = detail::shape_numel(shape);
    std::vector<double> w(n);
    for (double& e : w) e = rng.normal(0.0, stddev);
    return Tensor::param(std::move(shape), std::move(w));
}

}  // namespace init
}  // namespace retloc
