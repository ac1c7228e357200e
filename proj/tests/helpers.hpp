#pragma once

// Shared test utilities: finite-difference gradient oracle and random
// tensor builders.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cas/tensor.hpp"

namespace cas_test {

inline cas::tensor<double> random_tensor(cas::shape_t shape, cas::rng& r, double scale = 1.0, bool grad = true) {
    std::vector<double> data(cas::numel(shape));
    for (auto& v : data) v = r.normal(0.0, scale);
    auto t = cas::tensor<double>::from_data(std::move(shape), std::move(data));
    t.set_requires_grad(grad);
    return t;
}

inline double rel_err(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

struct grad_check_report {
    double max_rel_err = 0.0;  // strict |a-n|/max(|a|,|n|), informational
    double max_excess = 0.0;   // |a-n| / (atol + rtol*max(|a|,|n|)); ok when <= 1
    long checked = 0;
    std::string worst;

    bool ok() const { return max_excess <= 1.0; }
};

// Central finite differences against backward() for every coordinate of the
// given leaf tensors. forward() must rebuild the graph from current values
// and return the scalar loss. A coordinate passes when
//   |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|);
// atol sits just above the finite-difference noise floor so coordinates with
// |analytic| near the 1e-8 comparability threshold are not judged on noise.
inline grad_check_report check_gradients(const std::function<cas::tensor<double>()>& forward,
                                         std::vector<std::pair<std::string, cas::tensor<double>>> leaves,
                                         double rtol = 1e-6, double atol = 1e-9, double h = 1e-5,
                                         double floor = 1e-8) {
    for (auto& [name, t] : leaves) t.zero_grad();
    cas::tensor<double> loss = forward();
    cas::backward(loss);

    std::vector<std::vector<double>> analytic;
    for (auto& [name, t] : leaves) analytic.push_back(t.grad());

    grad_check_report rep;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& t = leaves[li].second;
        for (size_t i = 0; i < t.size(); ++i) {
            const double saved = t.value()[i];
            t.value()[i] = saved + h;
            double fp, fm;
            {
                cas::no_grad_guard ng;
                fp = forward().item();
                t.value()[i] = saved - h;
                fm = forward().item();
            }
            t.value()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[li][i];
            if (std::abs(a) <= floor && std::abs(numeric) <= floor) continue;
            rep.checked += 1;
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(a, numeric));
            const double excess = std::abs(a - numeric) / (atol + rtol * std::max(std::abs(a), std::abs(numeric)));
            if (excess > rep.max_excess) {
                rep.max_excess = excess;
                rep.worst = leaves[li].first + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                            " numeric=" + std::to_string(numeric);
            }
        }
    }
    return rep;
}

}  // namespace cas_test
