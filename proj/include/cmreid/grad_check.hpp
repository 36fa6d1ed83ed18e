#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cmreid/autodiff.hpp"
#include "cmreid/tensor.hpp"

namespace cmreid {

struct ParamGradCheck {
    std::string name;
    Tensor analytic;
    Tensor numeric;
    Tensor relative_error;
    double max_relative_error = 0.0;
};

struct GradReport {
    std::vector<ParamGradCheck> params;
    double max_relative_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

/// Scalar objective over a list of parameter leaves bound on `tape`.
using TapeObjective = std::function<ad::Var(ad::Tape& tape, std::span<const ad::Var> params)>;

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    std::vector<std::string> names;
    /// Applied to the tape gradients before comparison (negative-control hook).
    std::function<void(std::vector<Tensor>& analytic)> perturb_analytic;
};

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares tape gradients of `f` against central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every element of every parameter.
inline GradReport grad_check(const TapeObjective& f, std::vector<Tensor> params, const GradCheckOptions& opt = {}) {
    if (!(opt.step > 0.0)) throw ParameterError("grad_check: step must be positive");

    auto evaluate = [&](bool with_grad, std::vector<Tensor>* grads) {
        ad::Tape tape;
        std::vector<ad::Var> vars;
        vars.reserve(params.size());
        for (const Tensor& p : params) vars.push_back(tape.variable(p));
        const ad::Var out = f(tape, vars);
        const double v = out.item();
        if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
        if (with_grad) {
            tape.backward(out);
            for (const ad::Var& x : vars) grads->push_back(tape.gradient(x));
        }
        return v;
    };

    std::vector<Tensor> analytic;
    evaluate(true, &analytic);
    if (opt.perturb_analytic) opt.perturb_analytic(analytic);

    GradReport report;
    report.tolerance = opt.tolerance;
    for (std::size_t k = 0; k < params.size(); ++k) {
        ParamGradCheck entry;
        entry.name = k < opt.names.size() ? opt.names[k] : "param" + std::to_string(k);
        entry.analytic = analytic[k];
        entry.numeric = Tensor(params[k].shape(), 0.0);
        entry.relative_error = Tensor(params[k].shape(), 0.0);
        for (std::size_t i = 0; i < params[k].size(); ++i) {
            const double saved = params[k][i];
            params[k][i] = saved + opt.step;
            const double up = evaluate(false, nullptr);
            params[k][i] = saved - opt.step;
            const double down = evaluate(false, nullptr);
            params[k][i] = saved;
            const double numeric = (up - down) / (2.0 * opt.step);
            entry.numeric[i] = numeric;
            entry.relative_error[i] = relative_error(entry.analytic[i], numeric);
            entry.max_relative_error = std::max(entry.max_relative_error, entry.relative_error[i]);
        }
        report.max_relative_error = std::max(report.max_relative_error, entry.max_relative_error);
        report.params.push_back(std::move(entry));
    }
    report.pass = report.max_relative_error <= opt.tolerance;
    return report;
}

/// Single-tensor convenience form.
inline GradReport grad_check(const std::function<ad::Var(ad::Tape&, ad::Var)>& f, const Tensor& x, double h,
                             double tol) {
    GradCheckOptions opt;
    opt.step = h;
    opt.tolerance = tol;
    opt.names = {"x"};
    return grad_check([&f](ad::Tape& t, std::span<const ad::Var> v) { return f(t, v[0]); }, {x}, opt);
}

}  // namespace cmreid
