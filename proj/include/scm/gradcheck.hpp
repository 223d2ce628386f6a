#pragma once
// Central finite-difference verification of tape gradients.

#include <functional>
#include <optional>

#include "scm/tensor.hpp"

namespace scm {

struct OracleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Upper bound on checked elements per tensor; 0 checks every element.
  // Elements are taken at an even stride so the choice is deterministic.
  std::int64_t max_elements = 0;
  // Replay the branches of leaky_relu/abs taken at x during every perturbed
  // evaluation, so probes that cross a kink still see the smooth piece at x.
  bool freeze_branches = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  std::string worst;  // "tensor#index" of the worst element
};

inline double relative_error(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// f is evaluated with the tape active once (for analytic grads) and then
// repeatedly without recording. `wrt` tensors are perturbed in place and
// restored afterwards.
inline GradCheckResult check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                                       const GradCheckOptions& opt = {}) {
  BranchTrace trace;
  auto eval = [&](BranchTrace::Mode mode) {
    Tape::NoGrad ng;
    std::optional<BranchTrace::Use> use;
    if (opt.freeze_branches) use.emplace(trace, mode);
    Tensor y = f();
    if (y.numel() != 1) throw UsageError("check_gradients needs a scalar-valued function");
    if (opt.freeze_branches && mode == BranchTrace::Mode::kReplay && !trace.replay_complete())
      throw OracleError("function under gradient check changed its branch structure");
    return y.item();
  };
  const double y0 = eval(BranchTrace::Mode::kRecord);
  if (eval(BranchTrace::Mode::kReplay) != y0) throw OracleError("function under gradient check is not deterministic");
  auto perturbed = [&] { return eval(BranchTrace::Mode::kReplay); };

  std::vector<bool> had(wrt.size());
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    had[t] = wrt[t].requires_grad();
    wrt[t].set_requires_grad(true);
  }
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = f();
    tape.backward(y);
  }

  GradCheckResult res;
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    Tensor& x = wrt[t];
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    const std::int64_t n = x.numel();
    std::int64_t step = 1;
    if (opt.max_elements > 0 && n > opt.max_elements) step = (n + opt.max_elements - 1) / opt.max_elements;
    for (std::int64_t i = 0; i < n; i += step) {
      double& xi = x.mutable_data()[static_cast<std::size_t>(i)];
      const double orig = xi;
      xi = orig + opt.eps;
      const double fp = perturbed();
      xi = orig - opt.eps;
      const double fm = perturbed();
      xi = orig;
      const double numeric = (fp - fm) / (2 * opt.eps);
      const double err = relative_error(analytic[static_cast<std::size_t>(i)], numeric);
      ++res.checked;
      if (err > res.max_rel_error || res.worst.empty()) {
        if (err >= res.max_rel_error) res.worst = std::to_string(t) + "#" + std::to_string(i);
        res.max_rel_error = std::max(res.max_rel_error, err);
      }
    }
    x.set_requires_grad(had[t]);
  }
  return res;
}

// Single-input form: max relative error of d f(x)/dx.
inline double check_gradients(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5) {
  GradCheckOptions opt;
  opt.eps = eps;
  return check_gradients([&f, &x]() { return f(x); }, {x}, opt).max_rel_error;
}

}  // namespace scm
