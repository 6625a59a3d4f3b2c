#pragma once

// Forward noising chain, reverse-step updates, and DDIM plans. Schedule
// tables are always double; the per-element step maps are templated so the
// same code runs the float production path and the double test oracles.
//
// Conventions: steps are 1-indexed, t in 1..T; alpha_bar(0) is defined as 1.

#include <span>
#include <vector>

#include "tssc/core.hpp"

namespace tssc {

enum class SigmaRule { posterior, beta };

struct NoiseSchedule {
    i64 T = 0;
    SigmaRule rule = SigmaRule::posterior;
    std::vector<double> betas;       // betas[t-1]
    std::vector<double> alphas;      // 1 - beta
    std::vector<double> alpha_bars;  // running product of alphas
    std::vector<double> sigmas;      // reverse-step stddev

    void check_t(i64 t) const {
        require(t >= 1 && t <= T, "diffusion step t=" + std::to_string(t) +
                                      " outside 1.." + std::to_string(T));
    }
    double beta(i64 t) const { check_t(t); return betas[static_cast<size_t>(t - 1)]; }
    double alpha(i64 t) const { check_t(t); return alphas[static_cast<size_t>(t - 1)]; }
    double alpha_bar(i64 t) const {
        if (t == 0) return 1.0;
        check_t(t);
        return alpha_bars[static_cast<size_t>(t - 1)];
    }
    double sigma(i64 t) const { check_t(t); return sigmas[static_cast<size_t>(t - 1)]; }
};

inline NoiseSchedule linear_schedule(i64 T, double beta_start, double beta_end,
                                     SigmaRule rule = SigmaRule::posterior) {
    require(T >= 1, "schedule needs T >= 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule ns;
    ns.T = T;
    ns.rule = rule;
    ns.betas.resize(static_cast<size_t>(T));
    for (i64 t = 1; t <= T; ++t) {
        // endpoints assigned directly so beta_1/beta_T are exact, not
        // start + (T-1)/(T-1)*(end-start) which rounds
        double b;
        if (t == 1) b = beta_start;
        else if (t == T) b = beta_end;
        else b = beta_start + static_cast<double>(t - 1) / static_cast<double>(T - 1) *
                                  (beta_end - beta_start);
        ns.betas[static_cast<size_t>(t - 1)] = b;
    }
    ns.alphas.resize(static_cast<size_t>(T));
    ns.alpha_bars.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (i64 t = 1; t <= T; ++t) {
        const double a = 1.0 - ns.betas[static_cast<size_t>(t - 1)];
        ns.alphas[static_cast<size_t>(t - 1)] = a;
        prod *= a;
        ns.alpha_bars[static_cast<size_t>(t - 1)] = prod;
    }
    ns.sigmas.resize(static_cast<size_t>(T));
    for (i64 t = 1; t <= T; ++t) {
        const double bt = ns.betas[static_cast<size_t>(t - 1)];
        double var;
        if (rule == SigmaRule::posterior) {
            var = (1.0 - ns.alpha_bar(t - 1)) / (1.0 - ns.alpha_bar(t)) * bt;
        } else {
            var = bt;
        }
        ns.sigmas[static_cast<size_t>(t - 1)] = std::sqrt(var);
    }
    return ns;
}

namespace detail {

inline void check_same_size(size_t a, size_t b, const char* what) {
    require(a == b, std::string(what) + ": size mismatch");
}

}  // namespace detail

// x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) n, one Markov step.
template <typename Real>
void q_step(const NoiseSchedule& ns, i64 t, std::span<const Real> x_prev,
            std::span<const Real> noise, std::span<Real> out) {
    ns.check_t(t);
    detail::check_same_size(x_prev.size(), noise.size(), "q_step");
    detail::check_same_size(x_prev.size(), out.size(), "q_step");
    const Real cs = static_cast<Real>(std::sqrt(1.0 - ns.beta(t)));
    const Real cn = static_cast<Real>(std::sqrt(ns.beta(t)));
    for (size_t i = 0; i < out.size(); ++i) out[i] = cs * x_prev[i] + cn * noise[i];
}

// Closed form of the chain: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) n.
template <typename Real>
void q_sample(const NoiseSchedule& ns, i64 t, std::span<const Real> x0,
              std::span<const Real> noise, std::span<Real> out) {
    ns.check_t(t);
    detail::check_same_size(x0.size(), noise.size(), "q_sample");
    detail::check_same_size(x0.size(), out.size(), "q_sample");
    const double ab = ns.alpha_bar(t);
    const Real cs = static_cast<Real>(std::sqrt(ab));
    const Real cn = static_cast<Real>(std::sqrt(1.0 - ab));
    for (size_t i = 0; i < out.size(); ++i) out[i] = cs * x0[i] + cn * noise[i];
}

// Inversion of the closed form: x0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
template <typename Real>
void predict_x0_from_eps(const NoiseSchedule& ns, i64 t, std::span<const Real> x_t,
                         std::span<const Real> eps, std::span<Real> out) {
    ns.check_t(t);
    detail::check_same_size(x_t.size(), eps.size(), "predict_x0_from_eps");
    detail::check_same_size(x_t.size(), out.size(), "predict_x0_from_eps");
    const double ab = ns.alpha_bar(t);
    const Real cn = static_cast<Real>(std::sqrt(1.0 - ab));
    const Real inv = static_cast<Real>(1.0 / std::sqrt(ab));
    for (size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - cn * eps[i]) * inv;
}

// Ancestral reverse step: posterior mean from eps_hat plus sigma_t noise.
// The final step (t = 1) adds no noise regardless of the sigma rule.
template <typename Real>
void ddpm_reverse_step(const NoiseSchedule& ns, i64 t, std::span<const Real> x_t,
                       std::span<const Real> eps_hat, std::span<const Real> noise,
                       std::span<Real> out) {
    ns.check_t(t);
    detail::check_same_size(x_t.size(), eps_hat.size(), "ddpm_reverse_step");
    detail::check_same_size(x_t.size(), noise.size(), "ddpm_reverse_step");
    detail::check_same_size(x_t.size(), out.size(), "ddpm_reverse_step");
    const double bt = ns.beta(t);
    const Real inv_sa = static_cast<Real>(1.0 / std::sqrt(ns.alpha(t)));
    const Real ceps = static_cast<Real>(bt / std::sqrt(1.0 - ns.alpha_bar(t)));
    const Real sg = t == 1 ? Real(0) : static_cast<Real>(ns.sigma(t));
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = inv_sa * (x_t[i] - ceps * eps_hat[i]) + sg * noise[i];
}

// DDIM update from t to t_prev (t_prev = 0 jumps straight to x0-hat).
// eta = 0 is the deterministic map; eta = 1 recovers ancestral DDPM
// statistics for consecutive steps.
template <typename Real>
void ddim_step(const NoiseSchedule& ns, i64 t, i64 t_prev, std::span<const Real> x_t,
               std::span<const Real> eps_hat, double eta, std::span<const Real> noise,
               std::span<Real> out) {
    ns.check_t(t);
    require(t_prev >= 0 && t_prev < t, "ddim_step needs 0 <= t_prev < t");
    require(eta >= 0.0 && eta <= 1.0, "ddim_step needs eta in [0, 1]");
    detail::check_same_size(x_t.size(), eps_hat.size(), "ddim_step");
    detail::check_same_size(x_t.size(), noise.size(), "ddim_step");
    detail::check_same_size(x_t.size(), out.size(), "ddim_step");
    const double ab_t = ns.alpha_bar(t);
    const double ab_p = ns.alpha_bar(t_prev);
    const double sigma =
        eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    const double dir_var = std::max(0.0, 1.0 - ab_p - sigma * sigma);
    const Real c_eps_in = static_cast<Real>(std::sqrt(1.0 - ab_t));
    const Real inv_sa = static_cast<Real>(1.0 / std::sqrt(ab_t));
    const Real c_x0 = static_cast<Real>(std::sqrt(ab_p));
    const Real c_dir = static_cast<Real>(std::sqrt(dir_var));
    const Real c_sg = static_cast<Real>(sigma);
    for (size_t i = 0; i < out.size(); ++i) {
        const Real x0 = (x_t[i] - c_eps_in * eps_hat[i]) * inv_sa;
        out[i] = c_x0 * x0 + c_dir * eps_hat[i] + c_sg * noise[i];
    }
}

struct DdimPlan {
    std::vector<i64> taus;  // strictly increasing, last == T
    double eta = 0.0;
};

inline DdimPlan make_ddim_plan(const NoiseSchedule& ns, i64 steps, double eta = 0.0) {
    require(steps >= 1 && steps <= ns.T, "ddim plan needs 1 <= steps <= T");
    require(eta >= 0.0 && eta <= 1.0, "ddim plan needs eta in [0, 1]");
    DdimPlan plan;
    plan.eta = eta;
    plan.taus.resize(static_cast<size_t>(steps));
    for (i64 i = 1; i <= steps; ++i)
        plan.taus[static_cast<size_t>(i - 1)] = static_cast<i64>(
            std::llround(static_cast<double>(i) * static_cast<double>(ns.T) /
                         static_cast<double>(steps)));
    for (size_t i = 0; i < plan.taus.size(); ++i) {
        require(plan.taus[i] >= 1 && plan.taus[i] <= ns.T, "ddim plan tau out of range");
        if (i > 0) require(plan.taus[i] > plan.taus[i - 1], "ddim plan taus must increase");
    }
    require(plan.taus.back() == ns.T, "ddim plan must end at T");
    return plan;
}

}  // namespace tssc
