#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace sae {

struct SimplexResult {
    Eigen::VectorXd x;
    double value = std::numeric_limits<double>::infinity();
    int evaluations = 0;
    bool converged = false;
    std::vector<double> trace; // best value after each iteration
};

struct SimplexOptions {
    double initial_step = 0.5;
    double x_tol = 1e-5;
    double f_tol = 1e-8;
    int max_evaluations = 500;
};

/// Nelder-Mead minimization with the standard coefficients (1, 2, 0.5, 0.5).
inline SimplexResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x0,
                                 const SimplexOptions& opt = {}) {
    const Eigen::Index n = x0.size();
    SimplexResult res;
    auto eval = [&](const Eigen::VectorXd& x) {
        ++res.evaluations;
        const double v = f(x);
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    };
    if (n == 0) {
        res.x = x0;
        res.value = eval(x0);
        res.converged = true;
        return res;
    }
    std::vector<Eigen::VectorXd> pts(std::size_t(n) + 1, x0);
    std::vector<double> val(std::size_t(n) + 1);
    val[0] = eval(x0);
    for (Eigen::Index k = 0; k < n; ++k) {
        pts[std::size_t(k) + 1](k) += opt.initial_step;
        val[std::size_t(k) + 1] = eval(pts[std::size_t(k) + 1]);
    }
    std::vector<std::size_t> order(pts.size());
    while (true) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return val[a] < val[b]; });
        const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];
        res.trace.push_back(val[best]);
        double spread = 0.0;
        for (const auto& p : pts) spread = std::max(spread, (p - pts[best]).cwiseAbs().maxCoeff());
        const double fspread = val[worst] - val[best];
        if (spread < opt.x_tol && (fspread < opt.f_tol || !std::isfinite(fspread))) {
            res.converged = true;
            break;
        }
        if (res.evaluations >= opt.max_evaluations) break;

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (std::size_t k = 0; k < pts.size(); ++k)
            if (k != worst) centroid += pts[k];
        centroid /= double(n);
        const Eigen::VectorXd xr = centroid + (centroid - pts[worst]);
        const double fr = eval(xr);
        if (fr < val[best]) {
            const Eigen::VectorXd xe = centroid + 2.0 * (centroid - pts[worst]);
            const double fe = eval(xe);
            if (fe < fr) pts[worst] = xe, val[worst] = fe;
            else pts[worst] = xr, val[worst] = fr;
            continue;
        }
        if (fr < val[second]) {
            pts[worst] = xr, val[worst] = fr;
            continue;
        }
        const bool outside = fr < val[worst];
        const Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                           : Eigen::VectorXd(centroid + 0.5 * (pts[worst] - centroid));
        const double fc = eval(xc);
        if (fc < (outside ? fr : val[worst])) {
            pts[worst] = xc, val[worst] = fc;
            continue;
        }
        for (std::size_t k = 0; k < pts.size(); ++k) {
            if (k == best) continue;
            pts[k] = pts[best] + 0.5 * (pts[k] - pts[best]);
            val[k] = eval(pts[k]);
        }
    }
    const auto it = std::min_element(val.begin(), val.end());
    res.x = pts[std::size_t(it - val.begin())];
    res.value = *it;
    return res;
}

} // namespace sae
