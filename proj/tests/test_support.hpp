#pragma once

#include <cmath>
#include <span>
#include <vector>

// Shared statistics helpers for the test suites.
namespace test_support {

// Regularized incomplete gamma Q(a, x) = 1 - P(a, x), series expansion for
// x < a + 1 and a Lentz continued fraction otherwise.
inline double gammq(double a, double x) {
    if (x < 0 || a <= 0) return 1.0;
    if (x == 0) return 1.0;
    const double lg = std::lgamma(a);
    if (x < a + 1.0) {
        // P(a,x) by series, return 1-P
        double ap = a;
        double sum = 1.0 / a;
        double del = sum;
        for (int n = 0; n < 500; ++n) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
        }
        const double p = sum * std::exp(-x + a * std::log(x) - lg);
        return 1.0 - p;
    }
    // Q(a,x) by continued fraction
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - lg) * h;
}

// p-value of a chi-square statistic with `dof` degrees of freedom.
inline double chi_square_p(double stat, int dof) {
    return gammq(dof / 2.0, stat / 2.0);
}

// Pearson statistic for observed counts against expected probabilities.
inline double chi_square_stat(std::span<const uint64_t> observed,
                              std::span<const double> probs, uint64_t total) {
    double stat = 0;
    for (size_t i = 0; i < observed.size(); ++i) {
        const double expected = probs[i] * static_cast<double>(total);
        if (expected <= 0) continue;
        const double d = static_cast<double>(observed[i]) - expected;
        stat += d * d / expected;
    }
    return stat;
}

}  // namespace test_support
