#pragma once

#include <string>
#include <vector>

namespace retroflow {

// Drug-design pipeline economics: a candidate needs an n-step route; the
// single-step model has false-positive rate alpha and false-negative rate
// beta; each synthesis trial costs C and a synthesizable candidate pays P.
struct EconConfig {
    int route_length = 5;
    double alpha = 0.0;
    double beta = 0.0;
    double profit = 0.0;
    double cost = 200.0;
    int m_max = 1000;
};

struct ScenarioResult {
    double ratio;        // profit-to-cost ratio P/C
    std::string model;   // "RT" or "ACC"
    int best_m;
    double income;
};

// Probability that the ground-truth route survives m synthesis trials:
// p1 = (1-beta)^n is the chance the true route is retrievable at all,
// and each trial independently dodges the false-positive trap with
// probability (1-alpha)^n, so p = p1 * (1 - (1 - (1-alpha)^n)^m).
double route_prob(double alpha, double beta, int m, int n);

// Maximizes P * route_prob(m) - C * m over m in [0, m_max].
// Ties break toward the smaller (cheaper) m; m = 0 floors income at 0.
struct IncomeResult {
    double income = 0.0;
    int best_m = 0;
};
IncomeResult expected_income(const EconConfig& config);

// The six-cell comparison: RT-optimal (alpha=0.10, beta=0.025) versus
// ACC-optimal (alpha=0, beta=0.05) at P/C in {10, 100, 1000} with C=200.
std::vector<ScenarioResult> scenario_table();

// Fixed-width text rendering of scenario_table(); ends with a newline.
std::string format_scenario_table(const std::vector<ScenarioResult>& rows);

// CSV grid of incomes over (alpha, beta) for external plotting:
// header alpha,beta,income_ratio10,income_ratio100,income_ratio1000.
std::string income_grid_csv(int route_length = 5, double rate_step = 0.025,
                            double rate_max = 0.2);

}  // namespace retroflow
