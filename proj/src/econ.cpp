#include "retroflow/econ.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace retroflow {

double route_prob(double alpha, double beta, int m, int n) {
    if (alpha < 0.0 || alpha > 1.0 || beta < 0.0 || beta > 1.0)
        throw std::invalid_argument("rates must lie in [0,1]");
    if (m < 0 || n < 1) throw std::invalid_argument("need m >= 0 and n >= 1");
    double p1 = std::pow(1.0 - beta, n);
    double hit = std::pow(1.0 - alpha, n);        // one trial finds a true route
    double p2 = std::pow(1.0 - hit, m);           // all m trials miss
    return p1 * (1.0 - p2);
}

IncomeResult expected_income(const EconConfig& config) {
    if (config.profit <= 0.0 || config.cost <= 0.0 || config.m_max <= 0)
        throw std::invalid_argument("profit, cost and m_max must be positive");
    IncomeResult best;  // m = 0 yields income 0
    for (int m = 1; m <= config.m_max; ++m) {
        double income = config.profit * route_prob(config.alpha, config.beta, m,
                                                   config.route_length) -
                        config.cost * m;
        if (income > best.income) {
            best.income = income;
            best.best_m = m;
        }
    }
    return best;
}

std::vector<ScenarioResult> scenario_table() {
    struct Model {
        const char* label;
        double alpha, beta;
    };
    const Model models[] = {{"RT", 0.10, 0.025}, {"ACC", 0.0, 0.05}};
    const double ratios[] = {10.0, 100.0, 1000.0};
    std::vector<ScenarioResult> rows;
    for (double ratio : ratios) {
        for (const Model& m : models) {
            EconConfig cfg;
            cfg.alpha = m.alpha;
            cfg.beta = m.beta;
            cfg.cost = 200.0;
            cfg.profit = ratio * cfg.cost;
            IncomeResult r = expected_income(cfg);
            rows.push_back({ratio, m.label, r.best_m, r.income});
        }
    }
    return rows;
}

std::string format_scenario_table(const std::vector<ScenarioResult>& rows) {
    std::string out = "P/C     model  best_m  income\n";
    char buf[96];
    for (const ScenarioResult& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-7.0f %-6s %-7d %.1e\n", r.ratio,
                      r.model.c_str(), r.best_m, r.income);
        out += buf;
    }
    return out;
}

std::string income_grid_csv(int route_length, double rate_step, double rate_max) {
    std::string out = "alpha,beta,income_ratio10,income_ratio100,income_ratio1000\n";
    char buf[160];
    for (double alpha = 0.0; alpha <= rate_max + 1e-12; alpha += rate_step) {
        for (double beta = 0.0; beta <= rate_max + 1e-12; beta += rate_step) {
            double incomes[3];
            const double ratios[] = {10.0, 100.0, 1000.0};
            for (int i = 0; i < 3; ++i) {
                EconConfig cfg;
                cfg.route_length = route_length;
                cfg.alpha = alpha;
                cfg.beta = beta;
                cfg.cost = 200.0;
                cfg.profit = ratios[i] * cfg.cost;
                incomes[i] = expected_income(cfg).income;
            }
            std::snprintf(buf, sizeof(buf), "%.3f,%.3f,%.6g,%.6g,%.6g\n", alpha, beta,
                          incomes[0], incomes[1], incomes[2]);
            out += buf;
        }
    }
    return out;
}

}  // namespace retroflow
