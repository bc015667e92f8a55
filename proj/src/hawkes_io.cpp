#include "ntpp/hawkes.hpp"

#include <fmt/format.h>

#include <cmath>
#include <stdexcept>
#include <string>

namespace ntpp::hawkes {

namespace {

double number_at(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number()) {
        throw std::invalid_argument(fmt::format("{}: expected a number", path));
    }
    const double v = j.get<double>();
    if (!std::isfinite(v)) {
        throw std::invalid_argument(fmt::format("{}: must be finite", path));
    }
    return v;
}

std::vector<double> vector_at(const nlohmann::json& j, const std::string& path, std::size_t expected) {
    if (!j.is_array()) {
        throw std::invalid_argument(fmt::format("{}: expected an array", path));
    }
    if (j.size() != expected) {
        throw std::invalid_argument(fmt::format("{}: expected {} entries, got {}", path, expected, j.size()));
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        out.push_back(number_at(j[i], fmt::format("{}[{}]", path, i)));
    }
    return out;
}

Matrix matrix_at(const nlohmann::json& j, const std::string& path, std::size_t dim) {
    if (j.is_number()) {
        return Matrix(dim, std::vector<double>(dim, number_at(j, path)));
    }
    if (!j.is_array() || j.size() != dim) {
        throw std::invalid_argument(fmt::format("{}: expected a {}x{} array", path, dim, dim));
    }
    Matrix out;
    for (std::size_t i = 0; i < dim; ++i) {
        out.push_back(vector_at(j[i], fmt::format("{}[{}]", path, i), dim));
    }
    return out;
}

void check_params(const HawkesParams& p) {
    for (std::size_t i = 0; i < p.mu.size(); ++i) {
        if (p.mu[i] < 0.0) {
            throw std::invalid_argument(fmt::format("mu[{}]: must be non-negative", i));
        }
        for (std::size_t j = 0; j < p.mu.size(); ++j) {
            if (p.alpha[i][j] < 0.0) {
                throw std::invalid_argument(fmt::format("alpha[{}][{}]: must be non-negative", i, j));
            }
            if (!(p.beta[i][j] > 0.0)) {
                throw std::invalid_argument(fmt::format("beta[{}][{}]: must be positive", i, j));
            }
        }
    }
}

} // namespace

nlohmann::json to_json(const HawkesParams& params) {
    return {{"mu", params.mu}, {"alpha", params.alpha}, {"beta", params.beta}};
}

HawkesParams params_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw std::invalid_argument("params: expected an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (key != "mu" && key != "alpha" && key != "beta") {
            throw std::invalid_argument(fmt::format("params: unknown field \"{}\"", key));
        }
    }
    for (const char* field : {"mu", "alpha", "beta"}) {
        if (!j.contains(field)) {
            throw std::invalid_argument(fmt::format("params: missing field \"{}\"", field));
        }
    }
    if (!j.at("mu").is_array() || j.at("mu").empty()) {
        throw std::invalid_argument("mu: expected a non-empty array");
    }
    HawkesParams p;
    const std::size_t dim = j.at("mu").size();
    p.mu = vector_at(j.at("mu"), "mu", dim);
    p.alpha = matrix_at(j.at("alpha"), "alpha", dim);
    p.beta = matrix_at(j.at("beta"), "beta", dim);
    check_params(p);
    return p;
}

nlohmann::json to_json(const SimulationConfig& config) {
    return {{"params", to_json(config.params)},
            {"t_end", config.t_end},
            {"n_sequences", config.n_sequences},
            {"seed", config.seed}};
}

SimulationConfig simulation_config_from_json(const nlohmann::json& j, SimulationConfig c) {
    if (!j.is_object()) {
        throw std::invalid_argument("simulation config: expected an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "params") {
            c.params = params_from_json(value);
        } else if (key == "t_end") {
            c.t_end = number_at(value, "t_end");
            if (!(c.t_end > 0.0)) {
                throw std::invalid_argument("t_end: must be positive");
            }
        } else if (key == "n_sequences") {
            if (!value.is_number_unsigned()) {
                throw std::invalid_argument("n_sequences: expected a non-negative integer");
            }
            c.n_sequences = value.get<std::size_t>();
        } else if (key == "seed") {
            if (!value.is_number_unsigned()) {
                throw std::invalid_argument("seed: expected a non-negative integer");
            }
            c.seed = value.get<std::uint64_t>();
        } else {
            throw std::invalid_argument(fmt::format("simulation config: unknown field \"{}\"", key));
        }
    }
    return c;
}

} // namespace ntpp::hawkes
