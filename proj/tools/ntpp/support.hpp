#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ntpp::cli {

enum ExitCode : int { exit_ok = 0, exit_usage = 2, exit_data = 3, exit_numerical = 4 };

/// Writes via a temporary sibling and rename, so readers never see a partial file.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j);

/// Reads a JSON file; parse failures become std::invalid_argument naming the file.
nlohmann::json read_json_file(const std::filesystem::path& path);

/// FNV-1a over the file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

/// Record of one invocation, written next to its outputs.
class Manifest {
public:
    Manifest(std::string subcommand, std::vector<std::string> argv);

    void set_config(nlohmann::json config) { config_ = std::move(config); }
    void set_seed(std::uint64_t seed) { seed_ = seed; }
    void add_input(const std::filesystem::path& path);
    void add_output(const std::filesystem::path& path);

    nlohmann::json to_json() const;
    /// Stamps the wall-clock time and writes atomically.
    void write(const std::filesystem::path& path) const;

private:
    std::string subcommand_;
    std::vector<std::string> argv_;
    nlohmann::json config_ = nlohmann::json::object();
    std::uint64_t seed_{0};
    nlohmann::json inputs_ = nlohmann::json::array();
    std::vector<std::string> outputs_;
    std::chrono::steady_clock::time_point start_;
};

std::string artifact_version();

} // namespace ntpp::cli
