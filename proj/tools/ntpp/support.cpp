#include "support.hpp"

#include <fmt/format.h>

#include <fstream>
#include <sstream>
#include <stdexcept>

#ifndef NTPP_VERSION
#define NTPP_VERSION "unknown"
#endif

namespace ntpp::cli {

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
        }
        out << text;
        out.flush();
        if (!out) {
            throw std::runtime_error(fmt::format("short write to {}", tmp.string()));
        }
    }
    std::filesystem::rename(tmp, path);
}

void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j) {
    write_text_atomic(path, j.dump(2) + "\n");
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument(fmt::format("cannot open {}", path.string()));
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(fmt::format("{}: {}", path.string(), e.what()));
    }
}

std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        return "";
    }
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return fmt::format("{:016x}", h);
}

std::string artifact_version() { return NTPP_VERSION; }

Manifest::Manifest(std::string subcommand, std::vector<std::string> argv)
    : subcommand_(std::move(subcommand)), argv_(std::move(argv)), start_(std::chrono::steady_clock::now()) {}

void Manifest::add_input(const std::filesystem::path& path) {
    inputs_.push_back({{"path", path.string()}, {"fnv1a64", file_digest(path)}});
}

void Manifest::add_output(const std::filesystem::path& path) { outputs_.push_back(path.string()); }

nlohmann::json Manifest::to_json() const {
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return {{"schema", "ntpp-run-manifest"},
            {"schema_version", 1},
            {"artifact_version", artifact_version()},
            {"subcommand", subcommand_},
            {"argv", argv_},
            {"config", config_},
            {"seed", seed_},
            {"inputs", inputs_},
            {"outputs", outputs_},
            {"wall_seconds", seconds}};
}

void Manifest::write(const std::filesystem::path& path) const { write_json_atomic(path, to_json()); }

} // namespace ntpp::cli
