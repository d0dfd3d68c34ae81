#pragma once

// Run directories: artifact files with SHA-256 checksums and a manifest that
// records them per stage.

#include "srblab/core.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace srb {

#ifndef SRBLAB_VERSION
#define SRBLAB_VERSION "0.0.0"
#endif

inline std::string sha256_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error(ErrorKind::numerical_failure, "sha256: digest computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 15]);
    }
    return out;
}

struct OutputRecord {
    std::string file;
    std::string sha256;
    std::size_t bytes = 0;
};

struct StageRecord {
    std::string name;
    std::vector<OutputRecord> outputs;
    double wall_seconds = 0.0;
};

struct RunManifest {
    std::string config_hash;
    std::string version = SRBLAB_VERSION;
    std::vector<StageRecord> stages;

    // Digest over everything except wall-clock times.
    std::string checksum() const {
        nlohmann::json j = to_json(false);
        return sha256_hex(j.dump());
    }

    nlohmann::json to_json(bool with_times = true) const {
        nlohmann::json j;
        j["config_hash"] = config_hash;
        j["version"] = version;
        j["stages"] = nlohmann::json::array();
        for (const auto& s : stages) {
            nlohmann::json js;
            js["name"] = s.name;
            js["outputs"] = nlohmann::json::array();
            for (const auto& o : s.outputs) js["outputs"].push_back({{"file", o.file}, {"sha256", o.sha256}, {"bytes", o.bytes}});
            if (with_times) js["wall_seconds"] = s.wall_seconds;
            j["stages"].push_back(js);
        }
        return j;
    }
};

// Collects the outputs of one run. Files are only written when a directory
// is given; checksums are always computed.
class RunRecorder {
public:
    RunRecorder(std::string config_hash, std::filesystem::path dir = {}) : dir_(std::move(dir)) {
        manifest_.config_hash = std::move(config_hash);
        if (!dir_.empty()) {
            std::error_code ec;
            std::filesystem::create_directories(dir_, ec);
            if (ec) throw Error(ErrorKind::config, "cannot create output directory " + dir_.string() + ": " + ec.message());
        }
    }

    // Runs fn under the stage name; module errors are re-raised with the
    // stage name prepended and their kind preserved.
    template <class Fn>
    auto stage(const std::string& name, Fn&& fn) {
        manifest_.stages.push_back({name, {}, 0.0});
        current_ = manifest_.stages.size() - 1;
        const auto t0 = std::chrono::steady_clock::now();
        auto finish = [&] {
            manifest_.stages[current_].wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        };
        try {
            if constexpr (std::is_void_v<decltype(fn())>) {
                fn();
                finish();
            } else {
                auto r = fn();
                finish();
                return r;
            }
        } catch (const Error& e) {
            finish();
            throw Error(e.kind(), "stage '" + name + "': " + e.what());
        }
    }

    void write(const std::string& file, const std::string& content) {
        require(!manifest_.stages.empty(), "RunRecorder: write outside a stage");
        manifest_.stages[current_].outputs.push_back({file, sha256_hex(content), content.size()});
        if (dir_.empty()) return;
        std::ofstream os(dir_ / file, std::ios::binary);
        os << content;
        if (!os) throw Error(ErrorKind::config, "cannot write " + (dir_ / file).string());
    }

    void write_json(const std::string& file, const nlohmann::json& j) { write(file, j.dump(2) + "\n"); }

    const RunManifest& manifest() const { return manifest_; }

    // Writes manifest.json (with wall-clock times) into the run directory.
    void finish() const {
        if (dir_.empty()) return;
        nlohmann::json j = manifest_.to_json(true);
        j["checksum"] = manifest_.checksum();
        std::ofstream os(dir_ / "manifest.json");
        os << j.dump(2) << "\n";
    }

private:
    std::filesystem::path dir_;
    RunManifest manifest_;
    std::size_t current_ = 0;
};

}  // namespace srb
